#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/dataset.hpp"
#include "mpn/error.hpp"
#include "mpn/eval.hpp"
#include "mpn/losses.hpp"
#include "mpn/model.hpp"
#include "mpn/rng.hpp"

namespace mpn {

enum class Ablation { baseline, mt_only, naive_mtl, psa_c1, psa_c2, psa_both, fsa_only, mpn_o, mpn, soft_share };

inline const std::vector<std::pair<std::string, Ablation>>& ablation_names() {
  static const std::vector<std::pair<std::string, Ablation>> names{
      {"baseline", Ablation::baseline}, {"mt_only", Ablation::mt_only},   {"naive_mtl", Ablation::naive_mtl},
      {"psa_c1", Ablation::psa_c1},     {"psa_c2", Ablation::psa_c2},     {"psa_both", Ablation::psa_both},
      {"fsa_only", Ablation::fsa_only}, {"mpn_o", Ablation::mpn_o},       {"mpn", Ablation::mpn},
      {"soft_share", Ablation::soft_share}};
  return names;
}

inline std::string to_string(Ablation a) {
  for (const auto& [n, v] : ablation_names())
    if (v == a) return n;
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (const auto& [n, v] : ablation_names())
    if (n == s) return v;
  std::string known;
  for (const auto& [n, _] : ablation_names()) known += (known.empty() ? "" : "|") + n;
  throw ContractError("unknown ablation '" + s + "' (expected " + known + ")");
}

/// Model structure and alignment term of one ablation.
struct AblationWiring {
  ModelMode mode = ModelMode::full;
  bool share_conv1 = false, share_conv2 = false, share_ca = false, use_ca = false;
  bool feature_alignment = false;  // class-wise FSA or the configured variant
  bool soft_share = false;
};

inline AblationWiring wiring(Ablation a) {
  AblationWiring w;
  switch (a) {
    case Ablation::baseline: w.mode = ModelMode::baseline; break;
    case Ablation::mt_only: w.mode = ModelMode::mt_only; break;
    case Ablation::naive_mtl: w.mode = ModelMode::naive_mtl; break;
    case Ablation::psa_c1: w.share_conv1 = true; break;
    case Ablation::psa_c2: w.share_conv2 = true; break;
    case Ablation::psa_both: w.share_conv1 = w.share_conv2 = true; break;
    case Ablation::fsa_only: w.feature_alignment = true; break;
    case Ablation::mpn_o:
      w.share_conv1 = w.share_conv2 = true;
      w.feature_alignment = true;
      break;
    case Ablation::mpn:
      w.share_conv1 = w.share_conv2 = w.share_ca = w.use_ca = true;
      w.feature_alignment = true;
      break;
    case Ablation::soft_share: w.soft_share = true; break;
  }
  return w;
}

inline AlignLoss parse_fsa_variant(const std::string& s) {
  if (s == "class") return AlignLoss::class_wise;
  if (s == "sample") return AlignLoss::sample_wise;
  if (s == "batch") return AlignLoss::batch_wise;
  if (s == "summed") return AlignLoss::summed_triplet;
  throw ContractError("unknown fsa variant '" + s + "' (expected class|sample|batch|summed)");
}

inline std::string prior_variant_name(PriorVariant v) {
  switch (v) {
    case PriorVariant::coarse: return "coarse";
    case PriorVariant::uniform: return "uniform";
    case PriorVariant::roi_resize: return "roi_resize";
  }
  return "?";
}

struct TrainConfig {
  std::size_t epochs = 70;
  double lr = 0.01;
  double lr_decay = 0.1;
  std::size_t lr_step = 20;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t S = 6, A = 8;
  double alpha = 0.2;
  double lambda = 1.0;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::mpn;
  AlignLoss fsa_variant = AlignLoss::class_wise;
  PriorVariant prior = PriorVariant::coarse;
  double soft_share_weight = 0.1;
  std::string soft_share_layer = "all";
  std::size_t eval_every = 0;  // 0: evaluate after the last epoch only
  std::size_t max_steps = 0;   // 0: no cap; otherwise training stops after this many updates
  AugmentOptions augment;
  MpnConfig model;  // mode, sharing, CA, class count and image size are filled in from the ablation and corpus

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{
        "train.epochs", "train.lr", "train.lr_decay", "train.lr_step", "train.momentum", "train.weight_decay",
        "train.S", "train.A", "train.alpha", "train.lambda", "train.seed", "train.ablation", "train.fsa_variant",
        "train.prior_variant", "train.soft_share_weight", "train.soft_share_layer", "train.eval_every",
        "train.max_steps",
        "train.flip_prob", "train.erase_prob", "model.K", "model.feature_dim", "model.ca_reduction",
        "model.backbone_widths", "model.backbone_strides"};
    return k;
  }

  void validate() const {
    require(epochs >= 1, "train: epochs must be >= 1");
    require(lr > 0 && lr_decay > 0 && lr_step >= 1, "train: lr, lr_decay and lr_step must be positive");
    require(momentum >= 0 && momentum < 1, "train: momentum must lie in [0, 1)");
    require(weight_decay >= 0, "train: weight_decay must be non-negative");
    require(S >= 2 && A >= 2, "train: batch-hard triplets need S >= 2 and A >= 2");
    require(alpha >= 0 && lambda >= 0, "train: alpha and lambda must be non-negative");
    require(soft_share_weight >= 0, "train: soft_share_weight must be non-negative");
    require(soft_share_layer == "conv1" || soft_share_layer == "conv2" || soft_share_layer == "all",
            "train: soft_share_layer must be conv1|conv2|all");
    require(augment.flip_prob >= 0 && augment.flip_prob <= 1 && augment.erase_prob >= 0 && augment.erase_prob <= 1,
            "train: augmentation probabilities must lie in [0, 1]");
  }

  static TrainConfig from(const KeyValues& kv) {
    std::set<std::string> known = keys();
    kv.require_known(known);
    TrainConfig c;
    auto count = [&](const char* key, std::size_t fallback) {
      const long long v = kv.get_int(key, static_cast<long long>(fallback));
      require(v >= 0, std::string(key) + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.epochs = count("train.epochs", c.epochs);
    c.lr = kv.get_double("train.lr", c.lr);
    c.lr_decay = kv.get_double("train.lr_decay", c.lr_decay);
    c.lr_step = count("train.lr_step", c.lr_step);
    c.momentum = kv.get_double("train.momentum", c.momentum);
    c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
    c.S = count("train.S", c.S);
    c.A = count("train.A", c.A);
    c.alpha = kv.get_double("train.alpha", c.alpha);
    c.lambda = kv.get_double("train.lambda", c.lambda);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(c.seed)));
    c.ablation = parse_ablation(kv.get_string("train.ablation", to_string(c.ablation)));
    c.fsa_variant = parse_fsa_variant(kv.get_string("train.fsa_variant", "class"));
    c.prior = parse_prior_variant(kv.get_string("train.prior_variant", prior_variant_name(c.prior)));
    c.soft_share_weight = kv.get_double("train.soft_share_weight", c.soft_share_weight);
    c.soft_share_layer = kv.get_string("train.soft_share_layer", c.soft_share_layer);
    c.eval_every = count("train.eval_every", c.eval_every);
    c.max_steps = count("train.max_steps", c.max_steps);
    c.augment.flip_prob = kv.get_double("train.flip_prob", c.augment.flip_prob);
    c.augment.erase_prob = kv.get_double("train.erase_prob", c.augment.erase_prob);
    KeyValues model_kv;
    for (const auto& [k, v] : kv.entries())
      if (k.rfind("model.", 0) == 0) model_kv.set(k, v);
    const MpnConfig m = MpnConfig::from(model_kv);
    c.model.parts = m.parts;
    c.model.feature_dim = m.feature_dim;
    c.model.ca_reduction = m.ca_reduction;
    c.model.backbone_widths = m.backbone_widths;
    c.model.backbone_strides = m.backbone_strides;
    c.validate();
    return c;
  }

  /// Every key with its resolved value.
  KeyValues to_kv() const {
    KeyValues kv;
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.lr", format_double(lr));
    kv.set("train.lr_decay", format_double(lr_decay));
    kv.set("train.lr_step", std::to_string(lr_step));
    kv.set("train.momentum", format_double(momentum));
    kv.set("train.weight_decay", format_double(weight_decay));
    kv.set("train.S", std::to_string(S));
    kv.set("train.A", std::to_string(A));
    kv.set("train.alpha", format_double(alpha));
    kv.set("train.lambda", format_double(lambda));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.ablation", to_string(ablation));
    kv.set("train.fsa_variant", fsa_variant == AlignLoss::class_wise    ? "class"
                                : fsa_variant == AlignLoss::sample_wise ? "sample"
                                : fsa_variant == AlignLoss::batch_wise  ? "batch"
                                                                        : "summed");
    kv.set("train.prior_variant", prior_variant_name(prior));
    kv.set("train.soft_share_weight", format_double(soft_share_weight));
    kv.set("train.soft_share_layer", soft_share_layer);
    kv.set("train.eval_every", std::to_string(eval_every));
    kv.set("train.max_steps", std::to_string(max_steps));
    kv.set("train.flip_prob", format_double(augment.flip_prob));
    kv.set("train.erase_prob", format_double(augment.erase_prob));
    kv.set("model.K", std::to_string(model.parts));
    kv.set("model.feature_dim", std::to_string(model.feature_dim));
    kv.set("model.ca_reduction", std::to_string(model.ca_reduction));
    kv.set("model.backbone_widths", list(model.backbone_widths));
    kv.set("model.backbone_strides", list(model.backbone_strides));
    return kv;
  }

  /// Model configuration for a corpus of `classes` training identities.
  MpnConfig model_config(std::size_t classes, std::size_t image_h, std::size_t image_w) const {
    const AblationWiring w = wiring(ablation);
    MpnConfig m = model;
    m.mode = w.mode;
    m.share_conv1 = w.share_conv1;
    m.share_conv2 = w.share_conv2;
    m.share_ca = w.share_ca;
    m.use_ca = w.use_ca;
    m.num_classes = classes;
    m.image_h = image_h;
    m.image_w = image_w;
    m.seed = seed;
    m.validate();
    return m;
  }

  LossOptions loss_options() const {
    const AblationWiring w = wiring(ablation);
    LossOptions o;
    o.alpha = alpha;
    o.lambda = lambda;
    o.align = w.feature_alignment ? fsa_variant : w.soft_share ? AlignLoss::soft_share : AlignLoss::none;
    o.soft_share_weight = soft_share_weight;
    return o;
  }
};

/// Step schedule: lr * decay^floor(epoch / step).
inline double lr_at(std::size_t epoch, double base = 0.01, double decay = 0.1, std::size_t step = 20) {
  return base * std::pow(decay, static_cast<double>(epoch / step));
}

/// Momentum buffers keyed by parameter storage.
struct SgdState {
  std::unordered_map<const void*, std::vector<double>> velocity;
};

/// v <- m v + g + wd p;  p <- p - lr v.
inline void sgd_step(std::span<const std::pair<std::string, Tensor>> params, SgdState& state, double lr,
                     double momentum, double weight_decay) {
  for (const auto& [name, t] : params) {
    require(t.has_grad(), "sgd_step: parameter " + name + " has no gradient");
    Tensor p = t;
    auto& v = state.velocity[p.impl()];
    if (v.empty()) v.assign(p.numel(), 0.0);
    require(v.size() == p.numel(), "sgd_step: velocity shape mismatch for " + name);
    auto data = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + grad[i] + weight_decay * data[i];
      data[i] -= lr * v[i];
    }
  }
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_id = 0, l_tri = 0, l_cf = 0, total = 0;
  bool evaluated = false;
  double rank1 = 0, map = 0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch,l_id,l_tri,l_cf,total,rank1,mAP\n";
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + format_double(r.l_id) + "," + format_double(r.l_tri) + "," +
           format_double(r.l_cf) + "," + format_double(r.total) + "," +
           (r.evaluated ? format_double(r.rank1) + "," + format_double(r.map) : std::string(",")) + "\n";
  return out;
}

struct TrainResult {
  MpnModel model;
  std::vector<EpochMetrics> metrics;
  RankingResult final_ranking;
  std::size_t steps = 0;
};

/// Trains on a loaded dataset. Priors must have been computed unless the
/// ablation trains without prior-aligned AT inputs.
class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochMetrics&)>;

  Trainer(TrainConfig config, const Dataset& data) : config_(std::move(config)), data_(data) {
    config_.validate();
    split_ = make_split(data_);
    for (std::size_t i = 0; i < split_.train_ids.size(); ++i) class_of_[split_.train_ids[i]] = static_cast<int>(i);
    for (auto idx : split_.train) pool_[data_.samples[idx].entry.identity].push_back(idx);
    require(pool_.size() >= config_.S, "train: " + std::to_string(pool_.size()) +
                                           " training identities cannot fill S=" + std::to_string(config_.S));
  }

  const Split& split() const { return split_; }

  TrainResult run(const EpochCallback& on_epoch = {}) {
    const MpnConfig mc = config_.model_config(split_.train_ids.size(), data_.height, data_.width);
    TrainResult result{MpnModel(mc), {}, {}, 0};
    MpnModel& model = result.model;
    const auto params = model.parameters();
    const LossOptions lo = config_.loss_options();
    const bool needs_priors = model.has_at() && mc.mode != ModelMode::baseline;
    if (needs_priors)
      for (auto idx : split_.train)
        require(data_.samples[idx].prior.rows == mc.feat_h() && data_.samples[idx].prior.cols == mc.feat_w(),
                "train: prior of " + data_.samples[idx].entry.path + " does not match the " +
                    std::to_string(mc.feat_h()) + "x" + std::to_string(mc.feat_w()) + " feature grid");
    std::vector<std::pair<Tensor, Tensor>> shared_pairs;
    if (lo.align == AlignLoss::soft_share) shared_pairs = model.paired_parameters(config_.soft_share_layer);

    SgdState sgd;
    const std::size_t per = 3 * data_.height * data_.width;
    for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
      Rng sampler = Rng::stream(config_.seed, 0xE0000 + epoch);
      const auto batches = epoch_batches(pool_, config_.S, config_.A, sampler);
      const double lr = lr_at(epoch, config_.lr, config_.lr_decay, config_.lr_step);
      EpochMetrics em;
      em.epoch = epoch;
      std::size_t done = 0;
      for (std::size_t bi = 0; bi < batches.size() && !capped(result.steps); ++bi, ++done) {
        const Batch& b = batches[bi];
        Rng aug = Rng::stream(config_.seed, (static_cast<std::uint64_t>(epoch) << 20) + bi + 0x100000000ULL);
        std::vector<double> images(b.samples.size() * per);
        std::vector<PartPrior> priors;
        std::vector<int> labels;
        for (std::size_t i = 0; i < b.samples.size(); ++i) {
          const Sample& s = data_.samples[b.samples[i]];
          std::vector<double> chw = s.chw;
          PartPrior prior = s.prior;
          augment(chw, data_.height, data_.width, needs_priors ? &prior : nullptr, aug, config_.augment);
          std::copy(chw.begin(), chw.end(), images.begin() + static_cast<std::ptrdiff_t>(i * per));
          if (needs_priors) priors.push_back(std::move(prior));
          labels.push_back(class_of_.at(b.identities[i]));
        }
        const Tensor x({b.samples.size(), 3, data_.height, data_.width}, std::move(images));
        for (const auto& [_, p] : params) {
          Tensor t = p;
          t.grad_buffer();
          t.zero_grad();
        }
        Tape tape;
        const ForwardResult f = model.forward(x, priors, Mode::train);
        LossInputs in{f.mt_logits, f.at_logits, f.h, f.g, labels, b.s, b.a, shared_pairs};
        const LossBundle loss = total_loss(in, lo);
        const double values[] = {loss.l_id.item(), loss.l_tri.item(), loss.l_cf.item(), loss.total.item()};
        for (double v : values)
          if (!std::isfinite(v))
            throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(bi) + ": l_id=" + format_double(values[0]) +
                               " l_tri=" + format_double(values[1]) + " l_cf=" + format_double(values[2]) +
                               " total=" + format_double(values[3]) + " (lr=" + format_double(lr) + ")");
        tape.backward(loss.total);
        sgd_step(params, sgd, lr, config_.momentum, config_.weight_decay);
        em.l_id += values[0];
        em.l_tri += values[1];
        em.l_cf += values[2];
        em.total += values[3];
        ++result.steps;
      }
      const double nb = static_cast<double>(std::max<std::size_t>(1, done));
      em.l_id /= nb;
      em.l_tri /= nb;
      em.l_cf /= nb;
      em.total /= nb;
      const bool last = epoch + 1 == config_.epochs || capped(result.steps);
      if (last || (config_.eval_every > 0 && (epoch + 1) % config_.eval_every == 0)) {
        const EvalOutput ev = evaluate(model, data_, split_.query, split_.gallery);
        em.evaluated = true;
        em.rank1 = ev.ranking.rank1;
        em.map = ev.ranking.map;
        if (last) result.final_ranking = ev.ranking;
      }
      result.metrics.push_back(em);
      if (on_epoch) on_epoch(em);
      if (last) break;
    }
    return result;
  }

 private:
  bool capped(std::size_t steps) const { return config_.max_steps > 0 && steps >= config_.max_steps; }

  TrainConfig config_;
  const Dataset& data_;
  Split split_;
  std::map<int, int> class_of_;
  std::map<int, std::vector<std::size_t>> pool_;
};

/// Loads the corpus with the priors the configuration needs and trains.
inline TrainResult train_run(const TrainConfig& config, const std::filesystem::path& corpus,
                             const Trainer::EpochCallback& on_epoch = {}) {
  const AblationWiring w = wiring(config.ablation);
  const bool priors = w.mode != ModelMode::baseline && w.mode != ModelMode::mt_only;
  PriorOptions po;
  po.parts = config.model.parts;
  const Dataset data = [&] {
    // Feature grid follows the backbone stride product.
    Dataset probe = Dataset::load(corpus, false);
    if (!priors) return probe;
    std::size_t stride = 1;
    for (auto s : config.model.backbone_strides) stride *= s;
    po.feat_h = probe.height / stride;
    po.feat_w = probe.width / stride;
    return Dataset::load(corpus, true, config.prior, po);
  }();
  Trainer trainer(config, data);
  return trainer.run(on_epoch);
}

}  // namespace mpn
