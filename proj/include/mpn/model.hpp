#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/error.hpp"
#include "mpn/ops.hpp"
#include "mpn/prior.hpp"
#include "mpn/rng.hpp"
#include "mpn/serialize.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

enum class ModelMode { baseline, mt_only, naive_mtl, full };

inline std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::baseline: return "baseline";
    case ModelMode::mt_only: return "mt_only";
    case ModelMode::naive_mtl: return "naive_mtl";
    case ModelMode::full: return "full";
  }
  return "?";
}

inline ModelMode parse_model_mode(const std::string& s) {
  if (s == "baseline") return ModelMode::baseline;
  if (s == "mt_only") return ModelMode::mt_only;
  if (s == "naive_mtl") return ModelMode::naive_mtl;
  if (s == "full") return ModelMode::full;
  throw ContractError("unknown model mode '" + s + "' (expected baseline|mt_only|naive_mtl|full)");
}

struct MpnConfig {
  std::size_t parts = 6;
  std::size_t feature_dim = 512;
  std::size_t ca_reduction = 16;
  std::size_t num_classes = 1;
  std::size_t in_channels = 3;
  std::size_t image_h = 96, image_w = 32;
  std::vector<std::size_t> backbone_widths{32, 64, 128, 256};
  std::vector<std::size_t> backbone_strides{2, 2, 1, 1};
  bool use_ca = false;
  bool share_conv1 = false, share_conv2 = false, share_ca = false;
  ModelMode mode = ModelMode::full;
  std::uint64_t seed = 1;

  bool has_mt() const { return mode != ModelMode::baseline; }
  bool has_at() const { return mode != ModelMode::mt_only; }

  std::size_t stride_product() const {
    std::size_t p = 1;
    for (auto s : backbone_strides) p *= s;
    return p;
  }
  std::size_t feat_h() const { return image_h / stride_product(); }
  std::size_t feat_w() const { return image_w / stride_product(); }
  std::size_t embedding_dim() const { return parts * feature_dim; }

  void validate() const {
    require(parts >= 1, "model: K must be >= 1");
    require(feature_dim >= 1 && num_classes >= 1 && in_channels >= 1, "model: dimensions must be positive");
    require(!backbone_widths.empty() && backbone_widths.size() == backbone_strides.size(),
            "model: backbone_widths and backbone_strides must have the same nonzero length");
    for (auto s : backbone_strides) require(s >= 1, "model: backbone strides must be >= 1");
    for (auto w : backbone_widths) require(w >= 1, "model: backbone widths must be >= 1");
    require(image_h % stride_product() == 0 && image_w % stride_product() == 0,
            "model: image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                " is not divisible by the backbone stride product " + std::to_string(stride_product()));
    require(feat_h() >= parts, "model: feature map height " + std::to_string(feat_h()) + " is smaller than K");
    require(!use_ca || (ca_reduction >= 1 && feature_dim / ca_reduction >= 1),
            "model: ca_reduction must leave at least one squeeze channel");
    const bool shares = share_conv1 || share_conv2 || share_ca;
    require(!(shares && mode != ModelMode::full), "model: parameter sharing requires mode=full");
    require(!(share_ca && !use_ca), "model: share_ca requires use_ca");
  }

  KeyValues to_kv() const {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    KeyValues kv;
    kv.set("model.K", std::to_string(parts));
    kv.set("model.feature_dim", std::to_string(feature_dim));
    kv.set("model.ca_reduction", std::to_string(ca_reduction));
    kv.set("model.num_classes", std::to_string(num_classes));
    kv.set("model.in_channels", std::to_string(in_channels));
    kv.set("model.image_h", std::to_string(image_h));
    kv.set("model.image_w", std::to_string(image_w));
    kv.set("model.backbone_widths", list(backbone_widths));
    kv.set("model.backbone_strides", list(backbone_strides));
    kv.set("model.use_ca", use_ca ? "true" : "false");
    kv.set("model.share_conv1", share_conv1 ? "true" : "false");
    kv.set("model.share_conv2", share_conv2 ? "true" : "false");
    kv.set("model.share_ca", share_ca ? "true" : "false");
    kv.set("model.mode", to_string(mode));
    kv.set("model.seed", std::to_string(seed));
    return kv;
  }

  static MpnConfig from(const KeyValues& kv) {
    MpnConfig c;
    auto count = [&](const char* key, std::size_t fallback) {
      const long long v = kv.get_int(key, static_cast<long long>(fallback));
      require(v >= 0, std::string(key) + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    auto list = [&](const char* key, const std::vector<std::size_t>& fallback) {
      std::vector<long long> fb(fallback.begin(), fallback.end());
      std::vector<std::size_t> out;
      for (long long v : kv.get_int_list(key, fb)) {
        require(v >= 0, std::string(key) + " entries must be non-negative");
        out.push_back(static_cast<std::size_t>(v));
      }
      return out;
    };
    c.parts = count("model.K", c.parts);
    c.feature_dim = count("model.feature_dim", c.feature_dim);
    c.ca_reduction = count("model.ca_reduction", c.ca_reduction);
    c.num_classes = count("model.num_classes", c.num_classes);
    c.in_channels = count("model.in_channels", c.in_channels);
    c.image_h = count("model.image_h", c.image_h);
    c.image_w = count("model.image_w", c.image_w);
    c.backbone_widths = list("model.backbone_widths", c.backbone_widths);
    c.backbone_strides = list("model.backbone_strides", c.backbone_strides);
    c.use_ca = kv.get_bool("model.use_ca", c.use_ca);
    c.share_conv1 = kv.get_bool("model.share_conv1", c.share_conv1);
    c.share_conv2 = kv.get_bool("model.share_conv2", c.share_conv2);
    c.share_ca = kv.get_bool("model.share_ca", c.share_ca);
    c.mode = parse_model_mode(kv.get_string("model.mode", to_string(c.mode)));
    c.seed = static_cast<std::uint64_t>(kv.get_int("model.seed", static_cast<long long>(c.seed)));
    c.validate();
    return c;
  }
};

/// Process-wide counters used by tests to observe structural behavior.
struct Instrumentation {
  std::atomic<std::size_t> prior_reads{0};
  std::atomic<std::size_t> mt_heads_built{0};
  std::atomic<std::size_t> at_heads_built{0};

  void reset() {
    prior_reads = 0;
    mt_heads_built = 0;
    at_heads_built = 0;
  }
};

inline Instrumentation& instrumentation() {
  static Instrumentation inst;
  return inst;
}

/// Weight (conv or linear, no bias) followed by batch normalization.
struct NormUnit {
  Tensor weight;  // [O, C, kh, kw] for conv, [O, C] for linear
  Tensor gamma, beta;
  BatchNormStats stats;
  Conv2dParams conv;

  NormUnit() = default;
  NormUnit(Rng& rng, Shape weight_shape, Conv2dParams params = {}) : conv(params) {
    const std::size_t out = weight_shape[0];
    const std::size_t fan_in = shape_numel(weight_shape) / out;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(shape_numel(weight_shape));
    for (auto& v : w) v = rng.normal() * std_dev;
    weight = Tensor(std::move(weight_shape), std::move(w), true);
    gamma = Tensor::full({out}, 1.0, true);
    beta = Tensor::zeros({out}, true);
    stats = BatchNormStats(out);
  }

  bool is_conv() const { return weight.rank() == 4; }

  Tensor forward(const Tensor& x, Mode mode, bool update_running, bool with_relu) {
    const Tensor z = is_conv() ? conv2d(x, weight, {}, conv) : linear(x, weight);
    const Tensor y = batchnorm(z, gamma, beta, stats, mode, update_running);
    return with_relu ? relu(y) : y;
  }
};

/// Squeeze-and-excitation gate over a feature vector.
struct ChannelAttention {
  NormUnit squeeze, excite;

  ChannelAttention(Rng& rng, std::size_t dim, std::size_t reduction)
      : squeeze(rng, {dim / reduction, dim}), excite(rng, {dim, dim / reduction}) {}

  Tensor gate(const Tensor& x, Mode mode, bool update_running) {
    const Tensor s = squeeze.forward(x, mode, update_running, true);
    return sigmoid(excite.forward(s, mode, update_running, false));
  }
  Tensor forward(const Tensor& x, Mode mode, bool update_running) { return mul(x, gate(x, mode, update_running)); }
};

/// One part head: 1x1 conv, GMP, optional CA, second 1x1 conv (a linear map
/// on the pooled vector), and a classifier. Blocks are held by shared_ptr so
/// two heads can alias them.
struct PartHead {
  std::shared_ptr<NormUnit> conv1;
  std::shared_ptr<ChannelAttention> ca;  // null when disabled
  std::shared_ptr<NormUnit> conv2;
  Tensor classifier_w, classifier_b;

  struct Output {
    Tensor feature;  // [N, D]
    Tensor logits;   // [N, classes]
  };
};

struct Backbone {
  std::vector<NormUnit> blocks;

  Tensor forward(const Tensor& images, Mode mode, bool update_running) {
    Tensor x = images;
    for (auto& b : blocks) x = b.forward(x, mode, update_running, true);
    return x;
  }
};

/// AT inputs from evenly divided row strips of `x`, each resized to the full
/// spatial size of `x`.
inline std::vector<Tensor> strip_inputs(const Tensor& x, std::size_t parts) {
  require(x.rank() == 4, "strip_inputs: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(2), w = x.dim(3);
  require(h >= parts, "strip_inputs: map height " + std::to_string(h) + " smaller than K");
  std::vector<Tensor> out;
  for (const RowRange& r : partition_rows(0, h, parts)) {
    const Tensor s = slice(x, 2, r.begin, r.end);
    out.push_back(s.dim(2) == h ? s : bilinear_resize(s, h, w));
  }
  return out;
}

/// Part-specific maps: mask multiply, ROI crop resized to the full map, then
/// uniform strips each resized to the full map.
inline std::vector<Tensor> make_part_inputs(const Tensor& f, std::span<const PartPrior> priors, std::size_t parts) {
  ++instrumentation().prior_reads;
  require(f.rank() == 4, "make_part_inputs: expected NCHW, got " + shape_str(f.shape()));
  const std::size_t n = f.dim(0), h = f.dim(2), w = f.dim(3);
  require(priors.size() == n, "make_part_inputs: " + std::to_string(priors.size()) + " priors for batch of " +
                                  std::to_string(n));
  for (const auto& p : priors) {
    require(p.rows == h && p.cols == w,
            "make_part_inputs: prior grid " + std::to_string(p.rows) + "x" + std::to_string(p.cols) +
                " does not match feature map " + std::to_string(h) + "x" + std::to_string(w));
    require(p.roi_top <= p.roi_bottom && p.roi_bottom < h, "make_part_inputs: empty ROI; use the fallback prior");
  }

  Tensor masked = f;
  if (!std::all_of(priors.begin(), priors.end(), [](const PartPrior& p) { return p.mask_all_ones(); })) {
    std::vector<double> m(n * h * w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < h * w; ++j) m[i * h * w + j] = priors[i].mask[j];
    masked = apply_spatial_mask(f, m);
  }

  auto full_roi = [&](const PartPrior& p) { return p.roi_top == 0 && p.roi_bottom + 1 == h; };
  Tensor aligned = masked;
  if (!std::all_of(priors.begin(), priors.end(), full_roi)) {
    std::vector<Tensor> per_image;
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor xi = n == 1 ? masked : slice(masked, 0, i, i + 1);
      per_image.push_back(full_roi(priors[i])
                              ? xi
                              : bilinear_resize(slice(xi, 2, priors[i].roi_top, priors[i].roi_bottom + 1), h, w));
    }
    aligned = n == 1 ? per_image[0] : concat(per_image, 0);
  }
  return strip_inputs(aligned, parts);
}

struct ForwardResult {
  Tensor features_map;                       // F
  std::vector<Tensor> mt_features, mt_logits;  // per part, empty without MT heads
  std::vector<Tensor> at_features, at_logits;  // per part, empty without AT heads
  Tensor h;                                  // [N, K*D], the inference representation
  Tensor g;                                  // [N, K*D] concat of AT features when both branches exist
};

/// Backbone plus K MT/AT head pairs.
class MpnModel {
 public:
  explicit MpnModel(MpnConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng = Rng::stream(config_.seed, 0x1417);
    std::size_t in = config_.in_channels;
    for (std::size_t i = 0; i < config_.backbone_widths.size(); ++i) {
      const std::size_t out = config_.backbone_widths[i], s = config_.backbone_strides[i];
      backbone_.blocks.emplace_back(rng, Shape{out, in, 3, 3}, Conv2dParams{s, s, 1, 1});
      in = out;
    }
    const std::size_t c = in, d = config_.feature_dim;
    for (std::size_t k = 0; k < config_.parts; ++k) {
      PartPair pair;
      if (config_.has_mt()) {
        pair.mt = make_head(rng, c, d);
        ++instrumentation().mt_heads_built;
      }
      if (config_.has_at()) {
        pair.at = make_head(rng, c, d);
        ++instrumentation().at_heads_built;
        if (config_.share_conv1) pair.at->conv1 = pair.mt->conv1;
        if (config_.share_conv2) pair.at->conv2 = pair.mt->conv2;
        if (config_.share_ca) pair.at->ca = pair.mt->ca;
      }
      pairs_.push_back(std::move(pair));
    }
  }

  MpnModel(const MpnModel&) = delete;
  MpnModel& operator=(const MpnModel&) = delete;
  MpnModel(MpnModel&&) = default;
  MpnModel& operator=(MpnModel&&) = default;

  const MpnConfig& config() const { return config_; }
  bool has_mt() const { return config_.has_mt(); }
  bool has_at() const { return config_.has_at(); }

  /// Running statistics are frozen while false (used by finite-difference checks).
  void set_update_running_stats(bool on) { update_running_ = on; }

  Backbone& backbone() { return backbone_; }
  PartHead& mt_head(std::size_t k) {
    require(k < pairs_.size() && pairs_[k].mt, "model has no MT head " + std::to_string(k));
    return *pairs_[k].mt;
  }
  PartHead& at_head(std::size_t k) {
    require(k < pairs_.size() && pairs_[k].at, "model has no AT head " + std::to_string(k));
    return *pairs_[k].at;
  }

  Tensor forward_backbone(const Tensor& images, Mode mode) {
    require(images.rank() == 4 && images.dim(1) == config_.in_channels && images.dim(2) == config_.image_h &&
                images.dim(3) == config_.image_w,
            "forward_backbone: expected [N," + std::to_string(config_.in_channels) + "," +
                std::to_string(config_.image_h) + "," + std::to_string(config_.image_w) + "] images, got " +
                shape_str(images.shape()));
    return backbone_.forward(images, mode, mode == Mode::train && update_running_);
  }

  enum class Branch { mt, at };

  PartHead::Output forward_head(std::size_t k, const Tensor& input, Branch branch, Mode mode) {
    require(k < pairs_.size(), "forward_head: part index out of range");
    const bool mt = branch == Branch::mt;
    require(mt ? has_mt() : has_at(),
            std::string("forward_head: ") + (mt ? "MT" : "AT") + " branch disabled in mode " + to_string(config_.mode));
    PartHead& head = mt ? *pairs_[k].mt : *pairs_[k].at;
    require(input.rank() == 4 && input.dim(1) == head.conv1->weight.dim(1),
            "forward_head: expected " + std::to_string(head.conv1->weight.dim(1)) + "-channel maps, got " +
                shape_str(input.shape()));
    // Running statistics follow the branch used at inference: an AT block
    // aliased to its MT partner leaves them to the MT pass.
    auto updates = [&](const void* block, const void* mt_block) {
      if (mode != Mode::train || !update_running_) return false;
      return mt || block != mt_block;
    };
    const PartHead* partner = pairs_[k].mt ? pairs_[k].mt.get() : nullptr;
    const void* p_conv1 = partner ? partner->conv1.get() : nullptr;
    const void* p_ca = partner ? partner->ca.get() : nullptr;
    const void* p_conv2 = partner ? partner->conv2.get() : nullptr;

    Tensor x = head.conv1->forward(input, mode, updates(head.conv1.get(), p_conv1), true);
    x = global_max_pool(x);
    if (head.ca) x = head.ca->forward(x, mode, updates(head.ca.get(), p_ca));
    PartHead::Output out;
    out.feature = head.conv2->forward(x, mode, updates(head.conv2.get(), p_conv2), true);
    out.logits = linear(out.feature, head.classifier_w, head.classifier_b);
    return out;
  }

  /// Full training forward. `priors` supplies one PartPrior per image and is
  /// required whenever AT heads consume prior-aligned maps.
  ForwardResult forward(const Tensor& images, std::span<const PartPrior> priors, Mode mode) {
    ForwardResult r;
    r.features_map = forward_backbone(images, mode);
    const std::size_t parts = config_.parts;
    if (has_mt()) {
      for (std::size_t k = 0; k < parts; ++k) {
        auto o = forward_head(k, r.features_map, Branch::mt, mode);
        r.mt_features.push_back(o.feature);
        r.mt_logits.push_back(o.logits);
      }
    }
    if (has_at()) {
      const std::vector<Tensor> inputs = config_.mode == ModelMode::baseline
                                             ? strip_inputs(r.features_map, parts)
                                             : make_part_inputs(r.features_map, priors, parts);
      for (std::size_t k = 0; k < parts; ++k) {
        auto o = forward_head(k, inputs[k], Branch::at, mode);
        r.at_features.push_back(o.feature);
        r.at_logits.push_back(o.logits);
      }
    }
    r.h = concat(has_mt() ? r.mt_features : r.at_features, 1);
    if (has_mt() && has_at()) r.g = concat(r.at_features, 1);
    return r;
  }

  /// Inference representation of a batch without recording and without any
  /// prior: MT features, or AT features on uniform strips for the baseline.
  Tensor embed(const Tensor& images) {
    NoGradScope no_grad;
    const Tensor f = forward_backbone(images, Mode::eval);
    std::vector<Tensor> feats;
    if (has_mt()) {
      for (std::size_t k = 0; k < config_.parts; ++k) feats.push_back(forward_head(k, f, Branch::mt, Mode::eval).feature);
    } else {
      const auto inputs = strip_inputs(f, config_.parts);
      for (std::size_t k = 0; k < config_.parts; ++k)
        feats.push_back(forward_head(k, inputs[k], Branch::at, Mode::eval).feature);
    }
    return concat(feats, 1);
  }

  /// Named trainable tensors, each storage listed once under its first name.
  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    std::unordered_set<const void*> seen;
    for (auto& [name, t] : named_tensors())
      if (seen.insert(t.impl()).second) out.emplace_back(name, t);
    return out;
  }

  /// Every parameter name, aliases included, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto unit = [&](const std::string& prefix, const NormUnit& u) {
      out.emplace_back(prefix + ".weight", u.weight);
      out.emplace_back(prefix + ".gamma", u.gamma);
      out.emplace_back(prefix + ".beta", u.beta);
    };
    for (std::size_t i = 0; i < backbone_.blocks.size(); ++i) unit("backbone." + std::to_string(i), backbone_.blocks[i]);
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      for (const auto* branch : {"mt", "at"}) {
        const auto& head = std::string(branch) == "mt" ? pairs_[k].mt : pairs_[k].at;
        if (!head) continue;
        const std::string p = "part" + std::to_string(k) + "." + branch;
        unit(p + ".conv1", *head->conv1);
        if (head->ca) {
          unit(p + ".ca.squeeze", head->ca->squeeze);
          unit(p + ".ca.excite", head->ca->excite);
        }
        unit(p + ".conv2", *head->conv2);
        out.emplace_back(p + ".classifier.weight", head->classifier_w);
        out.emplace_back(p + ".classifier.bias", head->classifier_b);
      }
    }
    return out;
  }

  /// Batch-norm running statistics by name (aliased blocks listed once).
  std::vector<std::pair<std::string, BatchNormStats*>> named_stats() {
    std::vector<std::pair<std::string, BatchNormStats*>> out;
    std::unordered_set<const void*> seen;
    auto unit = [&](const std::string& prefix, NormUnit& u) {
      if (seen.insert(&u).second) out.emplace_back(prefix, &u.stats);
    };
    for (std::size_t i = 0; i < backbone_.blocks.size(); ++i) unit("backbone." + std::to_string(i), backbone_.blocks[i]);
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      for (const auto* branch : {"mt", "at"}) {
        const auto& head = std::string(branch) == "mt" ? pairs_[k].mt : pairs_[k].at;
        if (!head) continue;
        const std::string p = "part" + std::to_string(k) + "." + branch;
        unit(p + ".conv1", *head->conv1);
        if (head->ca) {
          unit(p + ".ca.squeeze", head->ca->squeeze);
          unit(p + ".ca.excite", head->ca->excite);
        }
        unit(p + ".conv2", *head->conv2);
      }
    }
    return out;
  }

  /// MT/AT parameter pairs of the named head layer ("conv1", "conv2", "ca"
  /// or "all") for the soft-sharing penalty.
  std::vector<std::pair<Tensor, Tensor>> paired_parameters(const std::string& layer) const {
    require(has_mt() && has_at(), "paired_parameters needs both branches");
    require(layer == "conv1" || layer == "conv2" || layer == "ca" || layer == "all",
            "unknown head layer '" + layer + "' (expected conv1|conv2|ca|all)");
    std::vector<std::pair<Tensor, Tensor>> out;
    auto add = [&](const NormUnit& a, const NormUnit& b) {
      out.emplace_back(a.weight, b.weight);
      out.emplace_back(a.gamma, b.gamma);
      out.emplace_back(a.beta, b.beta);
    };
    for (const auto& pair : pairs_) {
      if (layer == "conv1" || layer == "all") add(*pair.mt->conv1, *pair.at->conv1);
      if ((layer == "ca" || layer == "all") && pair.mt->ca) {
        add(pair.mt->ca->squeeze, pair.at->ca->squeeze);
        add(pair.mt->ca->excite, pair.at->ca->excite);
      }
      if (layer == "conv2" || layer == "all") add(*pair.mt->conv2, *pair.at->conv2);
    }
    return out;
  }

 private:
  struct PartPair {
    std::shared_ptr<PartHead> mt, at;
  };

  std::shared_ptr<PartHead> make_head(Rng& rng, std::size_t c, std::size_t d) {
    auto h = std::make_shared<PartHead>();
    h->conv1 = std::make_shared<NormUnit>(rng, Shape{d, c, 1, 1});
    if (config_.use_ca) h->ca = std::make_shared<ChannelAttention>(rng, d, config_.ca_reduction);
    h->conv2 = std::make_shared<NormUnit>(rng, Shape{d, d});
    const std::size_t n = config_.num_classes;
    std::vector<double> w(n * d);
    const double std_dev = std::sqrt(1.0 / static_cast<double>(d));
    for (auto& v : w) v = rng.normal() * std_dev;
    h->classifier_w = Tensor({n, d}, std::move(w), true);
    h->classifier_b = Tensor::zeros({n}, true);
    return h;
  }

  MpnConfig config_;
  Backbone backbone_;
  std::vector<PartPair> pairs_;
  bool update_running_ = true;
};

/// Embeddings of `images` ([N, 3, H, W]) in chunks; never reads a prior.
inline Tensor extract_embedding(MpnModel& model, const Tensor& images, std::size_t chunk = 64) {
  require(images.rank() == 4, "extract_embedding: expected NCHW images, got " + shape_str(images.shape()));
  const std::size_t n = images.dim(0);
  if (n <= chunk) return model.embed(images);
  NoGradScope no_grad;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < n; b += chunk) parts.push_back(model.embed(slice(images, 0, b, std::min(n, b + chunk))));
  return concat(parts, 0);
}

// ------------------------------------------------------------------ checkpoints

inline std::string tensor_file_name(const std::string& name) { return name + ".mpnt"; }

/// Writes one MPNT file per distinct parameter or statistic plus manifest.txt
/// mapping every name (aliases included) to its file, with the model config.
inline void save_checkpoint(MpnModel& model, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  KeyValues manifest = model.config().to_kv();
  std::map<const void*, std::string> files;
  for (auto& [name, t] : model.named_tensors()) {
    auto it = files.find(t.impl());
    if (it == files.end()) {
      it = files.emplace(t.impl(), tensor_file_name(name)).first;
      save_tensor(t, dir / it->second);
    }
    manifest.set("tensor." + name, it->second);
  }
  for (auto& [name, stats] : model.named_stats()) {
    const std::size_t c = stats->running_mean.size();
    save_tensor(Tensor({c}, stats->running_mean), dir / tensor_file_name(name + ".running_mean"));
    save_tensor(Tensor({c}, stats->running_var), dir / tensor_file_name(name + ".running_var"));
    manifest.set("stats." + name + ".running_mean", tensor_file_name(name + ".running_mean"));
    manifest.set("stats." + name + ".running_var", tensor_file_name(name + ".running_var"));
  }
  detail::write_file(dir / "manifest.txt", manifest.dump());
}

inline MpnModel load_checkpoint(const std::filesystem::path& dir) {
  const KeyValues manifest = KeyValues::load(dir / "manifest.txt");
  KeyValues model_kv;
  for (const auto& [k, v] : manifest.entries())
    if (k.rfind("model.", 0) == 0) model_kv.set(k, v);
  MpnModel model(MpnConfig::from(model_kv));
  auto fill = [&](const std::string& key, std::span<double> dst, const Shape& shape) {
    if (!manifest.has(key)) throw IoError("checkpoint " + dir.string() + " lacks entry " + key);
    const Tensor t = load_tensor(dir / manifest.get_string(key, ""));
    if (t.shape() != shape)
      throw IoError("checkpoint entry " + key + " has shape " + shape_str(t.shape()) + ", expected " +
                    shape_str(shape));
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  };
  for (auto& [name, t] : model.named_tensors()) {
    Tensor handle = t;
    fill("tensor." + name, handle.mutable_data(), t.shape());
  }
  for (auto& [name, stats] : model.named_stats()) {
    const Shape s{stats->running_mean.size()};
    fill("stats." + name + ".running_mean", stats->running_mean, s);
    fill("stats." + name + ".running_var", stats->running_var, s);
  }
  return model;
}

}  // namespace mpn
