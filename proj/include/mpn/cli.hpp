#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/dataset.hpp"
#include "mpn/error.hpp"
#include "mpn/eval.hpp"
#include "mpn/gradcheck.hpp"
#include "mpn/model_gradcheck.hpp"
#include "mpn/prior.hpp"
#include "mpn/synthdata.hpp"
#include "mpn/train.hpp"

namespace mpn {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitContract = 2, kExitNumeric = 3 };

namespace cli {

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

/// Config file (optional) with `--set` overrides applied in order.
inline KeyValues resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
  KeyValues kv = file.empty() ? KeyValues{} : KeyValues::load(file);
  for (const auto& o : overrides) kv.apply_override(o);
  return kv;
}

inline void write_manifest(const std::filesystem::path& path, const std::string& command, KeyValues kv) {
  kv.set("command", command);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, kv.dump());
}

inline std::vector<std::string> query_names(const Dataset& d, const std::vector<std::size_t>& which) {
  std::vector<std::string> out;
  for (auto i : which) out.push_back(d.samples[i].entry.path);
  return out;
}

inline std::string ranking_summary(const RankingResult& r) {
  std::string s = "rank1 = " + format_double(r.rank1) + "\nmAP = " + format_double(r.map) +
                  "\nevaluated = " + std::to_string(r.evaluated()) + "\nskipped = " + std::to_string(r.skipped.size()) +
                  "\n";
  for (std::size_t k : {1, 5, 10})
    if (k <= r.cmc.size()) s += "cmc" + std::to_string(k) + " = " + format_double(r.cmc[k - 1]) + "\n";
  return s;
}

struct GenDataArgs {
  std::string spec, out;
  std::vector<std::string> set;
  long long seed = -1;
};

inline int gen_data(const GenDataArgs& a, std::ostream& out) {
  KeyValues kv = resolve_config(a.spec, a.set);
  if (a.seed >= 0) kv.set("corpus.seed", std::to_string(a.seed));
  const CorpusSpec spec = CorpusSpec::from(kv);
  const CorpusSummary s = generate(spec, a.out);
  out << "corpus " << a.out << ": " << s.identities << " identities, " << s.images << " images ("
      << spec.images_per_identity << " per identity), " << spec.image_h << "x" << spec.image_w << "\n"
      << "corrupted maps " << s.corrupted << ", occluded " << s.occluded << ", blurred " << s.blurred << "\n"
      << "manifest " << (std::filesystem::path(a.out) / "corpus.cfg").string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string corpus, out, config;
  std::vector<std::string> set;
};

inline int train(const TrainArgs& a, std::ostream& out) {
  const KeyValues kv = resolve_config(a.config, a.set);
  const TrainConfig cfg = TrainConfig::from(kv);
  namespace fs = std::filesystem;
  const fs::path dir = a.out;
  KeyValues manifest = cfg.to_kv();
  manifest.set("corpus", a.corpus);
  write_manifest(dir / "manifest.txt", "train", manifest);
  std::vector<EpochMetrics> rows;
  TrainResult r = train_run(cfg, a.corpus, [&](const EpochMetrics& m) {
    rows.push_back(m);
    detail::write_file(dir / "metrics.csv", metrics_csv(rows));
    out << "epoch " << m.epoch << " l_id " << fixed(m.l_id) << " l_tri " << fixed(m.l_tri) << " l_cf "
        << fixed(m.l_cf) << " total " << fixed(m.total);
    if (m.evaluated) out << " rank1 " << fixed(m.rank1) << " mAP " << fixed(m.map);
    out << "\n" << std::flush;
  });
  save_checkpoint(r.model, dir / "checkpoint");
  const Dataset data = Dataset::load(a.corpus, false);
  const Split split = make_split(data);
  detail::write_file(dir / "report.csv", ranking_report_csv(r.final_ranking, query_names(data, split.query)));
  detail::write_file(dir / "summary.txt", ranking_summary(r.final_ranking));
  out << "final rank1 " << fixed(r.final_ranking.rank1) << " mAP " << fixed(r.final_ranking.map) << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, corpus, out;
};

inline int eval(const EvalArgs& a, std::ostream& out) {
  namespace fs = std::filesystem;
  MpnModel model = load_checkpoint(a.checkpoint);
  const Dataset data = Dataset::load(a.corpus, false);
  require(data.height == model.config().image_h && data.width == model.config().image_w,
          "eval: corpus images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
              ", checkpoint expects " + std::to_string(model.config().image_h) + "x" +
              std::to_string(model.config().image_w));
  const Split split = make_split(data);
  KeyValues manifest = model.config().to_kv();
  manifest.set("checkpoint", a.checkpoint);
  manifest.set("corpus", a.corpus);
  const fs::path dir = a.out;
  write_manifest(dir / "manifest.txt", "eval", manifest);
  const EvalOutput ev = evaluate(model, data, split.query, split.gallery);
  dump_embeddings(ev.query_embeddings, data, split.query, dir, "query");
  dump_embeddings(ev.gallery_embeddings, data, split.gallery, dir, "gallery");
  detail::write_file(dir / "report.csv", ranking_report_csv(ev.ranking, query_names(data, split.query)));
  detail::write_file(dir / "summary.txt", ranking_summary(ev.ranking));
  out << ranking_summary(ev.ranking);
  return kExitOk;
}

struct AblateArgs {
  std::string corpus, out, config;
  std::vector<std::string> modes{"baseline", "naive_mtl", "mpn_o", "mpn"};
  std::vector<long long> seeds{1, 2, 3};
  std::vector<std::string> set;
};

inline std::string ablation_row_header() { return "mode,seed,C1-S,C2-S,CF,CA,rank1,mAP\n"; }

inline std::string ablation_row(const std::string& mode, long long seed, const RankingResult& r) {
  const AblationWiring w = wiring(parse_ablation(mode));
  auto flag = [](bool b) { return std::string(b ? "1" : "0"); };
  return mode + "," + std::to_string(seed) + "," + flag(w.share_conv1) + "," + flag(w.share_conv2) + "," +
         flag(w.feature_alignment) + "," + flag(w.use_ca) + "," + format_double(r.rank1) + "," +
         format_double(r.map) + "\n";
}

inline int ablate(const AblateArgs& a, std::ostream& out) {
  const KeyValues base = resolve_config(a.config, a.set);
  for (const auto& m : a.modes) parse_ablation(m);
  require(!a.seeds.empty(), "ablate: no seeds");
  for (auto s : a.seeds) require(s >= 0, "ablate: seeds must be non-negative");
  KeyValues manifest = TrainConfig::from(base).to_kv();
  manifest.erase("train.ablation");
  manifest.erase("train.seed");
  manifest.set("corpus", a.corpus);
  std::string modes, seeds;
  for (const auto& m : a.modes) modes += (modes.empty() ? "" : ",") + m;
  for (auto s : a.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  manifest.set("ablate.modes", modes);
  manifest.set("ablate.seeds", seeds);
  write_manifest(a.out + ".manifest.txt", "ablate", manifest);
  std::string csv = ablation_row_header();
  for (const auto& m : a.modes)
    for (auto seed : a.seeds) {
      KeyValues kv = base;
      kv.set("train.ablation", m);
      kv.set("train.seed", std::to_string(seed));
      const TrainResult r = train_run(TrainConfig::from(kv), a.corpus);
      csv += ablation_row(m, seed, r.final_ranking);
      detail::write_file(a.out, csv);
      out << m << " seed " << seed << " rank1 " << fixed(r.final_ranking.rank1) << " mAP "
          << fixed(r.final_ranking.map) << "\n"
          << std::flush;
    }
  return kExitOk;
}

struct GradcheckArgs {
  std::string scope = "op";
  double tol = 1e-4;
  bool inject_fault = false;
  std::string manifest = "gradcheck.manifest.txt";
};

inline int gradcheck_cmd(const GradcheckArgs& a, std::ostream& out) {
  require(a.scope == "op" || a.scope == "model" || a.scope == "all", "gradcheck: scope must be op|model|all");
  require(a.tol > 0, "gradcheck: tol must be positive");
  KeyValues manifest;
  manifest.set("gradcheck.scope", a.scope);
  manifest.set("gradcheck.tol", format_double(a.tol));
  manifest.set("gradcheck.inject_fault", a.inject_fault ? "true" : "false");
  write_manifest(a.manifest, "gradcheck", manifest);
  GradCheckOptions o;
  o.tol = a.tol;
  std::vector<GradCheckResult> results;
  if (a.scope != "model") {
    for (const auto& c : op_gradcheck_cases()) results.push_back(c.run(o));
    if (a.inject_fault) results.push_back(faulty_gradcheck_case().run(o));
  }
  if (a.scope != "op") results.push_back(model_gradcheck(o));
  std::size_t failed = 0;
  for (const auto& r : results) {
    failed += !r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " elements " << r.checked << " max_rel_err "
        << format_double(r.max_rel_error) << (r.passed ? "" : " at " + r.worst) << "\n";
  }
  out << results.size() - failed << "/" << results.size() << " checks passed at tol " << format_double(a.tol) << "\n";
  return failed ? kExitNumeric : kExitOk;
}

struct PriorDebugArgs {
  std::string image, labels, variant = "coarse";
  std::vector<std::string> maps;
  std::size_t parts = 6, feat_h = 24, feat_w = 8;
  std::string manifest = "prior-debug.manifest.txt";
};

inline int prior_debug(const PriorDebugArgs& a, std::ostream& out) {
  require(a.maps.size() == 2, "prior-debug: --maps takes the parsing map then the segmentation map");
  const PriorVariant variant = parse_prior_variant(a.variant);
  KeyValues manifest;
  manifest.set("prior.image", a.image);
  manifest.set("prior.maps", a.maps[0] + "," + a.maps[1]);
  manifest.set("prior.labels", a.labels);
  manifest.set("prior.variant", a.variant);
  manifest.set("prior.K", std::to_string(a.parts));
  manifest.set("prior.feat_h", std::to_string(a.feat_h));
  manifest.set("prior.feat_w", std::to_string(a.feat_w));
  write_manifest(a.manifest, "prior-debug", manifest);
  const RgbImage img = read_ppm(a.image);
  const MapPair maps{read_pgm(a.maps[0]), read_pgm(a.maps[1])};
  require(maps.parsing.height == img.height && maps.parsing.width == img.width,
          "prior-debug: parsing map is " + std::to_string(maps.parsing.height) + "x" +
              std::to_string(maps.parsing.width) + ", image is " + std::to_string(img.height) + "x" +
              std::to_string(img.width));
  PriorOptions po;
  po.parts = a.parts;
  po.feat_h = a.feat_h;
  po.feat_w = a.feat_w;
  if (!a.labels.empty()) po.labels = LabelTable::load(a.labels);
  const PartPrior p = variant == PriorVariant::coarse       ? build_prior(maps, po)
                      : variant == PriorVariant::roi_resize ? roi_resize_prior(maps, po)
                                                            : uniform_prior(po.feat_h, po.feat_w, po.parts);
  out << "image " << img.height << "x" << img.width << "\n" << render_prior(p);
  return kExitOk;
}

}  // namespace cli

/// Parses and runs one command. Usage errors exit 1, contract and I/O
/// violations 2, numeric failures 3.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task part-aligned re-identification lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  cli::GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  g->add_option("--spec", gen.spec, "Corpus spec file (corpus.* keys)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Override corpus.seed")->check(CLI::NonNegativeNumber);
  g->add_option("--set", gen.set, "key=value override")->take_all();

  cli::TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one configuration");
  t->add_option("--corpus", tr.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--config", tr.config, "Config file (train.* and model.* keys)")->check(CLI::ExistingFile);
  t->add_option("--set", tr.set, "key=value override")->take_all();

  cli::EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--corpus", ev.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--out", ev.out, "Output directory")->required();

  cli::AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train and evaluate every (mode, seed) cell");
  a->add_option("--corpus", ab.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  a->add_option("--modes", ab.modes, "Ablation names")->delimiter(',');
  a->add_option("--seeds", ab.seeds, "Seeds")->delimiter(',');
  a->add_option("--out", ab.out, "Output CSV")->required();
  a->add_option("--config", ab.config, "Config file")->check(CLI::ExistingFile);
  a->add_option("--set", ab.set, "key=value override")->take_all();

  cli::GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--scope", gc.scope, "op, model or all")->check(CLI::IsMember({"op", "model", "all"}));
  c->add_option("--tol", gc.tol, "Relative error tolerance");
  c->add_option("--manifest", gc.manifest, "Manifest path");
  c->add_flag("--inject-fault", gc.inject_fault)->group("");

  cli::PriorDebugArgs pd;
  auto* p = app.add_subcommand("prior-debug", "Print the coarse prior of one image");
  p->add_option("--image", pd.image, "RGB image (PPM)")->required()->check(CLI::ExistingFile);
  p->add_option("--maps", pd.maps, "Parsing map then segmentation map (PGM)")->required()->expected(2)
      ->check(CLI::ExistingFile);
  p->add_option("--labels", pd.labels, "Label table (name = id)")->check(CLI::ExistingFile);
  p->add_option("--variant", pd.variant, "coarse, roi_resize or uniform");
  p->add_option("--K", pd.parts, "Number of parts");
  p->add_option("--feat-h", pd.feat_h, "Grid rows");
  p->add_option("--feat-w", pd.feat_w, "Grid columns");
  p->add_option("--manifest", pd.manifest, "Manifest path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    if (*g) return cli::gen_data(gen, out);
    if (*t) return cli::train(tr, out);
    if (*e) return cli::eval(ev, out);
    if (*a) return cli::ablate(ab, out);
    if (*c) return cli::gradcheck_cmd(gc, out);
    if (*p) return cli::prior_debug(pd, out);
  } catch (const NumericError& ex) {
    err << "numeric failure: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const ContractError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitContract;
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitContract;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitContract;
  }
  return kExitUsage;
}

}  // namespace mpn
