#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "mpn/cli.hpp"

using namespace mpn;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "mpn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpn_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

const fs::path& small_corpus() {
  static const fs::path dir = [] {
    const fs::path d = scratch("corpus");
    const CliRun r = run({"gen-data", "--out", d.string(), "--set", "corpus.num_identities=4",
                       "corpus.images_per_identity=8"});
    if (r.code != 0) throw std::runtime_error(r.err);
    return d;
  }();
  return dir;
}

const std::vector<std::string> kTiny{"train.epochs=1",           "train.S=3",
                                     "train.A=4",                "model.feature_dim=8",
                                     "model.ca_reduction=2",     "model.backbone_widths=4,8",
                                     "model.backbone_strides=2,2"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.push_back("--set");
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

fs::path fixture(const std::string& name) { return fs::path(MPN_FIXTURE_DIR) / name; }

std::string slurp(const fs::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"gen-data", "--out", scratch("x").string(), "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"gradcheck", "--scope", "galaxy"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, ContractViolationsExitTwo) {
  const CliRun r = run({"gen-data", "--out", scratch("bad").string(), "--set", "corpus.crop_jitter_frac=0.6"});
  EXPECT_EQ(r.code, kExitContract);
  EXPECT_NE(r.err.find("crop_jitter_frac"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", scratch("bad2").string(), "--set", "corpus.colour=red"}).code, kExitContract);
  EXPECT_EQ(run({"train", "--corpus", small_corpus().string(), "--out", scratch("t").string(), "--set",
                 "train.ablation=everything"})
                .code,
            kExitContract);
}

TEST(Cli, DivergenceExitsThree) {
  auto args = with_tiny({"train", "--corpus", small_corpus().string(), "--out", scratch("div").string()});
  args.push_back("train.lr=1e200");
  args.push_back("train.epochs=3");
  const CliRun r = run(args);
  EXPECT_EQ(r.code, kExitNumeric);
  EXPECT_NE(r.err.find("non-finite loss"), std::string::npos);
}

TEST(Cli, GenDataDefaultCountsAndSummary) {
  const fs::path d = scratch("default");
  const CliRun r = run({"gen-data", "--out", d.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("20 identities, 800 images"), std::string::npos);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(d / "images")) n += e.path().extension() == ".ppm";
  EXPECT_EQ(n, 800u);
  fs::remove_all(d);
}

TEST(Cli, TrainEvalWritesArtifacts) {
  const fs::path out = scratch("train");
  const CliRun t = run(with_tiny({"train", "--corpus", small_corpus().string(), "--out", out.string()}));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const auto* f : {"manifest.txt", "metrics.csv", "report.csv", "summary.txt", "checkpoint/manifest.txt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const KeyValues manifest = KeyValues::load(out / "manifest.txt");
  EXPECT_EQ(manifest.get_string("train.seed", ""), "1");
  EXPECT_EQ(manifest.get_string("command", ""), "train");

  const fs::path ev = scratch("eval");
  const CliRun e = run({"eval", "--checkpoint", (out / "checkpoint").string(), "--corpus", small_corpus().string(),
                     "--out", ev.string()});
  ASSERT_EQ(e.code, 0) << e.err;
  for (const auto* f : {"query.mpnt", "query_index.csv", "gallery.mpnt", "gallery_index.csv", "report.csv"})
    EXPECT_TRUE(fs::exists(ev / f)) << f;
  EXPECT_EQ(slurp(ev / "report.csv").substr(0, 29), "query_id,AP,first_match_rank\n");
}

TEST(Cli, AblateCartesianRowsAndHeader) {
  const fs::path csv = scratch("ablate.csv");
  const CliRun r = run(with_tiny({"ablate", "--corpus", small_corpus().string(), "--modes", "baseline,naive_mtl",
                               "--seeds", "1,2", "--out", csv.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(csv));
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "mode,seed,C1-S,C2-S,CF,CA,rank1,mAP");
  std::size_t rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  EXPECT_EQ(rows, 4u);
  EXPECT_TRUE(fs::exists(csv.string() + ".manifest.txt"));
  EXPECT_EQ(run({"ablate", "--corpus", small_corpus().string(), "--modes", "nope", "--out", csv.string()}).code,
            kExitContract);
}

TEST(Cli, GradcheckPassesAndDetectsFault) {
  const fs::path m = scratch("gc.manifest.txt");
  EXPECT_EQ(run({"gradcheck", "--scope", "op", "--manifest", m.string()}).code, kExitOk);
  EXPECT_TRUE(fs::exists(m));
  const CliRun bad = run({"gradcheck", "--inject-fault", "--manifest", m.string()});
  EXPECT_EQ(bad.code, kExitNumeric);
  EXPECT_NE(bad.out.find("FAIL faulty_square"), std::string::npos);
}

TEST(Cli, PriorDebugGoldenFile) {
  const fs::path m = scratch("pd.manifest.txt");
  const CliRun r = run({"prior-debug", "--image", fixture("walker.ppm").string(), "--maps",
                     fixture("walker_parse.pgm").string(), fixture("walker_seg.pgm").string(), "--manifest",
                     m.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, slurp(fixture("walker_prior.txt")));
}

TEST(Cli, PriorDebugCorruptedMapFallsBack) {
  const fs::path m = scratch("pd2.manifest.txt");
  const CliRun r = run({"prior-debug", "--image", fixture("walker.ppm").string(), "--maps",
                     fixture("corrupted_parse.pgm").string(), fixture("walker_seg.pgm").string(), "--manifest",
                     m.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("fallback: uniform division"), std::string::npos);
  EXPECT_NE(r.out.find("strip 6 rows 20..23 (4)"), std::string::npos);
}

TEST(Cli, PriorDebugFullForegroundStripsOfFour) {
  const fs::path dir = scratch("full");
  fs::create_directories(dir);
  GrayImage parse(96, 32), seg(96, 32);
  for (std::size_t y = 0; y < 96; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      parse.at(y, x) = y < 16 ? 1 : (y > 70 ? 5 : 2);
      seg.at(y, x) = 255;
    }
  write_pgm(dir / "p.pgm", parse);
  write_pgm(dir / "s.pgm", seg);
  write_ppm(dir / "i.ppm", RgbImage(96, 32));
  const CliRun r = run({"prior-debug", "--image", (dir / "i.ppm").string(), "--maps", (dir / "p.pgm").string(),
                     (dir / "s.pgm").string(), "--manifest", (dir / "m.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (int k = 0; k < 6; ++k) {
    const std::string line = "strip " + std::to_string(k + 1) + " rows " + std::to_string(4 * k) + ".." +
                             std::to_string(4 * k + 3) + " (4)";
    EXPECT_NE(r.out.find(line), std::string::npos) << line;
  }
}

TEST(Cli, RepeatedCommandsAreByteIdentical) {
  const fs::path a = scratch("rep_a"), b = scratch("rep_b");
  ASSERT_EQ(run(with_tiny({"train", "--corpus", small_corpus().string(), "--out", a.string()})).code, 0);
  ASSERT_EQ(run(with_tiny({"train", "--corpus", small_corpus().string(), "--out", b.string()})).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 10u);
}
