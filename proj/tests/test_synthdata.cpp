#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "mpn/synthdata.hpp"

using namespace mpn;
namespace fs = std::filesystem;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.num_identities = 4;
  s.images_per_identity = 6;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpn_synth_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Synth, DeterministicRendering) {
  const CorpusSpec s = small_spec();
  const SyntheticImage a = synthesize(s, 2, 3), b = synthesize(s, 2, 3);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.maps.parsing, b.maps.parsing);
  EXPECT_EQ(a.camera, b.camera);
}

TEST(Synth, ZeroJitterImagesOfOneIdentityIdentical) {
  CorpusSpec s = small_spec();
  s.misalignment = {0.0, 0.0, 0.0};
  s.occlusion_prob = s.blur_prob = s.corrupted_map_frac = 0.0;
  s.noise_std = 0.0;
  s.num_cameras = 1;
  const SyntheticImage a = synthesize(s, 1, 0);
  for (std::size_t k = 1; k < s.images_per_identity; ++k) {
    const SyntheticImage b = synthesize(s, 1, k);
    EXPECT_EQ(a.maps.parsing, b.maps.parsing);
    EXPECT_EQ(a.maps.segmentation, b.maps.segmentation);
    // Background gray level still varies per image; the figure does not.
    for (std::size_t i = 0; i < a.maps.segmentation.pixels.size(); ++i)
      if (a.maps.segmentation.pixels[i]) {
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a.rgb[i * 3 + c], b.rgb[i * 3 + c], 0.25);
      }
  }
}

TEST(Synth, ForegroundDiffersFromBackground) {
  CorpusSpec s = small_spec();
  s.blur_prob = 0.0;
  for (std::size_t id = 0; id < s.num_identities; ++id)
    for (std::size_t k = 0; k < s.images_per_identity; ++k) {
      const SyntheticImage img = synthesize(s, id, k);
      std::size_t fg = 0;
      for (std::size_t i = 0; i < img.maps.segmentation.pixels.size(); ++i) {
        if (!img.maps.segmentation.pixels[i]) continue;
        ++fg;
        double diff = 0;
        for (std::size_t c = 0; c < 3; ++c) diff += std::abs(img.rgb[i * 3 + c] - img.background[i * 3 + c]);
        EXPECT_GT(diff, 0.0);
      }
      EXPECT_GT(fg, 200u);
    }
}

TEST(Synth, SignaturesSeparated) {
  CorpusSpec s;
  const auto sigs = make_signatures(s);
  ASSERT_EQ(sigs.size(), s.num_identities);
  for (std::size_t i = 0; i < sigs.size(); ++i)
    for (std::size_t j = i + 1; j < sigs.size(); ++j) {
      const auto a = sigs[i].vector(), b = sigs[j].vector();
      double d2 = 0;
      for (std::size_t t = 0; t < a.size(); ++t) d2 += (a[t] - b[t]) * (a[t] - b[t]);
      EXPECT_GE(std::sqrt(d2), kMinSignatureDistance);
    }
}

TEST(Synth, LegsCroppedOutFailsPresence) {
  const CorpusSpec s = small_spec();
  const auto sigs = make_signatures(s);
  ImageParams p = sample_image_params(s, 0);
  p.corrupted = false;
  p.occluded = false;
  p.figure_top = 0.0;
  p.figure_height = 1.9 * static_cast<double>(s.image_h);  // hips fall below the frame
  const SyntheticImage img = render_image(s, sigs[0], {1.0, 1.0, 1.0}, p);
  const LabelTable labels;
  EXPECT_FALSE(presence_check(img.maps.parsing, labels.head, labels.legs, 10));
  p.figure_height = 0.94 * static_cast<double>(s.image_h);
  const SyntheticImage whole = render_image(s, sigs[0], {1.0, 1.0, 1.0}, p);
  EXPECT_TRUE(presence_check(whole.maps.parsing, labels.head, labels.legs, 10));
}

TEST(Synth, InvalidSpecRejected) {
  CorpusSpec s;
  s.misalignment.crop_jitter_frac = 0.6;
  EXPECT_THROW(s.validate(), ContractError);
  s = CorpusSpec{};
  s.occlusion_prob = 1.5;
  EXPECT_THROW(s.validate(), ContractError);
  EXPECT_THROW(CorpusSpec::from(KeyValues::parse("corpus.bogus = 1\n")), ContractError);
}

TEST(Synth, SpecRoundTripsThroughKeyValues) {
  CorpusSpec s = small_spec();
  s.misalignment.crop_jitter_frac = 0.15;
  s.seed = 99;
  const CorpusSpec t = CorpusSpec::from(s.to_kv());
  EXPECT_EQ(t.to_kv().dump(), s.to_kv().dump());
}

TEST(Synth, GenerateTwiceByteIdentical) {
  const CorpusSpec s = small_spec();
  const fs::path a = scratch("a"), b = scratch("b");
  const CorpusSummary sum = generate(s, a);
  generate(s, b);
  EXPECT_EQ(sum.images, 24u);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(detail::read_file(e.path()), detail::read_file(b / rel)) << rel;
  }
  EXPECT_EQ(files, 24u * 3 + 4);
  const auto meta = load_meta(a);
  ASSERT_EQ(meta.size(), 24u);
  EXPECT_EQ(meta[7].identity, 1);
  EXPECT_TRUE(fs::exists(a / meta[7].path));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, CropJitterSpreadsFigureTop) {
  CorpusSpec s;
  s.num_identities = 2;
  s.images_per_identity = 40;
  double lo = 1e9, hi = -1e9;
  for (std::size_t k = 0; k < s.images_per_identity; ++k) {
    const SyntheticImage img = synthesize(s, 0, k);
    lo = std::min(lo, static_cast<double>(img.figure_top));
    hi = std::max(hi, static_cast<double>(img.figure_top));
  }
  const double h = static_cast<double>(s.image_h);
  EXPECT_LE(hi - lo, 0.2 * h + 2.0);
  EXPECT_GE(hi - lo, 0.1 * h);
}

TEST(Synth, CorruptedImagesHaveEmptyParsing) {
  CorpusSpec s = small_spec();
  s.corrupted_map_frac = 0.5;
  std::size_t corrupted = 0;
  for (std::size_t id = 0; id < s.num_identities; ++id)
    for (std::size_t k = 0; k < s.images_per_identity; ++k) {
      const SyntheticImage img = synthesize(s, id, k);
      const bool empty = std::all_of(img.maps.parsing.pixels.begin(), img.maps.parsing.pixels.end(),
                                     [](std::uint8_t v) { return v == 0; });
      EXPECT_EQ(empty, img.params.corrupted);
      corrupted += img.params.corrupted;
    }
  EXPECT_GT(corrupted, 0u);
}
