#include <gtest/gtest.h>

#include <filesystem>

#include "mpn/model.hpp"
#include "mpn/model_gradcheck.hpp"
#include "mpn/rng.hpp"

using namespace mpn;

namespace {

MpnConfig tiny(ModelMode mode) {
  MpnConfig c;
  c.parts = 3;
  c.feature_dim = 4;
  c.ca_reduction = 2;
  c.num_classes = 3;
  c.image_h = 24;
  c.image_w = 8;
  c.backbone_widths = {4, 6};
  c.backbone_strides = {2, 2};
  c.mode = mode;
  return c;
}

Tensor random_images(std::size_t n, const MpnConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * 3 * c.image_h * c.image_w);
  for (auto& x : v) x = rng.normal();
  return Tensor({n, 3, c.image_h, c.image_w}, std::move(v));
}

std::vector<PartPrior> full_priors(std::size_t n, const MpnConfig& c) {
  return std::vector<PartPrior>(n, uniform_prior(c.feat_h(), c.feat_w(), c.parts));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(ModelConfig, Validation) {
  MpnConfig c = tiny(ModelMode::naive_mtl);
  c.share_conv1 = true;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny(ModelMode::full);
  c.share_ca = true;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny(ModelMode::full);
  c.parts = 7;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_THROW(parse_model_mode("both"), ContractError);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  MpnConfig c = tiny(ModelMode::full);
  c.use_ca = c.share_conv1 = c.share_ca = true;
  const MpnConfig back = MpnConfig::from(c.to_kv());
  EXPECT_EQ(back.to_kv().dump(), c.to_kv().dump());
}

TEST(Model, BaselineBuildsNoMtHeads) {
  instrumentation().reset();
  MpnModel m(tiny(ModelMode::baseline));
  EXPECT_EQ(instrumentation().mt_heads_built, 0u);
  EXPECT_EQ(instrumentation().at_heads_built, 3u);
  const auto f = m.forward(random_images(2, m.config(), 1), {}, Mode::train);
  EXPECT_TRUE(f.mt_features.empty());
  EXPECT_FALSE(f.g.defined());
  EXPECT_EQ(f.h.shape(), (Shape{2, 12}));
  EXPECT_EQ(instrumentation().prior_reads, 0u);
}

TEST(Model, MtOnlyBuildsNoAtHeads) {
  instrumentation().reset();
  MpnModel m(tiny(ModelMode::mt_only));
  EXPECT_EQ(instrumentation().at_heads_built, 0u);
  EXPECT_THROW(m.at_head(0), ContractError);
}

TEST(Model, ForwardShapes) {
  MpnConfig c = tiny(ModelMode::full);
  c.use_ca = true;
  MpnModel m(c);
  const auto f = m.forward(random_images(4, c, 2), full_priors(4, c), Mode::train);
  EXPECT_EQ(f.features_map.shape(), (Shape{4, 6, 6, 2}));
  ASSERT_EQ(f.mt_logits.size(), 3u);
  EXPECT_EQ(f.mt_logits[0].shape(), (Shape{4, 3}));
  EXPECT_EQ(f.h.shape(), (Shape{4, 12}));
  EXPECT_EQ(f.g.shape(), (Shape{4, 12}));
}

TEST(Model, SharingAliasesStorage) {
  MpnConfig c = tiny(ModelMode::full);
  c.use_ca = c.share_conv1 = c.share_conv2 = c.share_ca = true;
  MpnModel m(c);
  for (std::size_t k = 0; k < c.parts; ++k) {
    EXPECT_EQ(m.mt_head(k).conv1.get(), m.at_head(k).conv1.get());
    EXPECT_EQ(m.mt_head(k).conv2.get(), m.at_head(k).conv2.get());
    EXPECT_EQ(m.mt_head(k).ca.get(), m.at_head(k).ca.get());
    EXPECT_NE(m.mt_head(k).classifier_w.impl(), m.at_head(k).classifier_w.impl());
  }
  EXPECT_LT(m.parameters().size(), m.named_tensors().size());

  c.share_conv2 = c.share_ca = false;
  MpnModel partial(c);
  EXPECT_EQ(partial.mt_head(0).conv1.get(), partial.at_head(0).conv1.get());
  EXPECT_NE(partial.mt_head(0).conv2.get(), partial.at_head(0).conv2.get());
  EXPECT_NE(partial.mt_head(0).ca.get(), partial.at_head(0).ca.get());
}

TEST(Model, SharedBlocksTakeStatsFromMtPass) {
  MpnConfig c = tiny(ModelMode::full);
  c.share_conv1 = true;
  MpnModel m(c);
  const Tensor x = random_images(4, c, 3);
  const auto features = m.forward_backbone(x, Mode::train);
  const auto before = m.mt_head(0).conv1->stats.running_mean;
  const auto at_conv2 = m.at_head(0).conv2->stats.running_mean;
  m.forward_head(0, features, MpnModel::Branch::at, Mode::train);
  EXPECT_EQ(m.mt_head(0).conv1->stats.running_mean, before);
  EXPECT_NE(m.at_head(0).conv2->stats.running_mean, at_conv2);
  m.forward_head(0, features, MpnModel::Branch::mt, Mode::train);
  EXPECT_NE(m.mt_head(0).conv1->stats.running_mean, before);
}

TEST(Model, FrozenStatsLeaveRunningValues) {
  MpnModel m(tiny(ModelMode::naive_mtl));
  m.set_update_running_stats(false);
  const auto before = m.backbone().blocks[0].stats.running_var;
  m.forward(random_images(2, m.config(), 4), full_priors(2, m.config()), Mode::train);
  EXPECT_EQ(m.backbone().blocks[0].stats.running_var, before);
}

TEST(Model, SameSeedSameWeights) {
  MpnModel a(tiny(ModelMode::full)), b(tiny(ModelMode::full));
  const auto pa = a.named_tensors(), pb = b.named_tensors();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bitwise_equal(pa[i].second, pb[i].second)) << pa[i].first;
}

TEST(Model, EmbeddingIgnoresPriorsAndBatchComposition) {
  MpnConfig c = tiny(ModelMode::full);
  c.use_ca = true;
  MpnModel m(c);
  const Tensor x = random_images(5, c, 5);
  instrumentation().reset();
  const Tensor all = extract_embedding(m, x);
  const Tensor chunked = extract_embedding(m, x, 2);
  EXPECT_EQ(instrumentation().prior_reads, 0u);
  EXPECT_TRUE(bitwise_equal(all, chunked));
  EXPECT_EQ(all.shape(), (Shape{5, 12}));
}

TEST(Model, PartInputsUseRoi) {
  MpnConfig c = tiny(ModelMode::full);
  Rng rng(6);
  std::vector<double> v(1 * 2 * 6 * 2);
  for (auto& x : v) x = rng.normal();
  const Tensor f({1, 2, 6, 2}, v);
  PartPrior p = uniform_prior(6, 2, 3);
  const auto same = make_part_inputs(f, std::span<const PartPrior>(&p, 1), 3);
  const auto plain = strip_inputs(f, 3);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(bitwise_equal(same[k], plain[k]));
  p.roi_top = 3;
  p.roi_bottom = 5;
  const auto cropped = make_part_inputs(f, std::span<const PartPrior>(&p, 1), 3);
  // Row 3 of F becomes the top strip once the ROI is stretched over the map.
  EXPECT_EQ(cropped[0].dim(2), 6u);
  EXPECT_NEAR(cropped[0][0], f[3 * 2 + 0], 1e-12);
  p.roi_bottom = 6;
  EXPECT_THROW(make_part_inputs(f, std::span<const PartPrior>(&p, 1), 3), ContractError);
}

TEST(Model, CheckpointRoundTrip) {
  MpnConfig c = tiny(ModelMode::full);
  c.use_ca = c.share_conv1 = c.share_conv2 = c.share_ca = true;
  MpnModel m(c);
  m.forward(random_images(4, c, 7), full_priors(4, c), Mode::train);
  const auto dir = std::filesystem::temp_directory_path() / "mpn_test_checkpoint";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir);
  MpnModel back = load_checkpoint(dir);
  const Tensor x = random_images(3, c, 8);
  EXPECT_TRUE(bitwise_equal(extract_embedding(m, x), extract_embedding(back, x)));
  EXPECT_EQ(back.mt_head(1).conv2.get(), back.at_head(1).conv2.get());
  std::filesystem::remove_all(dir);
}

TEST(Model, CheckpointMissingEntryRejected) {
  MpnModel m(tiny(ModelMode::naive_mtl));
  const auto dir = std::filesystem::temp_directory_path() / "mpn_test_checkpoint_bad";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir);
  std::filesystem::remove(dir / "backbone.0.weight.mpnt");
  EXPECT_ANY_THROW(load_checkpoint(dir));
  std::filesystem::remove_all(dir);
}

TEST(Model, GradcheckMicroModel) {
  const auto r = model_gradcheck();
  EXPECT_TRUE(r.passed) << r.worst << " " << r.max_rel_error;
  EXPECT_GT(r.checked, 500u);
}
