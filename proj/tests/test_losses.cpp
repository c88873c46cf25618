#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "mpn/losses.hpp"
#include "mpn/rng.hpp"

using namespace mpn;

namespace {

Tensor random_features(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.normal();
  return Tensor({n, d}, std::move(v));
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(1);
  return {t.data().begin() + static_cast<std::ptrdiff_t>(i * d),
          t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na * nb) + 1e-12);
}

std::vector<int> grouped_labels(std::size_t s, std::size_t a) {
  std::vector<int> l;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < a; ++j) l.push_back(static_cast<int>(10 + 3 * i));
  return l;
}

// Enumerates every (anchor, positive, negative) triple: per anchor the hinge
// of its hardest triple is the maximum hinge over all of its triples.
double triplet_oracle(const Tensor& h, const std::vector<int>& labels, double alpha) {
  const std::size_t n = labels.size();
  double total = 0;
  std::size_t violating = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        worst = std::max(worst, dist(row(h, a), row(h, p)) - dist(row(h, a), row(h, q)) + alpha);
      }
    }
    if (worst > 0) {
      total += worst;
      ++violating;
    }
  }
  return violating ? total / static_cast<double>(violating) : 0.0;
}

std::vector<double> mean_rows(const Tensor& t, const std::vector<int>& labels, int id) {
  std::vector<double> m(t.dim(1), 0.0);
  double count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == id) {
      const auto r = row(t, i);
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += r[j];
      count += 1;
    }
  for (auto& v : m) v /= count;
  return m;
}

}  // namespace

TEST(Triplet, MatchesExhaustiveOracle) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto labels = grouped_labels(3, 2);
    const Tensor h = random_features(rng, 6, 5);
    const double alpha = trial % 2 ? 0.2 : 1.5;
    EXPECT_NEAR(batch_hard_triplet(h, labels, 3, 2, alpha).loss.item(), triplet_oracle(h, labels, alpha), 1e-10);
  }
}

TEST(Triplet, SeparatedClustersGiveZero) {
  // Two tight clusters on orthogonal axes: every hinge is negative.
  const Tensor h({4, 2}, {1.0, 0.01, 1.0, -0.01, 0.01, 1.0, -0.01, 1.0});
  const auto r = batch_hard_triplet(h, std::vector<int>{0, 0, 1, 1}, 2, 2, 0.2);
  EXPECT_EQ(r.n_t, 0u);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(Triplet, IdenticalFeaturesGiveMargin) {
  const Tensor h = Tensor::full({4, 3}, 1.0);
  const auto r = batch_hard_triplet(h, std::vector<int>{0, 0, 1, 1}, 2, 2, 0.2);
  EXPECT_EQ(r.n_t, 4u);
  EXPECT_NEAR(r.loss.item(), 0.2, 1e-12);
}

TEST(Triplet, RejectsDegenerateBatches) {
  const Tensor h = Tensor::full({2, 3}, 1.0);
  EXPECT_THROW(batch_hard_triplet(h, std::vector<int>{0, 0}, 1, 2, 0.2), ContractError);
  EXPECT_THROW(batch_hard_triplet(h, std::vector<int>{0, 1}, 2, 1, 0.2), ContractError);
  EXPECT_THROW(batch_hard_triplet(Tensor::full({4, 3}, 1.0), std::vector<int>{0, 0, 0, 1}, 2, 2, 0.2),
               ContractError);
}

TEST(Fsa, ClassWiseMatchesOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto labels = grouped_labels(3, 4);
    const Tensor h = random_features(rng, 12, 6), g = random_features(rng, 12, 6);
    double expected = 0;
    for (int id : {10, 13, 16}) expected += dist(mean_rows(h, labels, id), mean_rows(g, labels, id));
    expected /= 3.0;
    EXPECT_NEAR(class_wise_fsa(h, g, labels, 3, 4).item(), expected, 1e-12);
  }
}

TEST(Fsa, SampleAndBatchWiseMatchOracle) {
  Rng rng(6);
  const auto labels = grouped_labels(2, 3);
  const Tensor h = random_features(rng, 6, 4), g = random_features(rng, 6, 4);
  double sample = 0;
  for (std::size_t i = 0; i < 6; ++i) sample += dist(row(h, i), row(g, i));
  EXPECT_NEAR(sample_wise_fsa(h, g).item(), sample / 6.0, 1e-12);
  std::vector<double> mh(4, 0.0), mg(4, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      mh[j] += h[i * 4 + j] / 6.0;
      mg[j] += g[i * 4 + j] / 6.0;
    }
  EXPECT_NEAR(batch_wise_fsa(h, g).item(), dist(mh, mg), 1e-12);
}

TEST(Fsa, IdenticalBranchesGiveZero) {
  Rng rng(7);
  const Tensor h = random_features(rng, 4, 3);
  const std::vector<int> labels{1, 1, 2, 2};
  // The 1e-12 stabilizer in the cosine denominator leaves a residue of that order.
  EXPECT_NEAR(class_wise_fsa(h, h, labels, 2, 2).item(), 0.0, 1e-11);
  EXPECT_NEAR(sample_wise_fsa(h, h).item(), 0.0, 1e-11);
  EXPECT_NEAR(batch_wise_fsa(h, h).item(), 0.0, 1e-11);
}

TEST(Fsa, ClassMeansCancelWithinIdentityNoise) {
  // Per-sample disagreement that averages out within each identity leaves
  // the class-wise term at zero while the sample-wise term stays positive.
  const Tensor h({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  const Tensor g({4, 2}, {1, 0.5, 1, -0.5, 0.5, 1, -0.5, 1});
  const std::vector<int> labels{0, 0, 1, 1};
  EXPECT_NEAR(class_wise_fsa(h, g, labels, 2, 2).item(), 0.0, 1e-11);
  EXPECT_GT(sample_wise_fsa(h, g).item(), 0.01);
}

TEST(Fsa, RejectsShapeMismatch) {
  EXPECT_THROW(sample_wise_fsa(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ContractError);
  EXPECT_THROW(class_wise_fsa(Tensor::zeros({4, 3}), Tensor(), std::vector<int>{0, 0, 1, 1}, 2, 2),
               ContractError);
}

TEST(IdLoss, SumsPerPartMeans) {
  Rng rng(8);
  const std::vector<int> labels{0, 2, 1};
  std::vector<Tensor> mt, at;
  for (int k = 0; k < 2; ++k) {
    mt.push_back(random_features(rng, 3, 3));
    at.push_back(random_features(rng, 3, 3));
  }
  double expected = 0;
  for (const auto* set : {&mt, &at})
    for (const auto& z : *set) {
      double ce = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        double lse = 0;
        for (std::size_t j = 0; j < 3; ++j) lse += std::exp(z[i * 3 + j]);
        ce += std::log(lse) - z[i * 3 + static_cast<std::size_t>(labels[i])];
      }
      expected += ce / 3.0;
    }
  EXPECT_NEAR(id_loss(mt, at, labels).item(), expected, 1e-12);
}

TEST(IdLoss, UniformLogitsGiveLogC) {
  const std::vector<Tensor> mt{Tensor::zeros({2, 4})};
  EXPECT_NEAR(id_loss(mt, {}, std::vector<int>{0, 3}).item(), std::log(4.0), 1e-12);
}

TEST(SoftShare, SquaredDifference) {
  const Tensor a({2}, {1.0, 2.0}), b({2}, {0.0, 4.0});
  const std::vector<std::pair<Tensor, Tensor>> pairs{{a, b}};
  EXPECT_NEAR(soft_sharing_penalty(pairs, 0.5).item(), 0.5 * (1.0 + 4.0), 1e-12);
  const std::vector<std::pair<Tensor, Tensor>> same{{a, a}};
  EXPECT_EQ(soft_sharing_penalty(same, 0.5).item(), 0.0);
}

TEST(TotalLoss, ComposesTerms) {
  Rng rng(9);
  const std::vector<int> labels{0, 0, 1, 1};
  const std::vector<Tensor> mt{random_features(rng, 4, 2)}, at{random_features(rng, 4, 2)};
  const Tensor h = random_features(rng, 4, 3), g = random_features(rng, 4, 3);
  LossInputs in{mt, at, h, g, labels, 2, 2, {}};
  LossOptions o;
  o.lambda = 0.7;
  const LossBundle b = total_loss(in, o);
  EXPECT_NEAR(b.l_id.item(), id_loss(mt, at, labels).item(), 1e-15);
  EXPECT_NEAR(b.l_tri.item(), batch_hard_triplet(h, labels, 2, 2, 0.2).loss.item(), 1e-15);
  EXPECT_NEAR(b.l_cf.item(), class_wise_fsa(h, g, labels, 2, 2).item(), 1e-15);
  EXPECT_NEAR(b.total.item(), b.l_id.item() + b.l_tri.item() + 0.7 * b.l_cf.item(), 1e-12);

  o.align = AlignLoss::summed_triplet;
  const LossBundle s = total_loss(in, o);
  EXPECT_EQ(s.l_cf.item(), 0.0);
  EXPECT_NEAR(s.l_tri.item(), batch_hard_triplet(add(h, g), labels, 2, 2, 0.2).loss.item(), 1e-15);

  o.align = AlignLoss::none;
  EXPECT_EQ(total_loss(in, o).l_cf.item(), 0.0);
}

TEST(Cosine, DistanceOfParallelAndOrthogonal) {
  const std::vector<double> a{1, 0}, b{3, 0}, c{0, 2};
  EXPECT_NEAR(cosine_distance(a, b), 0.0, 1e-12);
  EXPECT_NEAR(cosine_distance(a, c), 1.0, 1e-12);
}
