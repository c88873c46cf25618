#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mpn/eval.hpp"
#include "mpn/rng.hpp"

using namespace mpn;

namespace {

Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor({rows.size(), rows.empty() ? 0 : rows[0].size()}, std::move(v));
}

Tensor random_embeddings(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.normal();
  return Tensor({n, d}, std::move(v));
}

// Independent reference: stable sort on (-similarity) then index, brute-force AP.
struct Reference {
  std::vector<double> ap;
  std::vector<double> cmc;
};

Reference brute_force(const Tensor& q, const Tensor& g, const std::vector<ImageLabel>& qm,
                      const std::vector<ImageLabel>& gm) {
  const std::size_t d = q.dim(1);
  Reference ref;
  ref.cmc.assign(g.dim(0), 0.0);
  std::size_t evaluated = 0;
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    std::vector<std::size_t> idx;
    std::vector<double> sim(g.dim(0));
    for (std::size_t j = 0; j < g.dim(0); ++j) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += q[i * d + k] * g[j * d + k];
        na += q[i * d + k] * q[i * d + k];
        nb += g[j * d + k] * g[j * d + k];
      }
      sim[j] = dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
      if (!(gm[j].identity == qm[i].identity && gm[j].camera == qm[i].camera)) idx.push_back(j);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    double hits = 0, sum = 0;
    std::size_t first = 0;
    for (std::size_t r = 0; r < idx.size(); ++r)
      if (gm[idx[r]].identity == qm[i].identity) {
        if (hits == 0) first = r + 1;
        hits += 1;
        sum += hits / static_cast<double>(r + 1);
      }
    if (hits == 0) {
      ref.ap.push_back(std::nan(""));
      continue;
    }
    ++evaluated;
    ref.ap.push_back(sum / hits);
    for (std::size_t r = first - 1; r < ref.cmc.size(); ++r) ref.cmc[r] += 1;
  }
  for (auto& c : ref.cmc) c /= static_cast<double>(evaluated);
  return ref;
}

}  // namespace

TEST(Similarity, BasicValues) {
  const std::vector<double> v{1, 2, 3}, o{0, 3, -2};
  EXPECT_NEAR(similarity(v, v), 1.0, 1e-12);
  EXPECT_NEAR(similarity(v, o), 0.0, 1e-12);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a(6), b(6);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    EXPECT_NEAR(similarity(a, b), 1.0 - cosine_distance(a, b), 1e-12);
  }
}

TEST(AveragePrecision, HandFixture) {
  EXPECT_NEAR(average_precision({true, false, true}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(average_precision({true, false, true}), 0.8333, 5e-5);
  EXPECT_EQ(average_precision({true, true, true}), 1.0);
  EXPECT_EQ(average_precision({false, false}), 0.0);
}

TEST(Rank, HandFixtureThroughRanking) {
  // Query on the x axis; gallery similarities 1.0 (match), 0.8 (other), 0.6 (match).
  const Tensor q = rows_tensor({{1, 0}});
  const Tensor g = rows_tensor({{0.6, 0.8}, {1, 0}, {0.8, 0.6}});
  const std::vector<ImageLabel> qm{{1, 0}}, gm{{1, 1}, {1, 2}, {2, 1}};
  const auto r = rank(q, g, qm, gm);
  EXPECT_EQ(r.order[0], (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_NEAR(r.ap[0], 5.0 / 6.0, 1e-15);
  EXPECT_EQ(r.first_match_rank[0], 1u);
  EXPECT_EQ(r.rank1, 1.0);
}

TEST(Rank, AllMatchesGivePerfectScores) {
  const Tensor q = rows_tensor({{1, 2}}), g = rows_tensor({{3, 1}, {0, 1}, {1, 1}});
  const std::vector<ImageLabel> qm{{4, 0}}, gm{{4, 1}, {4, 2}, {4, 3}};
  const auto r = rank(q, g, qm, gm);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.rank1, 1.0);
}

TEST(Rank, BestMatchAtRankTwo) {
  const Tensor q = rows_tensor({{1, 0}}), g = rows_tensor({{1, 0.1}, {1, 0.5}, {0, 1}});
  const std::vector<ImageLabel> qm{{1, 0}}, gm{{2, 1}, {1, 1}, {3, 1}};
  const auto r = rank(q, g, qm, gm);
  EXPECT_EQ(r.cmc, (std::vector<double>{0, 1, 1}));
  EXPECT_EQ(r.rank1, 0.0);
  EXPECT_EQ(r.first_match_rank[0], 2u);
}

TEST(Rank, PerfectOneHotEmbeddings) {
  std::vector<std::vector<double>> qr, gr;
  std::vector<ImageLabel> qm, gm;
  for (int id = 0; id < 5; ++id) {
    std::vector<double> onehot(5, 0.0);
    onehot[static_cast<std::size_t>(id)] = 1.0;
    for (int j = 0; j < 2; ++j) {
      qr.push_back(onehot);
      qm.push_back({id, 0});
    }
    for (int j = 0; j < 4; ++j) {
      gr.push_back(onehot);
      gm.push_back({id, 1 + j});
    }
  }
  const auto r = rank(rows_tensor(qr), rows_tensor(gr), qm, gm);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.rank1, 1.0);
}

TEST(Rank, SameCameraSameIdentityExcluded) {
  const Tensor q = rows_tensor({{1, 0}}), g = rows_tensor({{1, 0}, {0.9, 0.1}, {0, 1}});
  const std::vector<ImageLabel> qm{{1, 3}}, gm{{1, 3}, {1, 4}, {2, 3}};
  const auto r = rank(q, g, qm, gm);
  EXPECT_EQ(r.order[0], (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(r.ap[0], 1.0);
}

TEST(Rank, TiesBrokenByGalleryIndex) {
  const Tensor q = rows_tensor({{1, 0}}), g = rows_tensor({{0, 1}, {1, 0}, {1, 0}, {1, 0}});
  const std::vector<ImageLabel> qm{{1, 0}}, gm{{1, 1}, {2, 1}, {1, 1}, {3, 1}};
  EXPECT_EQ(rank(q, g, qm, gm).order[0], (std::vector<std::size_t>{1, 2, 3, 0}));
}

TEST(Rank, QueryWithoutMatchIsSkippedAndReported) {
  const Tensor q = rows_tensor({{1, 0}, {0, 1}}), g = rows_tensor({{1, 0}, {0, 1}});
  const std::vector<ImageLabel> qm{{1, 0}, {9, 0}}, gm{{1, 1}, {2, 1}};
  const auto r = rank(q, g, qm, gm);
  EXPECT_EQ(r.skipped, (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.evaluated(), 1u);
  EXPECT_EQ(r.map, 1.0);
  const std::vector<std::string> ids{"a", "b"};
  EXPECT_EQ(ranking_report_csv(r, ids), "query_id,AP,first_match_rank\na,1,1\nb,nan,0\n");
}

TEST(Rank, RejectsEmptyGalleryAndMismatchedMeta) {
  const Tensor q = rows_tensor({{1, 0}});
  const std::vector<ImageLabel> qm{{1, 0}};
  EXPECT_THROW(rank(q, Tensor::zeros({0, 2}), qm, {}), ContractError);
  EXPECT_THROW(rank(q, rows_tensor({{1, 0}}), qm, {}), ContractError);
}

TEST(Rank, MatchesBruteForceAndCmcMonotone) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t nq = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t ng = 2 + static_cast<std::size_t>(rng.uniform_int(0, 8));
    std::vector<ImageLabel> qm(nq), gm(ng);
    for (auto& m : qm) m = {static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 2))};
    for (auto& m : gm) m = {static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 2))};
    const Tensor q = random_embeddings(rng, nq, 3), g = random_embeddings(rng, ng, 3);
    const auto r = rank(q, g, qm, gm);
    for (std::size_t k = 1; k < r.cmc.size(); ++k) ASSERT_GE(r.cmc[k], r.cmc[k - 1]);
    for (double ap : r.ap) {
      if (!std::isnan(ap)) {
        ASSERT_TRUE(ap >= 0.0 && ap <= 1.0);
      }
    }
    if (r.evaluated() == 0) continue;
    ASSERT_EQ(r.rank1, r.cmc[0]);
    const auto ref = brute_force(q, g, qm, gm);
    for (std::size_t i = 0; i < nq; ++i) {
      if (std::isnan(ref.ap[i])) {
        ASSERT_TRUE(std::isnan(r.ap[i]));
      } else {
        ASSERT_NEAR(r.ap[i], ref.ap[i], 1e-12);
      }
    }
    for (std::size_t k = 0; k < ref.cmc.size(); ++k) ASSERT_NEAR(r.cmc[k], ref.cmc[k], 1e-12);
  }
}

TEST(Rank, InvariantToPositiveScaling) {
  Rng rng(23);
  const Tensor q = random_embeddings(rng, 4, 5), g = random_embeddings(rng, 12, 5);
  std::vector<ImageLabel> qm, gm;
  for (int i = 0; i < 4; ++i) qm.push_back({i % 3, 0});
  for (int i = 0; i < 12; ++i) gm.push_back({i % 3, 1});
  std::vector<double> scaled(g.data().begin(), g.data().end());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= 1.0 + static_cast<double>(i / 5);
  const auto a = rank(q, g, qm, gm), b = rank(q, Tensor(g.shape(), scaled), qm, gm);
  EXPECT_EQ(a.order, b.order);
  EXPECT_NEAR(a.map, b.map, 1e-12);
}

TEST(Rank, RandomEmbeddingsMapNearChance) {
  // With G matches among T gallery entries the expected AP of a random
  // ranking is roughly G/T; checked on the mean over 20 seeds.
  const std::size_t ids = 5, per_id = 4, total = ids * per_id;
  double mean_map = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    const Tensor q = random_embeddings(rng, 50, 16), g = random_embeddings(rng, total, 16);
    std::vector<ImageLabel> qm, gm;
    for (std::size_t i = 0; i < 50; ++i) qm.push_back({static_cast<int>(i % ids), 0});
    for (std::size_t i = 0; i < total; ++i) gm.push_back({static_cast<int>(i % ids), 1});
    mean_map += rank(q, g, qm, gm).map / 20.0;
  }
  // Exact expectation of AP for G=4 of T=20 random positions.
  double expected = 0;
  {
    const double G = per_id, T = total;
    // E[AP] = (1/G) * sum_r P(hit at r) * E[precision at r | hit at r]
    //       = (1/G) * sum_r (G/T) * (1 + (r-1)(G-1)/(T-1)) / r
    for (double r = 1; r <= T; ++r) expected += (G / T) * (1.0 + (r - 1) * (G - 1) / (T - 1)) / r;
    expected /= G;
  }
  EXPECT_NEAR(mean_map, expected, 0.03);
  EXPECT_NEAR(expected, static_cast<double>(per_id) / total, 0.15);
}
