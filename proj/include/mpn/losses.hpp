#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpn/error.hpp"
#include "mpn/ops.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

/// Sum over parts and branches of the per-part cross-entropy, each averaged
/// over the batch.
inline Tensor id_loss(std::span<const Tensor> mt_logits, std::span<const Tensor> at_logits,
                      std::span<const int> labels) {
  require(!mt_logits.empty() || !at_logits.empty(), "id_loss: no logits");
  std::vector<Tensor> terms;
  for (const auto& l : mt_logits) terms.push_back(softmax_cross_entropy(l, labels));
  for (const auto& l : at_logits) terms.push_back(softmax_cross_entropy(l, labels));
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

/// 1 - cosine similarity of two vectors.
inline double cosine_distance(std::span<const double> a, std::span<const double> b, double eps = kCosineEps) {
  require(a.size() == b.size(), "cosine_distance: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + eps);
}

namespace detail {

/// Checks that `labels` hold S identities with A samples each and returns the
/// identities in order of first appearance.
inline std::vector<int> check_grouping(std::span<const int> labels, std::size_t s, std::size_t a, const char* op) {
  require(labels.size() == s * a, std::string(op) + ": " + std::to_string(labels.size()) +
                                      " labels for S=" + std::to_string(s) + ", A=" + std::to_string(a));
  std::vector<int> order;
  std::map<int, std::size_t> counts;
  for (int l : labels)
    if (counts[l]++ == 0) order.push_back(l);
  require(order.size() == s, std::string(op) + ": batch holds " + std::to_string(order.size()) +
                                 " identities, expected S=" + std::to_string(s));
  for (const auto& [label, n] : counts)
    require(n == a, std::string(op) + ": identity " + std::to_string(label) + " has " + std::to_string(n) +
                        " samples, expected A=" + std::to_string(a));
  return order;
}

/// [S, N] matrix averaging the rows of each identity.
inline Tensor group_mean_matrix(std::span<const int> labels, const std::vector<int>& order, std::size_t a) {
  const std::size_t s = order.size(), n = labels.size();
  std::vector<double> m(s * n, 0.0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (labels[j] == order[i]) m[i * n + j] = 1.0 / static_cast<double>(a);
  return Tensor({s, n}, std::move(m));
}

inline Tensor batch_mean(const Tensor& x) {
  const std::size_t n = x.dim(0);
  return matmul(Tensor::full({1, n}, 1.0 / static_cast<double>(n)), x);
}

inline void require_pair(const Tensor& h, const Tensor& g, const char* op) {
  require(h.defined() && g.defined(), std::string(op) + ": missing AT features");
  require(h.rank() == 2 && h.shape() == g.shape(), std::string(op) + ": feature shapes " + shape_str(h.shape()) +
                                                       " and " + shape_str(g.shape()) + " differ");
}

}  // namespace detail

struct TripletResult {
  Tensor loss;
  std::size_t n_t = 0;  // anchors whose hinge is positive
};

/// Batch-hard triplet loss on cosine distances: per anchor the farthest
/// positive (other than itself) and the nearest negative, hinge with margin
/// `alpha`, summed and divided by the number of violating anchors (0 if none).
inline TripletResult batch_hard_triplet(const Tensor& h, std::span<const int> labels, std::size_t s,
                                        std::size_t a, double alpha) {
  require(s >= 2 && a >= 2, "batch_hard_triplet: need S >= 2 and A >= 2 (got S=" + std::to_string(s) +
                                ", A=" + std::to_string(a) + ")");
  require(h.rank() == 2 && h.dim(0) == labels.size(), "batch_hard_triplet: expected [N,D] features for " +
                                                          std::to_string(labels.size()) + " labels, got " +
                                                          shape_str(h.shape()));
  detail::check_grouping(labels, s, a, "batch_hard_triplet");
  const std::size_t n = labels.size();
  const Tensor dist = pairwise_cosine_distance(h, h);
  std::vector<std::size_t> pos_idx(n), neg_idx(n);
  std::size_t n_t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t p = n, q = n;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist[i * n + j];
      if (labels[j] == labels[i]) {
        if (j != i && (p == n || d > dist[i * n + p])) p = j;
      } else if (q == n || d < dist[i * n + q]) {
        q = j;
      }
    }
    pos_idx[i] = i * n + p;
    neg_idx[i] = i * n + q;
    if (dist[pos_idx[i]] - dist[neg_idx[i]] + alpha > 0.0) ++n_t;
  }
  if (n_t == 0) return {Tensor::scalar(0.0), 0};
  const Tensor hinge = relu(add_scalar(sub(gather(dist, pos_idx), gather(dist, neg_idx)), alpha));
  return {scale(sum(hinge), 1.0 / static_cast<double>(n_t)), n_t};
}

/// Mean over identities of the cosine distance between the identity's mean
/// MT feature and mean AT feature.
inline Tensor class_wise_fsa(const Tensor& h, const Tensor& g, std::span<const int> labels, std::size_t s,
                             std::size_t a) {
  detail::require_pair(h, g, "class_wise_fsa");
  require(h.dim(0) == labels.size(), "class_wise_fsa: label count does not match batch");
  const auto order = detail::check_grouping(labels, s, a, "class_wise_fsa");
  const Tensor m = detail::group_mean_matrix(labels, order, a);
  return mean(rowwise_cosine_distance(matmul(m, h), matmul(m, g)));
}

/// Mean over samples of the per-sample cosine distance.
inline Tensor sample_wise_fsa(const Tensor& h, const Tensor& g) {
  detail::require_pair(h, g, "sample_wise_fsa");
  return mean(rowwise_cosine_distance(h, g));
}

/// Cosine distance between the batch means, ignoring labels.
inline Tensor batch_wise_fsa(const Tensor& h, const Tensor& g) {
  detail::require_pair(h, g, "batch_wise_fsa");
  return mean(rowwise_cosine_distance(detail::batch_mean(h), detail::batch_mean(g)));
}

/// Triplet loss on the elementwise sum of MT and AT features.
inline TripletResult summed_feature_triplet(const Tensor& h, const Tensor& g, std::span<const int> labels,
                                            std::size_t s, std::size_t a, double alpha) {
  detail::require_pair(h, g, "summed_feature_triplet");
  return batch_hard_triplet(add(h, g), labels, s, a, alpha);
}

/// weight * sum of squared differences over the listed parameter pairs.
inline Tensor soft_sharing_penalty(std::span<const std::pair<Tensor, Tensor>> pairs, double weight) {
  require(weight >= 0.0, "soft_sharing_penalty: weight must be non-negative");
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [p, q] : pairs) {
    require(p.shape() == q.shape(), "soft_sharing_penalty: paired shapes " + shape_str(p.shape()) + " and " +
                                        shape_str(q.shape()) + " differ");
    const Tensor d = sub(p, q);
    total = add(total, sum(mul(d, d)));
  }
  return scale(total, weight);
}

/// Which term fills the alignment slot of the objective.
enum class AlignLoss { none, class_wise, sample_wise, batch_wise, summed_triplet, soft_share };

inline std::string to_string(AlignLoss a) {
  switch (a) {
    case AlignLoss::none: return "none";
    case AlignLoss::class_wise: return "class";
    case AlignLoss::sample_wise: return "sample";
    case AlignLoss::batch_wise: return "batch";
    case AlignLoss::summed_triplet: return "summed";
    case AlignLoss::soft_share: return "soft_share";
  }
  return "?";
}

struct LossInputs {
  std::span<const Tensor> mt_logits, at_logits;
  Tensor h;  // MT features (or AT features without MT heads), [N, K*D]
  Tensor g;  // AT features, [N, K*D]; undefined without both branches
  std::span<const int> labels;
  std::size_t s = 0, a = 0;
  std::span<const std::pair<Tensor, Tensor>> shared_pairs;  // soft sharing only
};

struct LossOptions {
  double alpha = 0.2;
  double lambda = 1.0;
  AlignLoss align = AlignLoss::class_wise;
  double soft_share_weight = 0.1;
};

struct LossBundle {
  Tensor l_id, l_tri, l_cf, total;
  std::size_t n_t = 0;
};

/// L = L_ID + L_TRI + lambda * L_CF. AT features enter only the ID and
/// alignment terms; the summed-feature variant replaces the plain triplet.
inline LossBundle total_loss(const LossInputs& in, const LossOptions& o) {
  require(o.alpha >= 0.0 && o.lambda >= 0.0, "total_loss: alpha and lambda must be non-negative");
  LossBundle b;
  b.l_id = id_loss(in.mt_logits, in.at_logits, in.labels);
  const TripletResult tri = o.align == AlignLoss::summed_triplet
                                ? summed_feature_triplet(in.h, in.g, in.labels, in.s, in.a, o.alpha)
                                : batch_hard_triplet(in.h, in.labels, in.s, in.a, o.alpha);
  b.l_tri = tri.loss;
  b.n_t = tri.n_t;
  switch (o.align) {
    case AlignLoss::none:
    case AlignLoss::summed_triplet: b.l_cf = Tensor::scalar(0.0); break;
    case AlignLoss::class_wise: b.l_cf = class_wise_fsa(in.h, in.g, in.labels, in.s, in.a); break;
    case AlignLoss::sample_wise: b.l_cf = sample_wise_fsa(in.h, in.g); break;
    case AlignLoss::batch_wise: b.l_cf = batch_wise_fsa(in.h, in.g); break;
    case AlignLoss::soft_share: b.l_cf = soft_sharing_penalty(in.shared_pairs, o.soft_share_weight); break;
  }
  b.total = add(add(b.l_id, b.l_tri), o.lambda == 1.0 ? b.l_cf : scale(b.l_cf, o.lambda));
  return b;
}

}  // namespace mpn
