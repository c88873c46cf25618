#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/dataset.hpp"
#include "mpn/error.hpp"
#include "mpn/losses.hpp"
#include "mpn/model.hpp"
#include "mpn/serialize.hpp"

namespace mpn {

/// Cosine similarity, 1 - cosine_distance.
inline double similarity(std::span<const double> a, std::span<const double> b) {
  return 1.0 - cosine_distance(a, b);
}

struct ImageLabel {
  int identity = 0;
  int camera = 0;
};

struct RankingResult {
  std::vector<std::vector<std::size_t>> order;  // per query, gallery indices after exclusion, best first
  std::vector<double> ap;                       // per query; NaN for skipped queries
  std::vector<std::size_t> first_match_rank;    // per query, 1-based; 0 for skipped queries
  std::vector<std::size_t> skipped;             // queries without any true match in the gallery
  std::vector<double> cmc;                      // cmc[r-1]: fraction of evaluated queries matched within r
  double map = 0.0;
  double rank1 = 0.0;

  std::size_t evaluated() const { return ap.size() - skipped.size(); }
};

namespace detail {

inline std::vector<std::vector<double>> rows_of(const Tensor& t) {
  require(t.rank() == 2, "ranking: embeddings must be [N, D], got " + shape_str(t.shape()));
  std::vector<std::vector<double>> out(t.dim(0));
  const std::size_t d = t.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].assign(t.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                  t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  return out;
}

}  // namespace detail

/// Average precision of a ranked list of match flags: the mean of the
/// precision at each true match.
inline double average_precision(const std::vector<bool>& matches) {
  double hits = 0, total = 0;
  for (std::size_t r = 0; r < matches.size(); ++r)
    if (matches[r]) {
      hits += 1;
      total += hits / static_cast<double>(r + 1);
    }
  return hits > 0 ? total / hits : 0.0;
}

/// Ranks the gallery for every query by descending cosine similarity (ties
/// by ascending gallery index), dropping gallery entries that share both
/// identity and camera with the query.
inline RankingResult rank(const Tensor& query, const Tensor& gallery, std::span<const ImageLabel> query_meta,
                          std::span<const ImageLabel> gallery_meta) {
  require(query.rank() == 2 && gallery.rank() == 2 && query.dim(1) == gallery.dim(1),
          "rank: embedding shapes " + shape_str(query.shape()) + " and " + shape_str(gallery.shape()) +
              " are incompatible");
  require(query.dim(0) == query_meta.size() && gallery.dim(0) == gallery_meta.size(),
          "rank: metadata count does not match embeddings");
  require(gallery.dim(0) > 0, "rank: empty gallery");
  const auto q = detail::rows_of(query), g = detail::rows_of(gallery);
  RankingResult r;
  r.cmc.assign(g.size(), 0.0);
  double ap_sum = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (gallery_meta[j].identity == query_meta[i].identity && gallery_meta[j].camera == query_meta[i].camera)
        continue;
      scored.emplace_back(similarity(q[i], g[j]), j);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<std::size_t> order;
    std::vector<bool> matches;
    for (const auto& [_, j] : scored) {
      order.push_back(j);
      matches.push_back(gallery_meta[j].identity == query_meta[i].identity);
    }
    r.order.push_back(order);
    const auto first = std::find(matches.begin(), matches.end(), true);
    if (first == matches.end()) {
      r.skipped.push_back(i);
      r.ap.push_back(std::nan(""));
      r.first_match_rank.push_back(0);
      continue;
    }
    const auto pos = static_cast<std::size_t>(first - matches.begin());
    r.first_match_rank.push_back(pos + 1);
    r.ap.push_back(average_precision(matches));
    ap_sum += r.ap.back();
    for (std::size_t k = pos; k < r.cmc.size(); ++k) r.cmc[k] += 1.0;
  }
  const std::size_t n = r.evaluated();
  if (n > 0) {
    for (auto& c : r.cmc) c /= static_cast<double>(n);
    r.map = ap_sum / static_cast<double>(n);
    r.rank1 = r.cmc[0];
  }
  return r;
}

/// `query_id,AP,first_match_rank` lines; skipped queries report AP "nan" and rank 0.
inline std::string ranking_report_csv(const RankingResult& r, std::span<const std::string> query_ids) {
  require(query_ids.size() == r.ap.size(), "report: query id count does not match ranking");
  std::string out = "query_id,AP,first_match_rank\n";
  for (std::size_t i = 0; i < r.ap.size(); ++i)
    out += query_ids[i] + "," + (std::isnan(r.ap[i]) ? std::string("nan") : format_double(r.ap[i])) + "," +
           std::to_string(r.first_match_rank[i]) + "\n";
  return out;
}

struct EvalOutput {
  RankingResult ranking;
  Tensor query_embeddings, gallery_embeddings;
  std::vector<std::size_t> query, gallery;  // dataset sample indices
};

/// Embeds the query and gallery samples in eval mode and ranks them.
inline EvalOutput evaluate(MpnModel& model, const Dataset& data, const std::vector<std::size_t>& query,
                           const std::vector<std::size_t>& gallery) {
  EvalOutput out;
  out.query = query;
  out.gallery = gallery;
  out.query_embeddings = extract_embedding(model, data.images(query));
  out.gallery_embeddings = extract_embedding(model, data.images(gallery));
  std::vector<ImageLabel> qm, gm;
  for (auto i : query) qm.push_back({data.samples[i].entry.identity, data.samples[i].entry.camera});
  for (auto i : gallery) gm.push_back({data.samples[i].entry.identity, data.samples[i].entry.camera});
  out.ranking = rank(out.query_embeddings, out.gallery_embeddings, qm, gm);
  return out;
}

/// Writes `<stem>.mpnt` and `<stem>_index.csv` (`row,path,identity,camera`).
inline void dump_embeddings(const Tensor& emb, const Dataset& data, const std::vector<std::size_t>& which,
                            const std::filesystem::path& dir, const std::string& stem) {
  save_tensor(emb, dir / (stem + ".mpnt"));
  std::string csv = "row,path,identity,camera\n";
  for (std::size_t r = 0; r < which.size(); ++r) {
    const auto& e = data.samples[which[r]].entry;
    csv += std::to_string(r) + "," + e.path + "," + std::to_string(e.identity) + "," + std::to_string(e.camera) + "\n";
  }
  detail::write_file(dir / (stem + "_index.csv"), csv);
}

}  // namespace mpn
