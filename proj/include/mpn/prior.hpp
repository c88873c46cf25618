#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/error.hpp"
#include "mpn/image_io.hpp"
#include "mpn/ops.hpp"

namespace mpn {

/// Outputs of the two map sources for one image, at image resolution.
/// `parsing` holds per-pixel body-part label ids (0 = background);
/// `segmentation` is nonzero on the foreground.
struct MapPair {
  GrayImage parsing;
  GrayImage segmentation;
};

/// Half-open row interval [begin, end).
struct RowRange {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const RowRange&) const = default;
};

/// Coarse body-part locations on the feature-map grid.
struct PartPrior {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> mask;  // rows * cols, values in {0, 1}
  std::size_t roi_top = 0, roi_bottom = 0;  // inclusive
  std::vector<RowRange> strips;
  bool fallback_used = false;

  bool mask_all_ones() const {
    return std::all_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v == 1; });
  }
  bool same_geometry(const PartPrior& o) const {
    return rows == o.rows && cols == o.cols && mask == o.mask && roi_top == o.roi_top &&
           roi_bottom == o.roi_bottom && strips == o.strips;
  }
};

/// Label ids of the parsing map. Read from a `name = id` sidecar; the head
/// is the `head` entry and every entry whose name contains "leg" is a leg.
struct LabelTable {
  int head = 1;
  std::vector<int> legs{5, 6};

  static LabelTable from(const KeyValues& kv) {
    LabelTable t;
    require(kv.has("head"), "label table has no 'head' entry");
    t.head = static_cast<int>(kv.get_int("head", 0));
    t.legs.clear();
    for (const auto& [name, _] : kv.entries())
      if (name.find("leg") != std::string::npos) t.legs.push_back(static_cast<int>(kv.get_int(name, 0)));
    require(!t.legs.empty(), "label table has no leg entries");
    return t;
  }
  static LabelTable load(const std::filesystem::path& path) { return from(KeyValues::load(path)); }
};

struct PriorOptions {
  std::size_t feat_h = 24;
  std::size_t feat_w = 8;
  std::size_t parts = 6;
  std::size_t min_pixels = 10;  // at image resolution
  LabelTable labels;
};

/// Splits [begin, end) into `parts` intervals; the first (R mod parts)
/// intervals get one extra row.
inline std::vector<RowRange> partition_rows(std::size_t begin, std::size_t end, std::size_t parts) {
  require(parts >= 1 && end >= begin, "partition_rows: invalid arguments");
  const std::size_t rows = end - begin, base = rows / parts, extra = rows % parts;
  std::vector<RowRange> out;
  std::size_t at = begin;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    out.push_back({at, at + len});
    at += len;
  }
  return out;
}

/// True iff the head and at least one leg each cover >= min_pixels pixels.
inline bool presence_check(const GrayImage& parsing, int head_label, std::span<const int> leg_labels,
                           std::size_t min_pixels) {
  std::vector<std::size_t> counts(256, 0);
  for (std::uint8_t v : parsing.pixels) ++counts[v];
  auto count_of = [&](int label) { return label >= 0 && label < 256 ? counts[static_cast<std::size_t>(label)] : 0; };
  if (count_of(head_label) < min_pixels) return false;
  return std::any_of(leg_labels.begin(), leg_labels.end(),
                     [&](int l) { return count_of(l) >= min_pixels; });
}

inline PartPrior uniform_prior(std::size_t feat_h, std::size_t feat_w, std::size_t parts) {
  require(parts >= 1 && feat_h >= parts && feat_w >= 1,
          "uniform_prior: need feat_h >= K >= 1 (feat_h=" + std::to_string(feat_h) +
              ", K=" + std::to_string(parts) + ")");
  PartPrior p;
  p.rows = feat_h;
  p.cols = feat_w;
  p.mask.assign(feat_h * feat_w, 1);
  p.roi_top = 0;
  p.roi_bottom = feat_h - 1;
  p.strips = partition_rows(0, feat_h, parts);
  return p;
}

namespace detail {

inline PartPrior fallback_prior(const PriorOptions& o) {
  PartPrior p = uniform_prior(o.feat_h, o.feat_w, o.parts);
  p.fallback_used = true;
  return p;
}

}  // namespace detail

/// Union of both maps, resized to the feature grid, binarized at 0.5 and
/// dilated with a left-anchored 1x2 kernel; the ROI spans the first to the
/// last foreground row and is divided into K strips. Falls back to an even
/// division of the full height when the head or both legs are missing, or
/// when the ROI has fewer than K rows.
inline PartPrior build_prior(const MapPair& maps, const PriorOptions& o) {
  require(o.parts >= 1 && o.feat_h >= o.parts, "build_prior: need feat_h >= K >= 1");
  const GrayImage& parse = maps.parsing;
  const GrayImage& seg = maps.segmentation;
  require(parse.height == seg.height && parse.width == seg.width && parse.height > 0 && parse.width > 0,
          "build_prior: parsing and segmentation maps differ in size (" + std::to_string(parse.height) + "x" +
              std::to_string(parse.width) + " vs " + std::to_string(seg.height) + "x" +
              std::to_string(seg.width) + ")");
  if (!presence_check(parse, o.labels.head, o.labels.legs, o.min_pixels)) return detail::fallback_prior(o);

  std::vector<double> fg(parse.pixels.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = (parse.pixels[i] != 0 || seg.pixels[i] != 0) ? 1.0 : 0.0;
  const Tensor resized = bilinear_resize(Tensor({1, 1, parse.height, parse.width}, std::move(fg)), o.feat_h, o.feat_w);

  PartPrior p;
  p.rows = o.feat_h;
  p.cols = o.feat_w;
  p.mask.assign(o.feat_h * o.feat_w, 0);
  for (std::size_t y = 0; y < o.feat_h; ++y)
    for (std::size_t x = 0; x < o.feat_w; ++x) {
      const bool on = resized[y * o.feat_w + x] >= 0.5;
      const bool left = x > 0 && resized[y * o.feat_w + x - 1] >= 0.5;
      p.mask[y * o.feat_w + x] = (on || left) ? 1 : 0;
    }

  std::size_t first = o.feat_h, last = 0;
  for (std::size_t y = 0; y < o.feat_h; ++y)
    for (std::size_t x = 0; x < o.feat_w; ++x)
      if (p.mask[y * o.feat_w + x]) {
        first = std::min(first, y);
        last = std::max(last, y);
      }
  if (first == o.feat_h || last + 1 - first < o.parts) return detail::fallback_prior(o);
  p.roi_top = first;
  p.roi_bottom = last;
  p.strips = partition_rows(first, last + 1, o.parts);
  return p;
}

/// Same boundaries as build_prior, but without background masking.
inline PartPrior roi_resize_prior(const MapPair& maps, const PriorOptions& o) {
  PartPrior p = build_prior(maps, o);
  std::fill(p.mask.begin(), p.mask.end(), std::uint8_t{1});
  return p;
}

/// Text rendering for inspection: one line per grid row, '#' for mask
/// foreground, followed by ROI and strip markers.
inline std::string render_prior(const PartPrior& p) {
  std::string out;
  if (p.fallback_used) out += "fallback: uniform division\n";
  out += "grid " + std::to_string(p.rows) + "x" + std::to_string(p.cols) + "\n";
  out += "roi rows " + std::to_string(p.roi_top) + ".." + std::to_string(p.roi_bottom) + "\n";
  for (std::size_t k = 0; k < p.strips.size(); ++k)
    out += "strip " + std::to_string(k + 1) + " rows " + std::to_string(p.strips[k].begin) + ".." +
           std::to_string(p.strips[k].end - 1) + " (" + std::to_string(p.strips[k].size()) + ")\n";
  for (std::size_t y = 0; y < p.rows; ++y) {
    std::string line;
    for (std::size_t x = 0; x < p.cols; ++x) line += p.mask[y * p.cols + x] ? '#' : '.';
    std::string tag;
    for (std::size_t k = 0; k < p.strips.size(); ++k)
      if (y >= p.strips[k].begin && y < p.strips[k].end) tag = " " + std::to_string(k + 1);
    if (y == p.roi_top) tag += " <top";
    if (y == p.roi_bottom) tag += " <bottom";
    char row[8];
    std::snprintf(row, sizeof(row), "%2zu ", y);
    out += row + line + tag + "\n";
  }
  return out;
}

}  // namespace mpn
