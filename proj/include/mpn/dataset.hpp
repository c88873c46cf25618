#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mpn/error.hpp"
#include "mpn/image_io.hpp"
#include "mpn/prior.hpp"
#include "mpn/rng.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

struct IndexEntry {
  std::string path;  // relative to the corpus directory
  int identity = 0;
  int camera = 0;
};

/// Reads `path,identity,camera` lines.
inline std::vector<IndexEntry> read_index(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open index " + file.string());
  std::vector<IndexEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, id, cam;
    if (!std::getline(ss, path, ',') || !std::getline(ss, id, ',') || !std::getline(ss, cam))
      throw IoError(file.string() + ":" + std::to_string(line_no) + ": expected path,identity,camera");
    try {
      out.push_back({path, std::stoi(id), std::stoi(cam)});
    } catch (const std::exception&) {
      throw IoError(file.string() + ":" + std::to_string(line_no) + ": malformed identity or camera");
    }
  }
  return out;
}

/// Map files of an image: maps/<stem>_parse.pgm and maps/<stem>_seg.pgm.
inline std::filesystem::path parse_map_path(const std::filesystem::path& dir, const std::string& image_path) {
  return dir / "maps" / (std::filesystem::path(image_path).stem().string() + "_parse.pgm");
}
inline std::filesystem::path seg_map_path(const std::filesystem::path& dir, const std::string& image_path) {
  return dir / "maps" / (std::filesystem::path(image_path).stem().string() + "_seg.pgm");
}

/// Pixel normalization applied to every network input.
inline double normalize_pixel(std::uint8_t v) { return (v / 255.0 - 0.5) / 0.25; }

/// CHW doubles of an RGB image.
inline std::vector<double> image_to_chw(const RgbImage& img) {
  const std::size_t hw = img.height * img.width;
  std::vector<double> out(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + p] = normalize_pixel(img.pixels[p * 3 + c]);
  return out;
}

enum class PriorVariant { coarse, uniform, roi_resize };

inline PriorVariant parse_prior_variant(const std::string& s) {
  if (s == "coarse") return PriorVariant::coarse;
  if (s == "uniform") return PriorVariant::uniform;
  if (s == "roi_resize") return PriorVariant::roi_resize;
  throw ContractError("unknown prior variant '" + s + "' (expected coarse|uniform|roi_resize)");
}

/// One image held in memory, with its prior when computed.
struct Sample {
  IndexEntry entry;
  std::vector<double> chw;
  PartPrior prior;
};

/// Images of a corpus directory, loaded once.
struct Dataset {
  std::filesystem::path dir;
  std::size_t height = 0, width = 0;
  std::vector<Sample> samples;
  std::vector<int> identities;  // sorted distinct identities

  /// Loads every listed image. Maps are read only when `with_priors` is set;
  /// an image whose map files are missing gets the uniform fallback prior.
  static Dataset load(const std::filesystem::path& dir, bool with_priors, PriorVariant variant = PriorVariant::coarse,
                      const PriorOptions& prior_options = {}) {
    Dataset d;
    d.dir = dir;
    LabelTable labels = prior_options.labels;
    if (with_priors && std::filesystem::exists(dir / "labels.txt")) labels = LabelTable::load(dir / "labels.txt");
    PriorOptions po = prior_options;
    po.labels = labels;
    std::set<int> ids;
    for (const auto& e : read_index(dir / "index.csv")) {
      const RgbImage img = read_ppm(dir / e.path);
      if (d.samples.empty()) {
        d.height = img.height;
        d.width = img.width;
      }
      require(img.height == d.height && img.width == d.width,
              "dataset: " + e.path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                  ", expected " + std::to_string(d.height) + "x" + std::to_string(d.width));
      Sample s{e, image_to_chw(img), {}};
      if (with_priors) s.prior = compute_prior(dir, e.path, variant, po);
      d.samples.push_back(std::move(s));
      ids.insert(e.identity);
    }
    require(!d.samples.empty(), "dataset: " + (dir / "index.csv").string() + " lists no images");
    d.identities.assign(ids.begin(), ids.end());
    return d;
  }

  static PartPrior compute_prior(const std::filesystem::path& dir, const std::string& image_path,
                                 PriorVariant variant, const PriorOptions& po) {
    if (variant == PriorVariant::uniform) return uniform_prior(po.feat_h, po.feat_w, po.parts);
    const auto parse = parse_map_path(dir, image_path), seg = seg_map_path(dir, image_path);
    if (!std::filesystem::exists(parse) || !std::filesystem::exists(seg)) return detail::fallback_prior(po);
    const MapPair maps{read_pgm(parse), read_pgm(seg)};
    return variant == PriorVariant::coarse ? build_prior(maps, po) : roi_resize_prior(maps, po);
  }

  /// Stacks the listed samples into [n, 3, H, W].
  Tensor images(const std::vector<std::size_t>& which) const {
    const std::size_t per = 3 * height * width;
    std::vector<double> data(which.size() * per);
    for (std::size_t i = 0; i < which.size(); ++i)
      std::copy(samples.at(which[i]).chw.begin(), samples[which[i]].chw.end(), data.begin() + i * per);
    return Tensor({which.size(), 3, height, width}, std::move(data));
  }

  std::map<int, std::vector<std::size_t>> by_identity() const {
    std::map<int, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].entry.identity].push_back(i);
    return out;
  }
};

/// Training identities, and query/gallery sample indices of the held-out
/// identities (the last quarter, at least one).
struct Split {
  std::vector<int> train_ids, test_ids;
  std::vector<std::size_t> train, query, gallery;
};

inline Split make_split(const Dataset& d) {
  require(d.identities.size() >= 2, "split: need at least two identities");
  const std::size_t n_test = std::max<std::size_t>(1, d.identities.size() / 4);
  Split s;
  s.train_ids.assign(d.identities.begin(), d.identities.end() - static_cast<std::ptrdiff_t>(n_test));
  s.test_ids.assign(d.identities.end() - static_cast<std::ptrdiff_t>(n_test), d.identities.end());
  const std::set<int> test(s.test_ids.begin(), s.test_ids.end());
  for (const auto& [id, idx] : d.by_identity()) {
    if (!test.count(id)) {
      s.train.insert(s.train.end(), idx.begin(), idx.end());
      continue;
    }
    for (std::size_t j = 0; j < idx.size(); ++j) (j % 4 == 0 ? s.query : s.gallery).push_back(idx[j]);
  }
  return s;
}

/// S identities x A images, grouped by identity.
struct Batch {
  std::vector<std::size_t> samples;
  std::vector<int> identities;  // per image
  std::size_t s = 0, a = 0;
};

/// Per epoch, every identity's images are shuffled and cut into chunks of A
/// (the last chunk topped up from the same identity), so an identity takes
/// part in at most ceil(images / A) batches. Batches draw S distinct
/// identities at random among those with chunks left.
inline std::vector<Batch> epoch_batches(const std::map<int, std::vector<std::size_t>>& pool, std::size_t s,
                                        std::size_t a, Rng& rng) {
  require(s >= 1 && a >= 1, "sampler: S and A must be positive");
  require(pool.size() >= s, "sampler: " + std::to_string(pool.size()) + " identities cannot fill S=" +
                                std::to_string(s));
  std::map<int, std::vector<std::vector<std::size_t>>> chunks;
  for (const auto& [id, items] : pool) {
    require(items.size() >= a, "sampler: identity " + std::to_string(id) + " has " + std::to_string(items.size()) +
                                   " images, fewer than A=" + std::to_string(a));
    std::vector<std::size_t> order = items;
    rng.shuffle(order);
    auto& list = chunks[id];
    for (std::size_t b = 0; b < order.size(); b += a) {
      std::vector<std::size_t> c(order.begin() + static_cast<std::ptrdiff_t>(b),
                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + a)));
      while (c.size() < a) {
        const std::size_t pick = items[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(items.size()) - 1))];
        if (std::find(c.begin(), c.end(), pick) == c.end()) c.push_back(pick);
      }
      list.push_back(std::move(c));
    }
  }
  std::vector<Batch> out;
  while (true) {
    std::vector<int> available;
    for (const auto& [id, list] : chunks)
      if (!list.empty()) available.push_back(id);
    if (available.size() < s) break;
    rng.shuffle(available);
    available.resize(s);
    std::sort(available.begin(), available.end());
    Batch b;
    b.s = s;
    b.a = a;
    for (int id : available) {
      auto& list = chunks[id];
      for (std::size_t idx : list.back()) {
        b.samples.push_back(idx);
        b.identities.push_back(id);
      }
      list.pop_back();
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// A single S x A batch drawn from the listed identities.
inline Batch load_batch(const std::map<int, std::vector<std::size_t>>& pool, const std::vector<int>& ids,
                        std::size_t a, Rng& rng) {
  require(!ids.empty() && a >= 1, "load_batch: need at least one identity and A >= 1");
  Batch b;
  b.s = ids.size();
  b.a = a;
  for (int id : ids) {
    const auto it = pool.find(id);
    require(it != pool.end(), "load_batch: unknown identity " + std::to_string(id));
    require(it->second.size() >= a, "load_batch: identity " + std::to_string(id) + " has " +
                                        std::to_string(it->second.size()) + " images, fewer than A=" +
                                        std::to_string(a));
    std::vector<std::size_t> order = it->second;
    rng.shuffle(order);
    for (std::size_t j = 0; j < a; ++j) {
      b.samples.push_back(order[j]);
      b.identities.push_back(id);
    }
  }
  return b;
}

struct AugmentOptions {
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02, erase_area_max = 0.4;
  double erase_aspect_min = 0.3, erase_aspect_max = 3.3;
};

struct EraseBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct AugmentRecord {
  bool flipped = false;
  bool erased = false;
  EraseBox box;
};

/// Horizontal flip then random erasing of a CHW image in place. The prior
/// mask is mirrored with the image.
inline AugmentRecord augment(std::vector<double>& chw, std::size_t h, std::size_t w, PartPrior* prior, Rng& rng,
                             const AugmentOptions& o = {}) {
  require(chw.size() % (h * w) == 0, "augment: buffer does not match image size");
  const std::size_t channels = chw.size() / (h * w);
  AugmentRecord rec;
  if (rng.bernoulli(o.flip_prob)) {
    rec.flipped = true;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y) {
        double* row = chw.data() + (c * h + y) * w;
        std::reverse(row, row + w);
      }
    if (prior)
      for (std::size_t y = 0; y < prior->rows; ++y)
        std::reverse(prior->mask.begin() + static_cast<std::ptrdiff_t>(y * prior->cols),
                     prior->mask.begin() + static_cast<std::ptrdiff_t>((y + 1) * prior->cols));
  }
  if (rng.bernoulli(o.erase_prob)) {
    const double area = static_cast<double>(h * w);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = rng.uniform(o.erase_area_min, o.erase_area_max) * area;
      const double aspect = rng.uniform(o.erase_aspect_min, o.erase_aspect_max);
      const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
      rec.erased = true;
      rec.box.top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - eh)));
      rec.box.left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - ew)));
      rec.box.height = eh;
      rec.box.width = ew;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = rec.box.top; y < rec.box.top + eh; ++y)
          for (std::size_t x = rec.box.left; x < rec.box.left + ew; ++x)
            chw[(c * h + y) * w + x] = (rng.uniform() - 0.5) / 0.25;
      break;
    }
  }
  return rec;
}

}  // namespace mpn
