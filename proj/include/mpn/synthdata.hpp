#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mpn/config.hpp"
#include "mpn/error.hpp"
#include "mpn/image_io.hpp"
#include "mpn/prior.hpp"
#include "mpn/rng.hpp"

namespace mpn {

// Parsing-map label ids written by the generator.
enum PartLabel : std::uint8_t {
  kBackground = 0,
  kHead = 1,
  kTorso = 2,
  kLeftArm = 3,
  kRightArm = 4,
  kLeftLeg = 5,
  kRightLeg = 6,
};

inline std::string label_table_text() {
  return "background = 0\nhead = 1\ntorso = 2\nleft_arm = 3\nright_arm = 4\nleft_leg = 5\nright_leg = 6\n";
}

struct MisalignmentSpec {
  double crop_jitter_frac = 0.2;   // figure top moves down by up to this fraction of H
  double scale_jitter_frac = 0.1;  // figure height varies by +- this fraction
  double limb_swing_deg = 20.0;
};

struct CorpusSpec {
  std::size_t num_identities = 20;
  std::size_t images_per_identity = 40;
  std::size_t image_h = 96;
  std::size_t image_w = 32;
  MisalignmentSpec misalignment;
  double occlusion_prob = 0.1;
  double blur_prob = 0.1;
  double corrupted_map_frac = 0.1;
  std::size_t num_cameras = 6;
  double noise_std = 0.05;
  std::size_t palette_size = 3;  // shared clothing colors; 0 draws every color freely
  std::uint64_t seed = 1;

  void validate() const {
    auto frac = [](double v) { return v >= 0.0 && v <= 0.5; };
    auto prob = [](double v) { return v >= 0.0 && v <= 1.0; };
    require(num_identities >= 1 && images_per_identity >= 1, "corpus: need at least one identity and image");
    require(image_h >= 16 && image_w >= 8, "corpus: image must be at least 16x8");
    require(frac(misalignment.crop_jitter_frac), "corpus: crop_jitter_frac must lie in [0, 0.5]");
    require(frac(misalignment.scale_jitter_frac), "corpus: scale_jitter_frac must lie in [0, 0.5]");
    require(misalignment.limb_swing_deg >= 0.0 && misalignment.limb_swing_deg <= 90.0,
            "corpus: limb_swing_deg must lie in [0, 90]");
    require(prob(occlusion_prob) && prob(blur_prob) && prob(corrupted_map_frac),
            "corpus: probabilities must lie in [0, 1]");
    require(num_cameras >= 1, "corpus: need at least one camera");
    require(palette_size <= 12, "corpus: palette_size must be at most 12");
    require(noise_std >= 0.0, "corpus: noise_std must be non-negative");
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{
        "corpus.num_identities", "corpus.images_per_identity", "corpus.image_h", "corpus.image_w",
        "corpus.crop_jitter_frac", "corpus.scale_jitter_frac", "corpus.limb_swing_deg",
        "corpus.occlusion_prob", "corpus.blur_prob", "corpus.corrupted_map_frac", "corpus.num_cameras",
        "corpus.noise_std", "corpus.palette_size", "corpus.seed"};
    return k;
  }

  static CorpusSpec from(const KeyValues& kv) {
    kv.require_known(keys());
    CorpusSpec s;
    auto count = [&](const char* key, std::size_t fallback) {
      const long long v = kv.get_int(key, static_cast<long long>(fallback));
      require(v >= 0, std::string("corpus: ") + key + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    s.num_identities = count("corpus.num_identities", s.num_identities);
    s.images_per_identity = count("corpus.images_per_identity", s.images_per_identity);
    s.image_h = count("corpus.image_h", s.image_h);
    s.image_w = count("corpus.image_w", s.image_w);
    s.misalignment.crop_jitter_frac = kv.get_double("corpus.crop_jitter_frac", s.misalignment.crop_jitter_frac);
    s.misalignment.scale_jitter_frac = kv.get_double("corpus.scale_jitter_frac", s.misalignment.scale_jitter_frac);
    s.misalignment.limb_swing_deg = kv.get_double("corpus.limb_swing_deg", s.misalignment.limb_swing_deg);
    s.occlusion_prob = kv.get_double("corpus.occlusion_prob", s.occlusion_prob);
    s.blur_prob = kv.get_double("corpus.blur_prob", s.blur_prob);
    s.corrupted_map_frac = kv.get_double("corpus.corrupted_map_frac", s.corrupted_map_frac);
    s.num_cameras = count("corpus.num_cameras", s.num_cameras);
    s.noise_std = kv.get_double("corpus.noise_std", s.noise_std);
    s.palette_size = count("corpus.palette_size", s.palette_size);
    s.seed = static_cast<std::uint64_t>(kv.get_int("corpus.seed", static_cast<long long>(s.seed)));
    s.validate();
    return s;
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("corpus.num_identities", std::to_string(num_identities));
    kv.set("corpus.images_per_identity", std::to_string(images_per_identity));
    kv.set("corpus.image_h", std::to_string(image_h));
    kv.set("corpus.image_w", std::to_string(image_w));
    kv.set("corpus.crop_jitter_frac", format_double(misalignment.crop_jitter_frac));
    kv.set("corpus.scale_jitter_frac", format_double(misalignment.scale_jitter_frac));
    kv.set("corpus.limb_swing_deg", format_double(misalignment.limb_swing_deg));
    kv.set("corpus.occlusion_prob", format_double(occlusion_prob));
    kv.set("corpus.blur_prob", format_double(blur_prob));
    kv.set("corpus.corrupted_map_frac", format_double(corrupted_map_frac));
    kv.set("corpus.num_cameras", std::to_string(num_cameras));
    kv.set("corpus.noise_std", format_double(noise_std));
    kv.set("corpus.palette_size", std::to_string(palette_size));
    kv.set("corpus.seed", std::to_string(seed));
    return kv;
  }
};

using Color = std::array<double, 3>;

/// Stable per-identity appearance parameters.
struct IdentitySignature {
  Color hair, skin, shirt, stripe, pants, shoes, bag;
  double stripe_period = 0.0;  // fraction of figure height; 0 = plain shirt
  double sleeve_frac = 0.5;    // fraction of the arm covered by the sleeve
  double body_width = 1.0;
  bool has_bag = false;
  bool bag_left = false;

  /// Parameter-space vector used to compare identities.
  std::vector<double> vector() const {
    std::vector<double> v;
    for (const Color* c : {&hair, &skin, &shirt, &stripe, &pants, &shoes})
      v.insert(v.end(), c->begin(), c->end());
    v.push_back(stripe_period * 4.0);
    v.push_back(sleeve_frac);
    v.push_back(body_width);
    v.push_back(has_bag ? 1.0 : 0.0);
    return v;
  }
};

/// Per-image rendering parameters (pose, placement, nuisance factors).
struct ImageParams {
  double figure_top = 0.0;     // image rows
  double figure_height = 0.0;  // image rows
  double center_x = 0.0;
  double arm_angle[2] = {0.0, 0.0};  // radians, outward positive
  double leg_angle[2] = {0.0, 0.0};
  std::size_t camera = 0;
  double brightness = 1.0;
  Color background{0.5, 0.5, 0.5};
  double background_slope = 0.0;
  bool occluded = false;
  std::size_t occ_top = 0, occ_bottom = 0, occ_width = 0;
  bool occ_left = true;
  Color occ_color{0.0, 0.0, 0.0};
  bool blurred = false;
  bool corrupted = false;
  std::uint64_t noise_seed = 0;
};

struct SyntheticImage {
  std::size_t height = 0, width = 0;
  std::vector<double> rgb;         // h * w * 3 in [0, 1]
  std::vector<double> background;  // same layout, the scene without the figure
  MapPair maps;
  int identity = 0;
  int camera = 0;
  ImageParams params;
  std::size_t figure_top = 0, figure_bottom = 0;  // rendered figure rows [top, bottom), before occlusion

  RgbImage to_rgb8() const {
    RgbImage img(height, width);
    for (std::size_t i = 0; i < rgb.size(); ++i)
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0));
    return img;
  }
};

namespace detail {

inline double color_distance(const Color& a, const Color& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

inline Color random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

// Saturated colors keep figures distinguishable from the gray background.
inline Color random_vivid_color(Rng& rng) {
  Color c;
  do {
    c = random_color(rng);
  } while (*std::max_element(c.begin(), c.end()) - *std::min_element(c.begin(), c.end()) < 0.3);
  return c;
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by, double& t) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
  const double cx = ax + t * dx - px, cy = ay + t * dy - py;
  return std::sqrt(cx * cx + cy * cy);
}

}  // namespace detail

/// Minimum parameter-space distance enforced between identity signatures.
inline constexpr double kMinSignatureDistance = 0.6;

/// Identity appearances, drawn by rejection so that every pair differs by at
/// least kMinSignatureDistance in signature space. With a palette, clothing
/// colors repeat across identities and identities differ mainly in which part
/// wears which color.
inline std::vector<IdentitySignature> make_signatures(const CorpusSpec& spec) {
  Rng rng = Rng::stream(spec.seed, 0x5157);
  std::vector<Color> palette;
  while (palette.size() < spec.palette_size) {
    const Color c = detail::random_vivid_color(rng);
    bool distinct = true;
    for (const auto& o : palette) distinct = distinct && detail::color_distance(c, o) >= 0.45;
    if (distinct) palette.push_back(c);
  }
  auto clothing = [&] {
    if (palette.empty()) return detail::random_vivid_color(rng);
    return palette[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(palette.size()) - 1))];
  };
  std::vector<IdentitySignature> out;
  for (std::size_t attempt = 0; out.size() < spec.num_identities; ++attempt) {
    require(attempt < 1000000, "corpus: cannot draw " + std::to_string(spec.num_identities) +
                                   " distinct identities; enlarge palette_size");
    IdentitySignature s;
    s.hair = {rng.uniform(0.0, 0.35), rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.25)};
    const double tone = rng.uniform(0.45, 0.95);
    s.skin = {tone, tone * rng.uniform(0.7, 0.85), tone * rng.uniform(0.55, 0.7)};
    s.shirt = clothing();
    s.stripe = clothing();
    s.pants = clothing();
    s.shoes = palette.empty() ? detail::random_color(rng) : clothing();
    s.bag = clothing();
    s.stripe_period = rng.bernoulli(0.5) ? rng.uniform(0.04, 0.1) : 0.0;
    s.sleeve_frac = rng.uniform(0.2, 1.0);
    s.body_width = rng.uniform(0.85, 1.15);
    s.has_bag = rng.bernoulli(0.3);
    s.bag_left = rng.bernoulli(0.5);
    const auto v = s.vector();
    bool far = true;
    for (const auto& o : out) {
      const auto w = o.vector();
      double d2 = 0;
      for (std::size_t i = 0; i < v.size(); ++i) d2 += (v[i] - w[i]) * (v[i] - w[i]);
      if (std::sqrt(d2) < kMinSignatureDistance) {
        far = false;
        break;
      }
    }
    if (far) out.push_back(s);
  }
  return out;
}

/// Per-camera illumination gains.
inline std::vector<Color> camera_gains(const CorpusSpec& spec) {
  Rng rng = Rng::stream(spec.seed, 0xCA3);
  std::vector<Color> gains(spec.num_cameras);
  for (auto& g : gains) g = {rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15)};
  return gains;
}

/// Draws the nuisance parameters of one image from its own stream.
inline ImageParams sample_image_params(const CorpusSpec& spec, std::size_t global_index) {
  Rng rng = Rng::stream(spec.seed, 0x10000 + global_index);
  const double h = static_cast<double>(spec.image_h), w = static_cast<double>(spec.image_w);
  const auto& m = spec.misalignment;
  ImageParams p;
  p.figure_top = 0.03 * h + rng.uniform() * m.crop_jitter_frac * h;
  p.figure_height = 0.94 * h * (1.0 + m.scale_jitter_frac * rng.uniform(-1.0, 1.0));
  p.center_x = w / 2.0 + rng.uniform(-1.0, 1.0) * m.crop_jitter_frac * 0.1 * w;
  const double swing = m.limb_swing_deg * std::numbers::pi / 180.0;
  for (int s = 0; s < 2; ++s) {
    p.arm_angle[s] = rng.uniform(-0.25, 1.0) * swing;
    p.leg_angle[s] = rng.uniform(-0.5, 0.5) * swing / 2.0;
  }
  p.camera = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.num_cameras) - 1));
  p.brightness = rng.uniform(0.9, 1.1);
  const double gray = rng.uniform(0.3, 0.7);
  p.background = {gray + rng.uniform(-0.05, 0.05), gray + rng.uniform(-0.05, 0.05), gray + rng.uniform(-0.05, 0.05)};
  p.background_slope = rng.uniform(-0.15, 0.15);
  p.occluded = rng.bernoulli(spec.occlusion_prob);
  if (p.occluded) {
    p.occ_top = static_cast<std::size_t>(h * rng.uniform(0.35, 0.5));
    p.occ_bottom = static_cast<std::size_t>(h * rng.uniform(0.55, 0.75));
    p.occ_width = static_cast<std::size_t>(w * rng.uniform(0.15, 0.35));
    p.occ_left = rng.bernoulli(0.5);
    p.occ_color = detail::random_color(rng);
  }
  p.blurred = rng.bernoulli(spec.blur_prob);
  p.corrupted = rng.bernoulli(spec.corrupted_map_frac);
  p.noise_seed = rng.next();
  return p;
}

/// Renders the figure as layered labeled regions over a noisy background.
inline SyntheticImage render_image(const CorpusSpec& spec, const IdentitySignature& sig, const Color& gain,
                                   const ImageParams& p) {
  const std::size_t H = spec.image_h, W = spec.image_w;
  SyntheticImage img;
  img.height = H;
  img.width = W;
  img.params = p;
  img.camera = static_cast<int>(p.camera);
  img.background.assign(H * W * 3, 0.0);
  img.maps.parsing = GrayImage(H, W, 0);
  img.maps.segmentation = GrayImage(H, W, 0);
  Rng noise(p.noise_seed);

  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = p.background[c] + p.background_slope * (static_cast<double>(y) / H - 0.5) +
                         2.0 * spec.noise_std * noise.normal();
        img.background[(y * W + x) * 3 + c] = v;
      }
  img.rgb = img.background;

  const double top = p.figure_top, fh = p.figure_height, cx = p.center_x, bw = sig.body_width;
  auto paint = [&](std::size_t y, std::size_t x, const Color& col, std::uint8_t label) {
    for (std::size_t c = 0; c < 3; ++c)
      img.rgb[(y * W + x) * 3 + c] = col[c] * gain[c] * p.brightness + spec.noise_std * noise.normal();
    img.maps.parsing.at(y, x) = label;
    img.maps.segmentation.at(y, x) = 255;
  };

  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      const double v = (py - top) / fh;  // vertical position in figure units
      const double u = (px - cx) / fh;   // horizontal offset in figure units
      // Layers back to front; later layers overwrite earlier ones.
      if (sig.has_bag) {
        const double side = sig.bag_left ? -1.0 : 1.0;
        const double inner = 0.09 * bw, outer = 0.15 * bw;
        if (v >= 0.2 && v <= 0.45 && side * u >= inner && side * u <= outer) paint(y, x, sig.bag, kBackground);
      }
      for (int s = 0; s < 2; ++s) {
        const double side = s == 0 ? -1.0 : 1.0;
        const double hx = side * 0.045 * bw, hy = 0.52, len = 0.48;
        const double ex = hx + side * std::sin(p.leg_angle[s]) * len, ey = hy + std::cos(p.leg_angle[s]) * len;
        double t;
        if (detail::segment_distance(u, v, hx, hy, ex, ey, t) <= 0.042 * bw)
          paint(y, x, t > 0.92 ? sig.shoes : sig.pants, s == 0 ? kLeftLeg : kRightLeg);
      }
      if (v >= 0.13 && v <= 0.16 && std::abs(u) <= 0.025) paint(y, x, sig.skin, kBackground);
      if (v >= 0.15 && v <= 0.54 && std::abs(u) <= 0.1 * bw) {
        const bool stripe = sig.stripe_period > 0 && static_cast<long>(std::floor((v - 0.15) / sig.stripe_period)) % 2 == 1;
        paint(y, x, stripe ? sig.stripe : sig.shirt, kTorso);
      }
      for (int s = 0; s < 2; ++s) {
        const double side = s == 0 ? -1.0 : 1.0;
        const double sx = side * 0.115 * bw, sy = 0.17, len = 0.34;
        const double ex = sx + side * std::sin(p.arm_angle[s]) * len, ey = sy + std::cos(p.arm_angle[s]) * len;
        double t;
        if (detail::segment_distance(u, v, sx, sy, ex, ey, t) <= 0.03)
          paint(y, x, t <= sig.sleeve_frac ? sig.shirt : sig.skin, s == 0 ? kLeftArm : kRightArm);
      }
      const double du = u / (0.05 * bw), dv = (v - 0.075) / 0.07;
      if (du * du + dv * dv <= 1.0) paint(y, x, v < 0.06 ? sig.hair : sig.skin, kHead);
    }
  }

  img.figure_top = H;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (img.maps.segmentation.at(y, x)) {
        img.figure_top = std::min(img.figure_top, y);
        img.figure_bottom = y + 1;
      }

  if (p.occluded) {
    for (std::size_t y = p.occ_top; y < std::min(p.occ_bottom, H); ++y)
      for (std::size_t i = 0; i < std::min(p.occ_width, W); ++i) {
        const std::size_t x = p.occ_left ? i : W - 1 - i;
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = p.occ_color[c] + spec.noise_std * noise.normal();
          img.rgb[(y * W + x) * 3 + c] = v;
          img.background[(y * W + x) * 3 + c] = v;
        }
        img.maps.parsing.at(y, x) = kBackground;
        img.maps.segmentation.at(y, x) = 0;
      }
  }

  if (p.blurred) {
    auto box = [&](std::vector<double>& buf) {
      std::vector<double> out(buf.size());
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            double s = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += buf[(static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * 3 + c];
                ++n;
              }
            out[(y * W + x) * 3 + c] = s / n;
          }
      buf.swap(out);
    };
    box(img.rgb);
    box(img.background);
  }

  if (p.corrupted) std::fill(img.maps.parsing.pixels.begin(), img.maps.parsing.pixels.end(), std::uint8_t{0});
  return img;
}

/// Generator-side ground truth for one image.
struct ImageMeta {
  std::string path;
  int identity = 0;
  int camera = 0;
  double figure_top = 0.0;     // first rendered figure row
  double figure_bottom = 0.0;  // one past the last rendered figure row
  bool corrupted = false;
  bool occluded = false;
  bool blurred = false;

  /// ROI rows of the figure on a feature grid with `rows` rows.
  std::size_t roi_top(std::size_t rows, std::size_t image_h) const {
    return static_cast<std::size_t>(std::floor(figure_top * rows / image_h));
  }
  std::size_t roi_bottom(std::size_t rows, std::size_t image_h) const {
    return static_cast<std::size_t>(std::ceil(figure_bottom * rows / image_h)) - 1;
  }
};

inline std::string image_stem(std::size_t identity, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu_%03zu", identity, k);
  return buf;
}

/// Renders image `k` of `identity` exactly as `generate` does.
inline SyntheticImage synthesize(const CorpusSpec& spec, std::size_t identity, std::size_t k) {
  static thread_local std::map<std::uint64_t, std::pair<std::vector<IdentitySignature>, std::vector<Color>>> cache;
  const std::string key_text = spec.to_kv().dump();
  const auto key = std::hash<std::string>{}(key_text);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, std::make_pair(make_signatures(spec), camera_gains(spec))).first;
  const auto& [sigs, gains] = it->second;
  require(identity < sigs.size() && k < spec.images_per_identity, "synthesize: index out of range");
  const ImageParams p = sample_image_params(spec, identity * spec.images_per_identity + k);
  SyntheticImage img = render_image(spec, sigs[identity], gains[p.camera], p);
  img.identity = static_cast<int>(identity);
  return img;
}

struct CorpusSummary {
  std::size_t images = 0, identities = 0, corrupted = 0, occluded = 0, blurred = 0;
};

/// Writes images/*.ppm, maps/*_parse.pgm and *_seg.pgm, index.csv
/// (`path,identity,camera`), meta.csv (generator ground truth), labels.txt
/// and corpus.cfg under `out`.
inline CorpusSummary generate(const CorpusSpec& spec, const std::filesystem::path& out) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  if (ec) throw IoError("cannot create " + (out / "images").string() + ": " + ec.message());
  fs::create_directories(out / "maps", ec);
  if (ec) throw IoError("cannot create " + (out / "maps").string() + ": " + ec.message());

  std::string index, meta = "path,identity,camera,figure_top,figure_bottom,corrupted,occluded,blurred\n";
  CorpusSummary summary;
  summary.identities = spec.num_identities;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
      const SyntheticImage img = synthesize(spec, id, k);
      const std::string stem = image_stem(id, k);
      const std::string rel = "images/" + stem + ".ppm";
      write_ppm(out / rel, img.to_rgb8());
      write_pgm(out / "maps" / (stem + "_parse.pgm"), img.maps.parsing);
      write_pgm(out / "maps" / (stem + "_seg.pgm"), img.maps.segmentation);
      index += rel + "," + std::to_string(id) + "," + std::to_string(img.camera) + "\n";
      const double ftop = static_cast<double>(img.figure_top);
      const double fbot = static_cast<double>(img.figure_bottom);
      meta += rel + "," + std::to_string(id) + "," + std::to_string(img.camera) + "," + format_double(ftop) + "," +
              format_double(fbot) + "," + (img.params.corrupted ? "1" : "0") + "," +
              (img.params.occluded ? "1" : "0") + "," + (img.params.blurred ? "1" : "0") + "\n";
      ++summary.images;
      summary.corrupted += img.params.corrupted;
      summary.occluded += img.params.occluded;
      summary.blurred += img.params.blurred;
    }
  }
  detail::write_file(out / "index.csv", index);
  detail::write_file(out / "meta.csv", meta);
  detail::write_file(out / "labels.txt", label_table_text());
  detail::write_file(out / "corpus.cfg", spec.to_kv().dump());
  return summary;
}

/// Reads meta.csv back.
inline std::vector<ImageMeta> load_meta(const std::filesystem::path& corpus_dir) {
  std::ifstream in(corpus_dir / "meta.csv");
  if (!in) throw IoError("cannot open " + (corpus_dir / "meta.csv").string());
  std::vector<ImageMeta> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[8];
    for (auto& x : f) std::getline(ss, x, ',');
    ImageMeta m;
    m.path = f[0];
    m.identity = std::stoi(f[1]);
    m.camera = std::stoi(f[2]);
    m.figure_top = std::stod(f[3]);
    m.figure_bottom = std::stod(f[4]);
    m.corrupted = f[5] == "1";
    m.occluded = f[6] == "1";
    m.blurred = f[7] == "1";
    out.push_back(m);
  }
  return out;
}

}  // namespace mpn
