#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mpn/error.hpp"
#include "mpn/parallel.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap mmap(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dfdx) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor y(a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tensor in = a;
    Tensor res = y;
    record(y, [in, res, dfdx](std::span<const double> g) mutable {
      auto ga = sink(in);
      const auto x = in.data();
      const auto r = res.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * dfdx(x[i], r[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y(a.shape(), std::move(out));
  if (detail::needs_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    detail::record(y, [ta, tb](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      auto gb = detail::sink(tb);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y(a.shape(), std::move(out));
  if (detail::needs_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    detail::record(y, [ta, tb](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      auto gb = detail::sink(tb);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y(a.shape(), std::move(out));
  if (detail::needs_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    detail::record(y, [ta, tb](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * tb[i];
      auto gb = detail::sink(tb);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ta[i];
    });
  }
  return y;
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Multiplies every channel of an N×C×H×W map by a constant per-image
/// spatial mask given as N×H×W values.
inline Tensor apply_spatial_mask(const Tensor& x, std::span<const double> mask) {
  require(x.rank() == 4, "apply_spatial_mask: expected NCHW input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(mask.size() == n * hw, "apply_spatial_mask: mask has " + std::to_string(mask.size()) +
                                     " values, expected " + std::to_string(n * hw));
  std::vector<double> m(mask.begin(), mask.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        out[(i * c + ch) * hw + p] = x[(i * c + ch) * hw + p] * m[i * hw + p];
  Tensor y(x.shape(), std::move(out));
  if (detail::needs_grad({&x})) {
    Tensor tx = x;
    detail::record(y, [tx, m = std::move(m), n, c, hw](std::span<const double> g) mutable {
      auto gx = detail::sink(tx);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p)
            gx[(i * c + ch) * hw + p] += g[(i * c + ch) * hw + p] * m[i * hw + p];
    });
  }
  return y;
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (detail::needs_grad({&a})) {
    Tensor ta = a;
    detail::record(y, [ta](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (double& v : ga) v += g[0];
    });
  }
  return y;
}

inline Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum over the last axis of a 2-D tensor: [m, n] -> [m].
inline Tensor row_sum(const Tensor& a) {
  require(a.rank() == 2, "row_sum: expected 2-D input, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j];
  Tensor y({m}, std::move(out));
  if (detail::needs_grad({&a})) {
    Tensor ta = a;
    detail::record(y, [ta, m, n](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
    });
  }
  return y;
}

/// Elements at the given flat indices, as a 1-D tensor.
inline Tensor gather(const Tensor& a, std::span<const std::size_t> flat_indices) {
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < a.numel(), "gather: index " + std::to_string(idx[i]) + " out of range for " +
                                    shape_str(a.shape()));
    out[i] = a[idx[i]];
  }
  Tensor y({idx.size()}, std::move(out));
  if (detail::needs_grad({&a})) {
    Tensor ta = a;
    detail::record(y, [ta, idx = std::move(idx)](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
    });
  }
  return y;
}

// --------------------------------------------------------------- restructuring

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor y(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (detail::needs_grad({&a})) {
    Tensor ta = a;
    detail::record(y, [ta](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

inline Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                                          shape_str(first));
    for (std::size_t d = 0; d < first.size(); ++d)
      require(d == axis || p.dim(d) == first[d],
              "concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Shape shape = first;
  shape[axis] = total;
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset * inner));
    offset += p.dim(axis);
  }
  Tensor y(std::move(shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || detail::needs_grad({&p});
  if (any) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    detail::record(y, [ins, offsets, outer, inner, total, axis](std::span<const double> g) mutable {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        auto gp = detail::sink(ins[k]);
        if (gp.empty()) continue;
        const std::size_t block = ins[k].dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < block; ++j)
            gp[o * block + j] += g[o * total * inner + offsets[k] * inner + j];
      }
    });
  }
  return y;
}

inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank(), "slice: axis out of range for " + shape_str(a.shape()));
  require(begin < end && end <= a.dim(axis),
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") invalid for extent " + std::to_string(a.dim(axis)));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t extent = a.dim(axis), len = end - begin;
  Shape shape = a.shape();
  shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>((o * extent + begin) * inner),
                len * inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  Tensor y(std::move(shape), std::move(out));
  if (detail::needs_grad({&a})) {
    Tensor ta = a;
    detail::record(y, [ta, outer, inner, extent, begin, len](std::span<const double> g) mutable {
      auto ga = detail::sink(ta);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len * inner; ++j)
          ga[(o * extent + begin) * inner + j] += g[o * len * inner + j];
    });
  }
  return y;
}

// ---------------------------------------------------------------- linear algebra

/// [m, k] x [k, n] -> [m, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::mmap(out.data(), m, n).noalias() =
      detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  Tensor y({m, n}, std::move(out));
  if (detail::needs_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    detail::record(y, [ta, tb, m, k, n](std::span<const double> g) mutable {
      const auto gm = detail::cmap(g.data(), m, n);
      auto ga = detail::sink(ta);
      if (!ga.empty())
        detail::mmap(ga.data(), m, k).noalias() += gm * detail::cmap(tb.data().data(), k, n).transpose();
      auto gb = detail::sink(tb);
      if (!gb.empty())
        detail::mmap(gb.data(), k, n).noalias() += detail::cmap(ta.data().data(), m, k).transpose() * gm;
    });
  }
  return y;
}

/// Fully connected layer: x [N, D], weight [O, D], bias [O] -> [N, O].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
              shape_str(weight.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), o = weight.dim(0);
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == o),
          "linear: bias shape " + (bias.defined() ? shape_str(bias.shape()) : std::string()) +
              " does not match " + std::to_string(o) + " outputs");
  std::vector<double> out(n * o);
  auto om = detail::mmap(out.data(), n, o);
  om.noalias() = detail::cmap(x.data().data(), n, d) * detail::cmap(weight.data().data(), o, d).transpose();
  if (bias.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < o; ++j) out[i * o + j] += bias[j];
  Tensor y({n, o}, std::move(out));
  if (detail::needs_grad({&x, &weight, &bias})) {
    Tensor tx = x, tw = weight, tb = bias;
    detail::record(y, [tx, tw, tb, n, d, o](std::span<const double> g) mutable {
      const auto gm = detail::cmap(g.data(), n, o);
      auto gx = detail::sink(tx);
      if (!gx.empty())
        detail::mmap(gx.data(), n, d).noalias() += gm * detail::cmap(tw.data().data(), o, d);
      auto gw = detail::sink(tw);
      if (!gw.empty())
        detail::mmap(gw.data(), o, d).noalias() += gm.transpose() * detail::cmap(tx.data().data(), n, d);
      auto gb = detail::sink(tb);
      if (!gb.empty())
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
    });
  }
  return y;
}

// ------------------------------------------------------------------ convolution

struct Conv2dParams {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow;
  Conv2dParams p;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_plane() const { return oh * ow; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && p.stride_h == 1 && p.stride_w == 1 && p.pad_h == 0 && p.pad_w == 0;
  }
};

inline void im2col(const ConvGeometry& g, const double* img, double* col) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((ch * g.kh + ky) * g.kw + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.p.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.p.pad_h);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.p.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.p.pad_w);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] =
                inside ? img[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

inline void col2im(const ConvGeometry& g, const double* col, double* img) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((ch * g.kh + ky) * g.kw + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.p.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.p.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.p.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.p.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.ow + ox];
          }
        }
      }
}

// Weight gradients are summed per fixed-size chunk of images and the chunks
// are reduced in order, so results do not depend on MPN_THREADS.
inline constexpr std::size_t kConvChunk = 8;

}  // namespace detail

/// 2-D cross-correlation. input [N, C, H, W], weight [O, C, kh, kw], bias [O]
/// (optional). Output extent per axis: floor((H + 2p - kh) / s) + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
                     Conv2dParams params = {}) {
  require(input.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be OCkhkw, got " + shape_str(weight.shape()));
  require(input.dim(1) == weight.dim(1), "conv2d: input channels " + std::to_string(input.dim(1)) +
                                             " != weight channels " + std::to_string(weight.dim(1)) +
                                             " (input " + shape_str(input.shape()) + ", weight " +
                                             shape_str(weight.shape()) + ")");
  require(params.stride_h > 0 && params.stride_w > 0, "conv2d: stride must be positive");
  require(input.dim(2) + 2 * params.pad_h >= weight.dim(2) &&
              input.dim(3) + 2 * params.pad_w >= weight.dim(3),
          "conv2d: kernel " + shape_str(weight.shape()) + " does not fit padded input " +
              shape_str(input.shape()));
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == weight.dim(0)),
          "conv2d: bias must have " + std::to_string(weight.dim(0)) + " elements");

  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                         weight.dim(2), weight.dim(3), 0, 0, params};
  g.oh = (g.h + 2 * params.pad_h - g.kh) / params.stride_h + 1;
  g.ow = (g.w + 2 * params.pad_w - g.kw) / params.stride_w + 1;

  const std::size_t in_img = g.c * g.h * g.w, out_img = g.o * g.out_plane();
  std::vector<double> out(g.n * out_img);
  const auto wm = detail::cmap(weight.data().data(), g.o, g.patch());
  parallel_for(g.n, [&](std::size_t i) {
    const double* img = input.data().data() + i * in_img;
    auto om = detail::mmap(out.data() + i * out_img, g.o, g.out_plane());
    if (g.pointwise()) {
      om.noalias() = wm * detail::cmap(img, g.c, g.out_plane());
    } else {
      std::vector<double> col(g.patch() * g.out_plane());
      detail::im2col(g, img, col.data());
      om.noalias() = wm * detail::cmap(col.data(), g.patch(), g.out_plane());
    }
    if (bias.defined())
      for (std::size_t oc = 0; oc < g.o; ++oc) om.row(static_cast<Eigen::Index>(oc)).array() += bias[oc];
  });
  Tensor y({g.n, g.o, g.oh, g.ow}, std::move(out));

  if (detail::needs_grad({&input, &weight, &bias})) {
    Tensor tx = input, tw = weight, tb = bias;
    detail::record(y, [tx, tw, tb, g, in_img, out_img](std::span<const double> grad) mutable {
      auto gx = detail::sink(tx);
      auto gw = detail::sink(tw);
      auto gb = detail::sink(tb);
      const auto wm = detail::cmap(tw.data().data(), g.o, g.patch());
      const std::size_t chunks = (g.n + detail::kConvChunk - 1) / detail::kConvChunk;
      std::vector<std::vector<double>> partial_w(gw.empty() ? 0 : chunks);
      parallel_for(chunks, [&](std::size_t ck) {
        std::vector<double> col(g.pointwise() ? 0 : g.patch() * g.out_plane());
        std::vector<double> gcol(col.size());
        if (!gw.empty()) partial_w[ck].assign(g.o * g.patch(), 0.0);
        const std::size_t end = std::min(g.n, (ck + 1) * detail::kConvChunk);
        for (std::size_t i = ck * detail::kConvChunk; i < end; ++i) {
          const double* img = tx.data().data() + i * in_img;
          const auto go = detail::cmap(grad.data() + i * out_img, g.o, g.out_plane());
          if (!gw.empty()) {
            auto pw = detail::mmap(partial_w[ck].data(), g.o, g.patch());
            if (g.pointwise()) {
              pw.noalias() += go * detail::cmap(img, g.c, g.out_plane()).transpose();
            } else {
              detail::im2col(g, img, col.data());
              pw.noalias() += go * detail::cmap(col.data(), g.patch(), g.out_plane()).transpose();
            }
          }
          if (!gx.empty()) {
            if (g.pointwise()) {
              detail::mmap(gx.data() + i * in_img, g.c, g.out_plane()).noalias() += wm.transpose() * go;
            } else {
              detail::mmap(gcol.data(), g.patch(), g.out_plane()).noalias() = wm.transpose() * go;
              detail::col2im(g, gcol.data(), gx.data() + i * in_img);
            }
          }
        }
      });
      for (const auto& pw : partial_w)
        for (std::size_t j = 0; j < pw.size(); ++j) gw[j] += pw[j];
      if (!gb.empty())
        for (std::size_t i = 0; i < g.n; ++i)
          for (std::size_t oc = 0; oc < g.o; ++oc) {
            const double* row = grad.data() + i * out_img + oc * g.out_plane();
            double s = 0.0;
            for (std::size_t p = 0; p < g.out_plane(); ++p) s += row[p];
            gb[oc] += s;
          }
    });
  }
  return y;
}

// ---------------------------------------------------------- batch normalization

enum class Mode { train, eval };

/// Running statistics and hyperparameters of one batch-norm layer.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Per-channel normalization of [N, C] or [N, C, H, W] inputs. In train mode
/// batch statistics are used and, when `update_running` is set, folded into
/// the running estimates (unbiased variance); eval mode uses the running
/// estimates.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BatchNormStats& stats, Mode mode, bool update_running = true) {
  require(x.rank() == 2 || x.rank() == 4,
          "batchnorm: expected [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  require(gamma.numel() == c && beta.numel() == c && stats.running_mean.size() == c &&
              stats.running_var.size() == c,
          "batchnorm: parameters do not match " + std::to_string(c) + " channels");
  const std::size_t count = n * plane;
  require(count > 0, "batchnorm: empty input");

  std::vector<double> mu(c), invstd(c), xhat(x.numel()), out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) s += x[(i * c + ch) * plane + p];
      m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = x[(i * c + ch) * plane + p] - m;
          ss += d * d;
        }
      var = ss / static_cast<double>(count);
      if (update_running) {
        const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
        stats.running_mean[ch] = (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
        stats.running_var[ch] = (1.0 - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
      }
    } else {
      m = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    mu[ch] = m;
    invstd[ch] = 1.0 / std::sqrt(var + stats.eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (i * c + ch) * plane + p;
        xhat[idx] = (x[idx] - m) * invstd[ch];
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  }
  Tensor y(x.shape(), std::move(out));
  if (detail::needs_grad({&x, &gamma, &beta})) {
    Tensor tx = x, tg = gamma, tb = beta;
    detail::record(y, [tx, tg, tb, xhat = std::move(xhat), invstd = std::move(invstd), mode, n, c,
                       plane, count](std::span<const double> g) mutable {
      auto gx = detail::sink(tx);
      auto gg = detail::sink(tg);
      auto gb = detail::sink(tb);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t idx = (i * c + ch) * plane + p;
            sum_g += g[idx];
            sum_gx += g[idx] * xhat[idx];
          }
        if (!gg.empty()) gg[ch] += sum_gx;
        if (!gb.empty()) gb[ch] += sum_g;
        if (gx.empty()) continue;
        const double k = tg[ch] * invstd[ch];
        const double m = static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t idx = (i * c + ch) * plane + p;
            if (mode == Mode::train)
              gx[idx] += k / m * (m * g[idx] - sum_g - xhat[idx] * sum_gx);
            else
              gx[idx] += k * g[idx];
          }
      }
    });
  }
  return y;
}

// ----------------------------------------------------------------- pooling/resize

/// Per-channel spatial maximum: [N, C, H, W] -> [N, C]. The gradient goes to
/// the first maximal position in scan order.
inline Tensor global_max_pool(const Tensor& x) {
  require(x.rank() == 4 && x.dim(2) >= 1 && x.dim(3) >= 1,
          "global_max_pool: expected NCHW with H,W >= 1, got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> out(nc);
  std::vector<std::size_t> arg(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    const double* p = x.data().data() + i * plane;
    std::size_t best = 0;
    for (std::size_t j = 1; j < plane; ++j)
      if (p[j] > p[best]) best = j;
    arg[i] = i * plane + best;
    out[i] = p[best];
  }
  Tensor y({x.dim(0), x.dim(1)}, std::move(out));
  if (detail::needs_grad({&x})) {
    Tensor tx = x;
    detail::record(y, [tx, arg = std::move(arg)](std::span<const double> g) mutable {
      auto gx = detail::sink(tx);
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    });
  }
  return y;
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Align-corners-false sampling: source = (dst + 0.5) * in / out - 0.5,
// clamped at the lower border.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of every channel of [N, C, H, W] to [N, C, out_h, out_w].
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(x.rank() == 4, "bilinear_resize: expected NCHW, got " + shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be >= 1");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::lerp_taps(h, out_h);
  const auto tx = detail::lerp_taps(w, out_w);
  std::vector<double> out(nc * out_h * out_w);
  for (std::size_t i = 0; i < nc; ++i) {
    const double* src = x.data().data() + i * h * w;
    double* dst = out.data() + i * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = (1 - b.w1) * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1];
        const double bot = (1 - b.w1) * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1];
        dst[oy * out_w + ox] = (1 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  Tensor y({x.dim(0), x.dim(1), out_h, out_w}, std::move(out));
  if (detail::needs_grad({&x})) {
    Tensor tin = x;
    detail::record(y, [tin, ty, tx, nc, h, w, out_h, out_w](std::span<const double> g) mutable {
      auto gx = detail::sink(tin);
      for (std::size_t i = 0; i < nc; ++i) {
        double* dst = gx.data() + i * h * w;
        const double* src = g.data() + i * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const double v = src[oy * out_w + ox];
            dst[a.i0 * w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
            dst[a.i0 * w + b.i1] += v * (1 - a.w1) * b.w1;
            dst[a.i1 * w + b.i0] += v * a.w1 * (1 - b.w1);
            dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
          }
        }
      }
    });
  }
  return y;
}

// ----------------------------------------------------------------------- losses

/// Mean over rows of -log softmax(logits)[label], max-subtracted.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "softmax_cross_entropy: expected [N,C] logits, got " +
                                  shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(labels.size() == n, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(n) + " rows");
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab)
    require(l >= 0 && static_cast<std::size_t>(l) < c,
            "softmax_cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
  std::vector<double> prob(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * c;
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(z[j] - lse);
    total += lse - z[lab[i]];
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(n));
  if (detail::needs_grad({&logits})) {
    Tensor tl = logits;
    detail::record(y, [tl, prob = std::move(prob), lab = std::move(lab), n, c](std::span<const double> g) mutable {
      auto gl = detail::sink(tl);
      const double k = g[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
          gl[i * c + j] += k * (prob[i * c + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
    });
  }
  return y;
}

/// Default epsilon added to cosine denominators.
inline constexpr double kCosineEps = 1e-12;

/// d_ij = 1 - <x_i, y_j> / (|x_i| |y_j| + eps) for x [N, D], y [M, D] -> [N, M].
inline Tensor pairwise_cosine_distance(const Tensor& x, const Tensor& y, double eps = kCosineEps) {
  require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1),
          "pairwise_cosine_distance: incompatible shapes " + shape_str(x.shape()) + ", " +
              shape_str(y.shape()));
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
  const auto xm = detail::cmap(x.data().data(), n, d);
  const auto ym = detail::cmap(y.data().data(), m, d);
  std::vector<double> nx(n), ny(m), dot(n * m), q(n * m), out(n * m);
  for (std::size_t i = 0; i < n; ++i) nx[i] = xm.row(static_cast<Eigen::Index>(i)).norm();
  for (std::size_t j = 0; j < m; ++j) ny[j] = ym.row(static_cast<Eigen::Index>(j)).norm();
  detail::mmap(dot.data(), n, m).noalias() = xm * ym.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      q[i * m + j] = nx[i] * ny[j] + eps;
      out[i * m + j] = 1.0 - dot[i * m + j] / q[i * m + j];
    }
  Tensor result({n, m}, std::move(out));
  if (detail::needs_grad({&x, &y})) {
    Tensor tx = x, ty = y;
    detail::record(result, [tx, ty, nx, ny, dot, q, n, m, d](std::span<const double> g) mutable {
      // d(out)/d(dot) = -1/q ; d(out)/dq = dot/q^2 ; dq/dx_i = |y_j| x_i/|x_i|
      std::vector<double> a(n * m), rx(n, 0.0), ry(m, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t k = i * m + j;
          a[k] = -g[k] / q[k];
          const double b = g[k] * dot[k] / (q[k] * q[k]);
          rx[i] += b * ny[j];
          ry[j] += b * nx[i];
        }
      const auto am = detail::cmap(a.data(), n, m);
      auto gx = detail::sink(tx);
      if (!gx.empty()) {
        auto gm = detail::mmap(gx.data(), n, d);
        gm.noalias() += am * detail::cmap(ty.data().data(), m, d);
        for (std::size_t i = 0; i < n; ++i)
          if (nx[i] > 0.0)
            for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += rx[i] * tx[i * d + c] / nx[i];
      }
      auto gy = detail::sink(ty);
      if (!gy.empty()) {
        auto gm = detail::mmap(gy.data(), m, d);
        gm.noalias() += am.transpose() * detail::cmap(tx.data().data(), n, d);
        for (std::size_t j = 0; j < m; ++j)
          if (ny[j] > 0.0)
            for (std::size_t c = 0; c < d; ++c) gy[j * d + c] += ry[j] * ty[j * d + c] / ny[j];
      }
    });
  }
  return result;
}

/// d_i = 1 - <x_i, y_i> / (|x_i| |y_i| + eps) for x, y [N, D] -> [N].
inline Tensor rowwise_cosine_distance(const Tensor& x, const Tensor& y, double eps = kCosineEps) {
  require(x.rank() == 2 && x.shape() == y.shape(),
          "rowwise_cosine_distance: incompatible shapes " + shape_str(x.shape()) + ", " +
              shape_str(y.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> nx(n), ny(n), dot(n), q(n), out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sx = 0, sy = 0, sd = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double a = x[i * d + c], b = y[i * d + c];
      sx += a * a;
      sy += b * b;
      sd += a * b;
    }
    nx[i] = std::sqrt(sx);
    ny[i] = std::sqrt(sy);
    dot[i] = sd;
    q[i] = nx[i] * ny[i] + eps;
    out[i] = 1.0 - sd / q[i];
  }
  Tensor result({n}, std::move(out));
  if (detail::needs_grad({&x, &y})) {
    Tensor tx = x, ty = y;
    detail::record(result, [tx, ty, nx, ny, dot, q, n, d](std::span<const double> g) mutable {
      auto gx = detail::sink(tx);
      auto gy = detail::sink(ty);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = -g[i] / q[i];
        const double b = g[i] * dot[i] / (q[i] * q[i]);
        for (std::size_t c = 0; c < d; ++c) {
          const double xv = tx[i * d + c], yv = ty[i * d + c];
          if (!gx.empty()) gx[i * d + c] += a * yv + (nx[i] > 0 ? b * ny[i] * xv / nx[i] : 0.0);
          if (!gy.empty()) gy[i * d + c] += a * xv + (ny[i] > 0 ? b * nx[i] * yv / ny[i] : 0.0);
        }
      }
    });
  }
  return result;
}

}  // namespace mpn
