#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mpn/ops.hpp"
#include "mpn/rng.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]" of the largest error
  bool passed = true;
};

struct GradCheckOptions {
  double tol = 1e-4;
  double step = 1e-5;
  // Denominator floor: errors on gradients smaller than this are measured
  // relative to the floor, since central differences carry ~eps/step
  // absolute rounding error.
  double floor = 1e-5;
  std::size_t max_elements_per_param = static_cast<std::size_t>(-1);
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Compares tape gradients of `loss_fn` against central finite differences
/// for every element of every listed tensor. `loss_fn` must recompute the
/// loss from the current tensor values.
inline GradCheckResult gradcheck(const std::string& name, const std::function<Tensor()>& loss_fn,
                                 NamedTensors params, const GradCheckOptions& options = {}) {
  for (auto& [_, p] : params) p.clear_grad();
  {
    Tape tape;
    const Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult result;
  result.name = name;
  for (auto& [pname, p] : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.numel(), 0.0);
    auto values = p.mutable_data();
    const std::size_t limit = std::min(values.size(), options.max_elements_per_param);
    for (std::size_t i = 0; i < limit; ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = loss_fn().item();
      values[i] = saved - options.step;
      const double minus = loss_fn().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (!(err <= result.max_rel_error)) {
        result.max_rel_error = err;
        result.worst = pname + "[" + std::to_string(i) + "]";
      }
    }
    p.clear_grad();
  }
  result.passed = result.max_rel_error < options.tol;
  return result;
}

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), true);
}

// Values bounded away from zero so relu kinks are never straddled.
inline Tensor random_away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

// Contracts an op output with fixed random weights so every output element
// influences the scalar under test.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

// x^2 whose backward claims 3x: a known-bad rule for checker self-tests.
inline Tensor faulty_square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 3.0 * x; });
}

}  // namespace detail

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(const GradCheckOptions&)> run;
};

/// One finite-difference case per differentiable op, at random points.
inline std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed = 7) {
  using detail::random_away_from_zero;
  using detail::random_tensor;
  using detail::weighted_sum;
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult(const GradCheckOptions&, Rng&)> body) {
    const std::uint64_t s = seed + cases.size();
    cases.push_back({name, [body, s](const GradCheckOptions& o) {
                       Rng rng(s);
                       return body(o, rng);
                     }});
  };
  auto binary = [&](std::string name, Tensor (*op)(const Tensor&, const Tensor&)) {
    add_case(name, [name, op](const GradCheckOptions& o, Rng& rng) {
      Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
      return gradcheck(name, [&] { return weighted_sum(op(a, b), 1); }, {{"a", a}, {"b", b}}, o);
    });
  };
  binary("add", &add);
  binary("sub", &sub);
  binary("mul", &mul);
  add_case("scale", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {5});
    return gradcheck("scale", [&] { return weighted_sum(scale(a, -1.7), 2); }, {{"a", a}}, o);
  });
  add_case("add_scalar", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {5});
    return gradcheck("add_scalar", [&] { return weighted_sum(add_scalar(a, 0.3), 2); }, {{"a", a}}, o);
  });
  add_case("relu", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_away_from_zero(rng, {2, 6});
    return gradcheck("relu", [&] { return weighted_sum(relu(a), 3); }, {{"a", a}}, o);
  });
  add_case("sigmoid", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {2, 6}, -3, 3);
    return gradcheck("sigmoid", [&] { return weighted_sum(sigmoid(a), 3); }, {{"a", a}}, o);
  });
  add_case("apply_spatial_mask", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {2, 3, 4, 2});
    std::vector<double> m(2 * 4 * 2);
    for (auto& v : m) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
    return gradcheck("apply_spatial_mask", [&] { return weighted_sum(apply_spatial_mask(a, m), 4); },
                     {{"a", a}}, o);
  });
  add_case("sum_mean", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {3, 3});
    return gradcheck("sum_mean", [&] { return add(sum(mul(a, a)), mean(a)); }, {{"a", a}}, o);
  });
  add_case("row_sum", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {3, 5});
    return gradcheck("row_sum", [&] { return weighted_sum(row_sum(a), 5); }, {{"a", a}}, o);
  });
  add_case("gather", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {4, 4});
    const std::vector<std::size_t> idx{0, 5, 5, 15, 7};
    return gradcheck("gather", [&] { return weighted_sum(gather(a, idx), 6); }, {{"a", a}}, o);
  });
  add_case("reshape", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {2, 6});
    return gradcheck("reshape", [&] { return weighted_sum(reshape(a, {3, 4}), 7); }, {{"a", a}}, o);
  });
  add_case("concat_slice", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {2, 3, 2}), b = random_tensor(rng, {2, 1, 2});
    return gradcheck("concat_slice",
                     [&] { return weighted_sum(slice(concat({a, b}, 1), 1, 1, 4), 8); },
                     {{"a", a}, {"b", b}}, o);
  });
  add_case("matmul", [](const GradCheckOptions& o, Rng& rng) {
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
    return gradcheck("matmul", [&] { return weighted_sum(matmul(a, b), 9); }, {{"a", a}, {"b", b}}, o);
  });
  add_case("linear", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {5, 4}), b = random_tensor(rng, {5});
    return gradcheck("linear", [&] { return weighted_sum(linear(x, w, b), 10); },
                     {{"x", x}, {"w", w}, {"b", b}}, o);
  });
  add_case("conv2d_3x3_s2_p1", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {2, 3, 5, 4}), w = random_tensor(rng, {4, 3, 3, 3}),
           b = random_tensor(rng, {4});
    return gradcheck("conv2d_3x3_s2_p1",
                     [&] { return weighted_sum(conv2d(x, w, b, {2, 2, 1, 1}), 11); },
                     {{"x", x}, {"w", w}, {"b", b}}, o);
  });
  add_case("conv2d_1x1", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {2, 3, 3, 2}), w = random_tensor(rng, {4, 3, 1, 1}),
           b = random_tensor(rng, {4});
    return gradcheck("conv2d_1x1", [&] { return weighted_sum(conv2d(x, w, b), 12); },
                     {{"x", x}, {"w", w}, {"b", b}}, o);
  });
  add_case("batchnorm_train_nchw", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {3, 2, 2, 2}), g = random_tensor(rng, {2}), b = random_tensor(rng, {2});
    BatchNormStats stats(2);
    return gradcheck("batchnorm_train_nchw",
                     [&] { return weighted_sum(batchnorm(x, g, b, stats, Mode::train), 13); },
                     {{"x", x}, {"gamma", g}, {"beta", b}}, o);
  });
  add_case("batchnorm_train_nc", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {4, 3}), g = random_tensor(rng, {3}), b = random_tensor(rng, {3});
    BatchNormStats stats(3);
    return gradcheck("batchnorm_train_nc",
                     [&] { return weighted_sum(batchnorm(x, g, b, stats, Mode::train), 14); },
                     {{"x", x}, {"gamma", g}, {"beta", b}}, o);
  });
  add_case("batchnorm_eval", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {4, 3}), g = random_tensor(rng, {3}), b = random_tensor(rng, {3});
    BatchNormStats stats(3);
    stats.running_mean = {0.1, -0.2, 0.3};
    stats.running_var = {0.5, 1.5, 2.0};
    return gradcheck("batchnorm_eval",
                     [&] { return weighted_sum(batchnorm(x, g, b, stats, Mode::eval), 15); },
                     {{"x", x}, {"gamma", g}, {"beta", b}}, o);
  });
  add_case("global_max_pool", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {2, 3, 3, 2});
    return gradcheck("global_max_pool", [&] { return weighted_sum(global_max_pool(x), 16); },
                     {{"x", x}}, o);
  });
  add_case("bilinear_resize_up", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {1, 2, 3, 2});
    return gradcheck("bilinear_resize_up", [&] { return weighted_sum(bilinear_resize(x, 7, 5), 17); },
                     {{"x", x}}, o);
  });
  add_case("bilinear_resize_down", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {2, 1, 6, 5});
    return gradcheck("bilinear_resize_down",
                     [&] { return weighted_sum(bilinear_resize(x, 4, 2), 18); }, {{"x", x}}, o);
  });
  add_case("softmax_cross_entropy", [](const GradCheckOptions& o, Rng& rng) {
    Tensor z = random_tensor(rng, {4, 5}, -2, 2);
    const std::vector<int> labels{0, 3, 4, 1};
    return gradcheck("softmax_cross_entropy", [&] { return softmax_cross_entropy(z, labels); },
                     {{"logits", z}}, o);
  });
  add_case("pairwise_cosine_distance", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {3, 4}), y = random_tensor(rng, {2, 4});
    return gradcheck("pairwise_cosine_distance",
                     [&] { return weighted_sum(pairwise_cosine_distance(x, y), 19); },
                     {{"x", x}, {"y", y}}, o);
  });
  add_case("pairwise_cosine_distance_self", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {3, 4});
    return gradcheck("pairwise_cosine_distance_self",
                     [&] { return weighted_sum(pairwise_cosine_distance(x, x), 20); }, {{"x", x}}, o);
  });
  add_case("rowwise_cosine_distance", [](const GradCheckOptions& o, Rng& rng) {
    Tensor x = random_tensor(rng, {3, 4}), y = random_tensor(rng, {3, 4});
    return gradcheck("rowwise_cosine_distance",
                     [&] { return weighted_sum(rowwise_cosine_distance(x, y), 21); },
                     {{"x", x}, {"y", y}}, o);
  });
  return cases;
}

/// A case whose backward rule is deliberately wrong; the checker must fail it.
inline GradCheckCase faulty_gradcheck_case() {
  return {"faulty_square", [](const GradCheckOptions& o) {
            Rng rng(99);
            Tensor a = detail::random_away_from_zero(rng, {4});
            return gradcheck("faulty_square", [&] { return sum(detail::faulty_square(a)); }, {{"a", a}}, o);
          }};
}

}  // namespace mpn
