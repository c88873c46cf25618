#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpn/error.hpp"

namespace mpn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool recorded = false;  // produced by an op on a tape
};

}  // namespace detail

/// Dense row-major tensor of doubles.
///
/// A Tensor is a handle: copies share storage, which is how parameters are
/// aliased between heads. Values produced by ops are never modified after
/// creation; only parameters are updated in place by the optimizer.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    require(shape_numel(shape) == data.size(),
            "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Writable view for initialization and optimizer updates.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return !impl_->recorded; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first use.
  std::span<double> grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
  void clear_grad() { impl_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Value copy that does not participate in differentiation.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Constructing a Tape makes it the current tape of the calling thread until
/// it is destroyed; ops executed meanwhile on inputs that require gradients
/// append an entry. Without a current tape ops run in inference mode.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  Tape() : previous_(current_ref()) { current_ref() = this; }
  ~Tape() { current_ref() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ref(); }

  void record(const Tensor& output, BackwardFn fn) {
    output.impl()->recorded = true;
    entries_.push_back({output, std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Reverse replay from a scalar loss. Gradients of leaves accumulate across
  /// calls; intermediate gradients are reset at the start of each call.
  void backward(const Tensor& loss) {
    require(loss.defined() && loss.numel() == 1,
            "backward requires a scalar loss, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    const auto it = std::find_if(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.output.same_storage(loss); });
    require(it != entries_.end(), "backward: loss was not recorded on this tape");
    for (auto& e : entries_) {
      e.output.grad_buffer();
      e.output.zero_grad();
    }
    Tensor seed = loss;
    seed.grad_buffer()[0] = 1.0;
    const auto last = static_cast<std::size_t>(it - entries_.begin());
    for (std::size_t i = last + 1; i-- > 0;) {
      Entry& e = entries_[i];
      const auto g = e.output.grad();
      if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
      e.backward(g);
    }
  }

 private:
  struct Entry {
    Tensor output;
    BackwardFn backward;
  };

  static Tape*& current_ref() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  friend class NoGradScope;

  std::vector<Entry> entries_;
  Tape* previous_;
};

/// Suspends recording on the calling thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope() : saved_(Tape::current_ref()) { Tape::current_ref() = nullptr; }
  ~NoGradScope() { Tape::current_ref() = saved_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

/// Backward pass on the current thread's tape.
inline void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  require(tape != nullptr, "backward called without an active tape");
  tape->backward(loss);
}

namespace detail {

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->defined() && t->requires_grad(); });
}

/// Marks `out` as differentiable and records its backward rule.
inline void record(Tensor& out, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  Tape::current()->record(out, std::move(fn));
}

/// Gradient sink for an input, or an empty span when it needs none.
inline std::span<double> sink(Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.grad_buffer();
}

}  // namespace detail

}  // namespace mpn
