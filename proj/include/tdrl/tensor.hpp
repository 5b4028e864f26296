#pragma once

// Dense row-major tensor with reverse-mode differentiation.
//
// A tensor is a shared handle to storage plus an optional pointer to the node
// that produced it. Calling backward() on a scalar records the reachable
// nodes into a Tape in topological order and replays their backward rules in
// reverse. Leaves created with requires_grad accumulate dLoss/dLeaf.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdrl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool prev_;
};

template <typename S>
class BasicTensor;

namespace detail {

template <typename S>
struct Node;

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<S>> grad_fn;

  std::span<S> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

template <typename S>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
  std::function<void(std::span<const S> grad_out)> backward;
};

}  // namespace detail

// Ordered record of the operation nodes reachable from a root tensor.
template <typename S>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl<S>>;

  // Collects every non-leaf tensor reachable from root, inputs before outputs.
  static Tape record(const BasicTensor<S>& root);

  // Seeds d(root)/d(root) = 1 and runs each node's backward rule once, in
  // reverse topological order.
  void replay_backward() const;

  std::size_t size() const { return outputs_.size(); }
  const std::vector<ImplPtr>& outputs() const { return outputs_; }

 private:
  std::vector<ImplPtr> outputs_;
  ImplPtr root_;
};

template <typename S>
class BasicTensor {
 public:
  using Scalar = S;
  using Impl = detail::TensorImpl<S>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, S fill = S(0));
  BasicTensor(Shape shape, std::vector<S> data);

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), S(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), S(1)); }
  static BasicTensor scalar(S value) { return BasicTensor(Shape{1}, std::vector<S>{value}); }
  static BasicTensor randn(Shape shape, std::mt19937_64& rng, S stddev = S(1));
  static BasicTensor uniform(Shape shape, std::mt19937_64& rng, S lo, S hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const S> data() const { return impl_->data; }
  // Direct write access; meant for leaves (parameters, inputs under test).
  std::span<S> mutable_data() { return impl_->data; }
  S item() const;
  S at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const S> grad() const { return impl_->grad; }
  std::span<S> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  // Copy of the values with no graph attached.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  void backward() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  std::string op_name() const { return impl_->grad_fn ? impl_->grad_fn->op : "leaf"; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds the result of a differentiable operation. When recording is enabled
// and any input requires grad, a node is attached whose backward callback
// receives d(loss)/d(result). Throws NumericalError if data holds NaN/Inf.
template <typename S>
BasicTensor<S> make_result(const std::string& op, Shape shape, std::vector<S> data,
                           const std::vector<BasicTensor<S>>& inputs,
                           std::function<void(std::span<const S>)> backward);

// Gradient buffer of t if it takes part in differentiation, else empty span.
template <typename S>
std::span<S> grad_sink(const BasicTensor<S>& t);

template <typename S>
bool needs_grad(const BasicTensor<S>& t) {
  return t.defined() && t.requires_grad();
}

// Element type conversion (no graph).
template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(out));
}

}  // namespace tdrl
