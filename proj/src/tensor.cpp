#include "tdrl/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace tdrl {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

template <typename S>
void check_finite(const std::string& op, std::span<const S> data) {
  // x * 0 is NaN exactly when x is Inf or NaN; the sum vectorizes where an
  // early-exit loop would not.
  S acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < data.size(); ++i) acc += data[i] * S(0);
  if (acc != acc) throw NumericalError(op, "non-finite value produced by " + op);
}

}  // namespace

template <typename S>
BasicTensor<S>::BasicTensor(Shape shape, S fill) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename S>
BasicTensor<S>::BasicTensor(Shape shape, std::vector<S> data) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::randn(Shape shape, std::mt19937_64& rng, S stddev) {
  BasicTensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (S& v : t.impl_->data) v = static_cast<S>(dist(rng)) * stddev;
  return t;
}

template <typename S>
BasicTensor<S> BasicTensor<S>::uniform(Shape shape, std::mt19937_64& rng, S lo, S hi) {
  BasicTensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (S& v : t.impl_->data) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
S BasicTensor<S>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename S>
S BasicTensor<S>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw std::out_of_range("tensor index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

template <typename S>
BasicTensor<S>& BasicTensor<S>::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename S>
BasicTensor<S> BasicTensor<S>::detach() const {
  return BasicTensor(impl_->shape, impl_->data);
}

template <typename S>
void BasicTensor<S>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");
  Tape<S>::record(*this).replay_backward();
}

template <typename S>
Tape<S> Tape<S>::record(const BasicTensor<S>& root) {
  Tape tape;
  tape.root_ = root.impl();
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::unordered_set<const detail::TensorImpl<S>*> visited;
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  if (root.impl()->grad_fn) {
    stack.emplace_back(root.impl(), 0);
    visited.insert(root.impl().get());
  }
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& inputs = impl->grad_fn->inputs;
    if (next < inputs.size()) {
      const ImplPtr& in = inputs[next++];
      if (in->grad_fn && in->requires_grad && visited.insert(in.get()).second) {
        stack.emplace_back(in, 0);
      }
      continue;
    }
    tape.outputs_.push_back(impl);
    stack.pop_back();
  }
  return tape;
}

template <typename S>
void Tape<S>::replay_backward() const {
  if (!root_) return;
  root_->ensure_grad()[0] += S(1);
  for (auto it = outputs_.rbegin(); it != outputs_.rend(); ++it) {
    const ImplPtr& out = *it;
    if (out->grad.empty()) continue;  // nothing flowed into this node
    out->grad_fn->backward(out->grad);
  }
}

template <typename S>
BasicTensor<S> make_result(const std::string& op, Shape shape, std::vector<S> data,
                           const std::vector<BasicTensor<S>>& inputs,
                           std::function<void(std::span<const S>)> backward) {
  check_finite<S>(op, data);
  BasicTensor<S> out(std::move(shape), std::move(data));
  if (!NoGradGuard::grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || needs_grad(in);
  if (!any) return out;
  auto node = std::make_shared<detail::Node<S>>();
  node->op = op;
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template <typename S>
std::span<S> grad_sink(const BasicTensor<S>& t) {
  if (!needs_grad(t)) return {};
  return t.impl()->ensure_grad();
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template BasicTensor<float> make_result(const std::string&, Shape, std::vector<float>,
                                        const std::vector<BasicTensor<float>>&,
                                        std::function<void(std::span<const float>)>);
template BasicTensor<double> make_result(const std::string&, Shape, std::vector<double>,
                                         const std::vector<BasicTensor<double>>&,
                                         std::function<void(std::span<const double>)>);
template std::span<float> grad_sink(const BasicTensor<float>&);
template std::span<double> grad_sink(const BasicTensor<double>&);

}  // namespace tdrl
