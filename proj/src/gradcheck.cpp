#include "tdrl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace tdrl {

namespace {

template <typename S>
S evaluate(const std::function<BasicTensor<S>()>& f) {
  NoGradGuard guard;
  return f().item();
}

template <typename S>
bool same_bits(S a, S b) {
  return std::memcmp(&a, &b, sizeof(S)) == 0;
}

}  // namespace

template <typename S>
GradCheckReport grad_check_leaves(const std::function<BasicTensor<S>()>& f,
                                  std::vector<std::pair<std::string, BasicTensor<S>>> leaves, double eps,
                                  std::size_t max_coords_per_leaf) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

  const S base = evaluate(f);
  if (!same_bits(base, evaluate(f))) {
    throw NondeterminismError("grad_check: function returned different values for identical inputs");
  }

  for (auto& [name, leaf] : leaves) {
    leaf.zero_grad();
    leaf.set_requires_grad(true);
  }
  BasicTensor<S> loss = f();
  if (loss.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  loss.backward();

  GradCheckReport report;
  report.max_rel_error = 0.0;
  for (auto& [name, leaf] : leaves) {
    std::vector<S> analytic(leaf.numel(), S(0));
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    const std::size_t n = leaf.numel();
    const std::size_t step =
        max_coords_per_leaf == 0 || n <= max_coords_per_leaf ? 1 : (n + max_coords_per_leaf - 1) / max_coords_per_leaf;
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < n; i += step) {
      const S saved = values[i];
      values[i] = static_cast<S>(saved + eps);
      const S up = evaluate(f);
      values[i] = static_cast<S>(saved - eps);
      const S down = evaluate(f);
      values[i] = saved;
      // actual perturbation width after rounding to S
      const long double width =
          static_cast<long double>(static_cast<S>(saved + eps)) - static_cast<long double>(static_cast<S>(saved - eps));
      const double numeric = static_cast<double>((static_cast<long double>(up) - down) / width);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (report.worst_leaf.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_leaf = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
    if (!same_bits(base, evaluate(f))) {
      throw NondeterminismError("grad_check: value drifted after probing leaf " + name);
    }
  }
  return report;
}

template <typename S>
double grad_check(const std::function<BasicTensor<S>(const BasicTensor<S>&)>& f, const BasicTensor<S>& input,
                  double eps) {
  BasicTensor<S> x = input.detach();
  std::function<BasicTensor<S>()> closed = [&f, &x]() { return f(x); };
  return grad_check_leaves<S>(closed, {{"input", x}}, eps).max_rel_error;
}

template GradCheckReport grad_check_leaves(const std::function<BasicTensor<float>()>&,
                                           std::vector<std::pair<std::string, BasicTensor<float>>>, double,
                                           std::size_t);
template GradCheckReport grad_check_leaves(const std::function<BasicTensor<double>()>&,
                                           std::vector<std::pair<std::string, BasicTensor<double>>>, double,
                                           std::size_t);
template double grad_check(const std::function<BasicTensor<float>(const BasicTensor<float>&)>&,
                           const BasicTensor<float>&, double);
template double grad_check(const std::function<BasicTensor<double>(const BasicTensor<double>&)>&,
                           const BasicTensor<double>&, double);

}  // namespace tdrl
