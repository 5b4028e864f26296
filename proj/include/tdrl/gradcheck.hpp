#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares backward() gradients of a scalar function against central
// differences (f(x+eps e_i) - f(x-eps e_i)) / 2eps. The function reads the
// leaves it closes over; leaves are perturbed in place and restored.
//
// Relative error per coordinate is |a-b| / max(|a|, |b|, 1e-8). When
// max_coords_per_leaf is nonzero only an evenly strided subset of each leaf
// is probed. Throws NondeterminismError if two evaluations at the same point
// differ.
template <typename S>
GradCheckReport grad_check_leaves(const std::function<BasicTensor<S>()>& f,
                                  std::vector<std::pair<std::string, BasicTensor<S>>> leaves, double eps,
                                  std::size_t max_coords_per_leaf = 0);

// Single-input form; returns the maximum relative error.
template <typename S>
double grad_check(const std::function<BasicTensor<S>(const BasicTensor<S>&)>& f, const BasicTensor<S>& input,
                  double eps);

}  // namespace tdrl
