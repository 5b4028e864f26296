#pragma once

// Finite-difference checks over every differentiable operator, the PEM
// recurrence, the composed PEM -> TM -> ResConv block and a tiny network.
// Everything runs in double precision.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace tdrl {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;  // 1e-6 for ops that are at most bilinear in their leaves, 1e-3 otherwise
  std::size_t coordinates = 0;
  std::string worst_leaf;

  bool passed() const { return max_rel_error < tolerance; }
};

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7);

}  // namespace tdrl
