#pragma once

// Temporal diversity regularization.
//
// For post-TM features Z [N,T,C,H,W] and the first C_mu = floor(ratio*C)
// channels, each frame's channel map is flattened to z_t^c. The loss is
//
//   L = mean_n sum_{c < C_mu} 1/(T(T-1)) sum_{i != j} cos(z_i^c, z_j^c)
//
// over ordered frame pairs, and the training objective is CE + lambda * sum_b L_b.

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

struct TdConfig {
  double ratio = 0.5;
  double eps = 1e-8;
  double lambda = 2e-4;
  std::set<int> regularized_blocks;

  // Throws std::invalid_argument on out-of-range values or unknown block ids.
  void validate(const std::vector<int>& block_ids) const;
  std::size_t regularized_channels(std::size_t channels) const;
};

struct LossBreakdown {
  double total = 0.0;
  double cross_entropy = 0.0;
  std::map<int, double> td_terms;

  double td_sum() const;
};

// u.v / (max(|u|,eps) max(|v|,eps)), clamped to [-1, 1].
template <typename S>
double cosine_sim(std::span<const S> u, std::span<const S> v, double eps = 1e-8);

// Differentiable loss over the first `channels` channels; 0 when channels == 0.
template <typename S>
BasicTensor<S> td_loss_channels(const BasicTensor<S>& z, std::size_t channels, double eps);

template <typename S>
BasicTensor<S> td_loss(const BasicTensor<S>& z, const TdConfig& cfg) {
  return td_loss_channels(z, cfg.regularized_channels(z.dim(2)), cfg.eps);
}

// T x T matrix (row-major) of cosine similarity between frames i and j,
// averaged over the first `channels` channels and the batch.
template <typename S>
std::vector<double> frame_similarity_matrix(const BasicTensor<S>& z, std::size_t channels, double eps);

// Mean cosine over ordered pairs i != j, regularized channels and batch.
// Equals td_loss / C_mu; 0 when no channel is regularized.
template <typename S>
double mean_pairwise_cosine(const BasicTensor<S>& z, std::size_t channels, double eps);

template <typename S>
struct TotalLoss {
  BasicTensor<S> loss;
  LossBreakdown breakdown;
};

// Cross-entropy plus lambda times the sum of per-block diversity terms. With
// lambda == 0 the td terms are still reported but do not enter the graph.
template <typename S>
TotalLoss<S> total_loss(const BasicTensor<S>& logits, const std::vector<int>& labels,
                        const std::map<int, BasicTensor<S>>& z_by_block, const TdConfig& cfg);

}  // namespace tdrl
