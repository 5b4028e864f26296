#pragma once

// Progressive Enhancement Module.
//
// For a clip X [N,T,C,H,W]:
//   x_t = spatial mean of X_t                       (channel statistics, C)
//   d_t = relu(f2 x_{t+1}) - relu(f1 x_t)           t < T-1, reduced width C/r
//   d_{T-1} = 1                                     (last slot is all ones)
//   gamma_t = sigmoid(W_g [m_{t-1} ; d_t])          scalar gate per clip
//   m_t = (1 - gamma_t) m_{t-1} + gamma_t d_t
//   a_t = sigmoid(W_a m_t)                          enhancement, C
//   U_t = X_t * a_t                                 channel-wise
//
// Indexing is 0-based throughout; the all-ones slot is index T-1 and the last
// computed difference is index T-2.

#include <cstddef>
#include <random>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

enum class MemoryInit {
  last_difference,  // m_{-1} = d_{T-2}, the last real frame difference
  ones_slot,        // m_{-1} = d_{T-1}, the all-ones slot
  zeros,
};

MemoryInit parse_memory_init(const std::string& name);
std::string to_string(MemoryInit init);

template <typename S>
struct BasicPemParams {
  std::size_t channels = 0;
  std::size_t reduction = 1;
  BasicTensor<S> f1;      // [C/r, C]
  BasicTensor<S> f2;      // [C/r, C]
  BasicTensor<S> gate;    // [1, 2C/r]
  BasicTensor<S> expand;  // [C, C/r]

  std::size_t reduced() const { return channels / reduction; }

  // Throws ShapeError unless r >= 1, C mod r == 0 and all weights match.
  void validate() const;

  static BasicPemParams zeros(std::size_t channels, std::size_t reduction);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every projection.
  static BasicPemParams random(std::size_t channels, std::size_t reduction, std::mt19937_64& rng);

  std::vector<BasicTensor<S>> tensors() const { return {f1, f2, gate, expand}; }
};

using PemParams = BasicPemParams<float>;

template <typename S>
struct MemoryStepResult {
  BasicTensor<S> memory;  // [N, C/r]
  BasicTensor<S> gamma;   // [N]
};

template <typename S>
struct PemOutput {
  BasicTensor<S> enhanced;     // U [N,T,C,H,W]
  BasicTensor<S> enhancement;  // A [N,T,C]
  // Recurrence trace: memories[0] is the initial memory, memories[t+1] = m_t.
  std::vector<BasicTensor<S>> memories;
  std::vector<BasicTensor<S>> gammas;
  BasicTensor<S> diffs;  // [N,T,C/r]
};

// stats [N,T,C] -> d [N,T,C/r]. Requires T >= 2.
template <typename S>
BasicTensor<S> frame_diffs(const BasicTensor<S>& stats, const BasicPemParams<S>& params);

// One gated memory update. m_prev, d_t: [N, C/r].
template <typename S>
MemoryStepResult<S> memory_step(const BasicTensor<S>& m_prev, const BasicTensor<S>& d_t,
                                const BasicPemParams<S>& params);

// m [N, C/r] -> a [N, C].
template <typename S>
BasicTensor<S> enhancement(const BasicTensor<S>& memory, const BasicPemParams<S>& params);

template <typename S>
PemOutput<S> pem_forward(const BasicTensor<S>& x, const BasicPemParams<S>& params,
                         MemoryInit init = MemoryInit::last_difference);

}  // namespace tdrl
