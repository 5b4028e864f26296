#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

// SGD with momentum and L2 weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
struct OptimState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::vector<float>> velocity;  // one buffer per parameter, created on first step
};

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// Applies one update and clears the gradients. Throws std::invalid_argument
// naming the first trainable parameter without a gradient.
void sgd_step(ParamList& params, OptimState& state);

// Rescales all gradients together so their global L2 norm is at most
// max_norm. Returns the norm before rescaling.
double clip_grad_norm(ParamList& params, double max_norm);

// base_lr divided by 10 for every milestone (60%, 80%, 90% of total) reached.
double lr_schedule(std::size_t epoch, std::size_t total, double base_lr);

}  // namespace tdrl
