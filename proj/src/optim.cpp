#include "tdrl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tdrl {

void sgd_step(ParamList& params, OptimState& state) {
  if (!(state.lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (state.velocity.empty()) {
    for (const auto& [name, p] : params) state.velocity.emplace_back(p.numel(), 0.0f);
  }
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    if (!p.has_grad()) throw std::invalid_argument("sgd_step: parameter '" + name + "' has no gradient");
    auto& v = state.velocity[i];
    if (v.size() != p.numel()) throw std::invalid_argument("sgd_step: momentum buffer for '" + name + "' is misshapen");
  }
  const auto lr = static_cast<float>(state.lr);
  const auto mu = static_cast<float>(state.momentum);
  const auto wd = static_cast<float>(state.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    auto& v = state.velocity[i];
    auto w = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] + g[k] + wd * w[k];
      w[k] -= lr * v[k];
    }
    p.zero_grad();
  }
}

double clip_grad_norm(ParamList& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [name, p] : params)
    for (const float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto& [name, p] : params)
      if (p.has_grad())
        for (float& g : p.mutable_grad()) g *= scale;
  }
  return norm;
}

double lr_schedule(std::size_t epoch, std::size_t total, double base_lr) {
  if (total == 0 || epoch >= total) throw std::invalid_argument("lr_schedule: need 0 <= epoch < total");
  // milestones at 6/10, 8/10 and 9/10 of training, compared in integers
  int passed = 0;
  for (std::size_t tenths : {6u, 8u, 9u})
    if (epoch * 10 >= tenths * total) ++passed;
  return base_lr * std::pow(10.0, -passed);
}

}  // namespace tdrl
