#include "tdrl/pem.hpp"

#include <cmath>

#include "tdrl/ops.hpp"

namespace tdrl {

MemoryInit parse_memory_init(const std::string& name) {
  if (name == "last_difference") return MemoryInit::last_difference;
  if (name == "ones_slot") return MemoryInit::ones_slot;
  if (name == "zeros") return MemoryInit::zeros;
  throw std::invalid_argument("unknown memory init '" + name + "' (last_difference, ones_slot, zeros)");
}

std::string to_string(MemoryInit init) {
  switch (init) {
    case MemoryInit::last_difference: return "last_difference";
    case MemoryInit::ones_slot: return "ones_slot";
    case MemoryInit::zeros: return "zeros";
  }
  return "?";
}

template <typename S>
void BasicPemParams<S>::validate() const {
  if (reduction == 0 || channels == 0 || channels % reduction != 0) {
    throw ShapeError("pem: reduction " + std::to_string(reduction) + " must divide channel count " +
                     std::to_string(channels));
  }
  const std::size_t r = reduced();
  auto expect = [](const BasicTensor<S>& t, Shape s, const char* name) {
    if (!t.defined() || t.shape() != s) {
      throw ShapeError(std::string("pem: ") + name + " must have shape " + shape_str(s) +
                       (t.defined() ? ", got " + shape_str(t.shape()) : ", got nothing"));
    }
  };
  expect(f1, {r, channels}, "f1");
  expect(f2, {r, channels}, "f2");
  expect(gate, {1, 2 * r}, "gate");
  expect(expand, {channels, r}, "expand");
}

template <typename S>
BasicPemParams<S> BasicPemParams<S>::zeros(std::size_t channels, std::size_t reduction) {
  BasicPemParams p;
  p.channels = channels;
  p.reduction = reduction;
  if (reduction == 0 || channels % reduction != 0) p.validate();
  const std::size_t r = channels / reduction;
  p.f1 = BasicTensor<S>::zeros({r, channels});
  p.f2 = BasicTensor<S>::zeros({r, channels});
  p.gate = BasicTensor<S>::zeros({1, 2 * r});
  p.expand = BasicTensor<S>::zeros({channels, r});
  return p;
}

template <typename S>
BasicPemParams<S> BasicPemParams<S>::random(std::size_t channels, std::size_t reduction, std::mt19937_64& rng) {
  BasicPemParams p = zeros(channels, reduction);
  const std::size_t r = p.reduced();
  auto bound = [](std::size_t fan_in) { return static_cast<S>(1.0 / std::sqrt(static_cast<double>(fan_in))); };
  p.f1 = BasicTensor<S>::uniform({r, channels}, rng, -bound(channels), bound(channels));
  p.f2 = BasicTensor<S>::uniform({r, channels}, rng, -bound(channels), bound(channels));
  p.gate = BasicTensor<S>::uniform({1, 2 * r}, rng, -bound(2 * r), bound(2 * r));
  p.expand = BasicTensor<S>::uniform({channels, r}, rng, -bound(r), bound(r));
  return p;
}

template <typename S>
BasicTensor<S> frame_diffs(const BasicTensor<S>& stats, const BasicPemParams<S>& params) {
  params.validate();
  if (stats.rank() != 3 || stats.dim(2) != params.channels) {
    throw ShapeError("frame_diffs: stats must be [N,T," + std::to_string(params.channels) + "], got " +
                     shape_str(stats.shape()));
  }
  const std::size_t N = stats.dim(0), T = stats.dim(1);
  if (T < 2) throw ShapeError("frame_diffs: need at least 2 frames to take a difference");
  const BasicTensor<S> proj1 = relu(linear(stats, params.f1));
  const BasicTensor<S> proj2 = relu(linear(stats, params.f2));
  // d_t = f2(x_{t+1}) - f1(x_t) for t = 0..T-2
  const BasicTensor<S> head = sub(narrow(proj2, 1, 1, T - 1), narrow(proj1, 1, 0, T - 1));
  const BasicTensor<S> last = BasicTensor<S>::ones({N, 1, params.reduced()});
  return concat<S>({head, last}, 1);
}

template <typename S>
MemoryStepResult<S> memory_step(const BasicTensor<S>& m_prev, const BasicTensor<S>& d_t,
                                const BasicPemParams<S>& params) {
  params.validate();
  const Shape want{m_prev.defined() ? m_prev.dim(0) : 0, params.reduced()};
  if (!m_prev.defined() || !d_t.defined() || m_prev.rank() != 2 || m_prev.shape() != want || d_t.shape() != want) {
    throw ShapeError("memory_step: memory " + (m_prev.defined() ? shape_str(m_prev.shape()) : "?") +
                     " and difference " + (d_t.defined() ? shape_str(d_t.shape()) : "?") + " must both be [N," + std::to_string(params.reduced()) + "]");
  }
  const std::size_t N = m_prev.dim(0);
  const BasicTensor<S> gamma = reshape(sigmoid(linear(concat<S>({m_prev, d_t}, 1), params.gate)), Shape{N});
  // (1 - gamma) m + gamma d == m + gamma (d - m)
  BasicTensor<S> memory = add(m_prev, channel_scale(sub(d_t, m_prev), gamma));
  return {std::move(memory), gamma};
}

template <typename S>
BasicTensor<S> enhancement(const BasicTensor<S>& memory, const BasicPemParams<S>& params) {
  params.validate();
  if (memory.rank() != 2 || memory.dim(1) != params.reduced()) {
    throw ShapeError("enhancement: memory must be [N," + std::to_string(params.reduced()) + "], got " +
                     shape_str(memory.shape()));
  }
  return sigmoid(linear(memory, params.expand));
}

template <typename S>
PemOutput<S> pem_forward(const BasicTensor<S>& x, const BasicPemParams<S>& params, MemoryInit init) {
  params.validate();
  if (x.rank() != 5 || x.dim(2) != params.channels) {
    throw ShapeError("pem_forward: input must be [N,T," + std::to_string(params.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), T = x.dim(1);
  if (T < 2) throw ShapeError("pem_forward: need T >= 2");

  PemOutput<S> out;
  out.diffs = frame_diffs(global_avg_pool_spatial(x), params);

  BasicTensor<S> memory;
  switch (init) {
    case MemoryInit::last_difference: memory = select(out.diffs, 1, T - 2); break;
    case MemoryInit::ones_slot: memory = select(out.diffs, 1, T - 1); break;
    case MemoryInit::zeros: memory = BasicTensor<S>::zeros({N, params.reduced()}); break;
  }
  out.memories.push_back(memory);

  std::vector<BasicTensor<S>> per_frame;
  per_frame.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    MemoryStepResult<S> step = memory_step(memory, select(out.diffs, 1, t), params);
    memory = step.memory;
    out.memories.push_back(memory);
    out.gammas.push_back(step.gamma);
    per_frame.push_back(enhancement(memory, params));
  }
  out.enhancement = stack(per_frame, 1);
  out.enhanced = channel_scale(x, out.enhancement);
  return out;
}

template struct BasicPemParams<float>;
template struct BasicPemParams<double>;

#define TDRL_INSTANTIATE_PEM(S)                                                                       \
  template BasicTensor<S> frame_diffs(const BasicTensor<S>&, const BasicPemParams<S>&);               \
  template MemoryStepResult<S> memory_step(const BasicTensor<S>&, const BasicTensor<S>&,              \
                                           const BasicPemParams<S>&);                                 \
  template BasicTensor<S> enhancement(const BasicTensor<S>&, const BasicPemParams<S>&);               \
  template PemOutput<S> pem_forward(const BasicTensor<S>&, const BasicPemParams<S>&, MemoryInit);

TDRL_INSTANTIATE_PEM(float)
TDRL_INSTANTIATE_PEM(double)

#undef TDRL_INSTANTIATE_PEM

}  // namespace tdrl
