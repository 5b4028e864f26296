#include "tdrl/gradcheck_suite.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "tdrl/backbone.hpp"
#include "tdrl/gradcheck.hpp"
#include "tdrl/ops.hpp"
#include "tdrl/pem.hpp"
#include "tdrl/tdloss.hpp"

namespace tdrl {

namespace {

constexpr double kLinearTol = 1e-6;
constexpr double kNonlinearTol = 1e-3;
// Ops checked at kLinearTol are linear in each single coordinate, so a central
// difference is exact at any step and a large step only cuts roundoff.
constexpr double kLinearEps = 1e-2;
constexpr double kEps = 1e-6;

using T64 = Tensor64;
using Leaves = std::vector<std::pair<std::string, T64>>;

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  T64 randn(const Shape& s, double sd = 1.0) { return T64::randn(s, rng_, sd); }

  // Values bounded away from zero so relu kinks sit far from the probes.
  T64 away_from_zero(const Shape& s) {
    T64 t = randn(s);
    for (double& v : t.mutable_data()) v = std::copysign(0.1 + std::fabs(v), v);
    return t;
  }

  // Reduces an op output to a scalar with fixed random weights, so every
  // output coordinate contributes to the checked gradient.
  T64 project(const T64& y) {
    auto it = probes_.find(y.shape());
    if (it == probes_.end()) it = probes_.emplace(y.shape(), randn(y.shape())).first;
    return sum(mul(y, it->second));
  }

  void check(const std::string& name, double tol, Leaves leaves, const std::function<T64()>& f,
             std::size_t max_coords = 0) {
    const GradCheckReport r = grad_check_leaves<double>(f, std::move(leaves), tol == kLinearTol ? kLinearEps : kEps, max_coords);
    cases_.push_back({name, r.max_rel_error, tol, r.coordinates, r.worst_leaf});
  }

  std::vector<GradCheckCase> take() { return std::move(cases_); }

 private:
  std::mt19937_64 rng_;
  std::map<Shape, T64> probes_;
  std::vector<GradCheckCase> cases_;
};

BlockSpec tiny_block(int id, std::size_t cin, std::size_t cout, std::size_t stride) {
  BlockSpec b;
  b.id = id;
  b.channels_in = cin;
  b.channels_out = cout;
  b.mid_channels = std::max<std::size_t>(1, cout / 2);
  b.spatial_stride = stride;
  b.use_pem = true;
  b.tm_kind = TmKind::depthwise_temporal;
  b.td_regularized = true;
  return b;
}

NetworkConfig tiny_network() {
  NetworkConfig cfg;
  cfg.frames = 3;
  cfg.height = 5;
  cfg.width = 5;
  cfg.stem_channels = 4;
  cfg.classes = 3;
  cfg.pem_reduction = 2;
  cfg.blocks = {tiny_block(0, 4, 4, 1), tiny_block(1, 4, 8, 2)};
  cfg.td.lambda = 0.1;
  cfg.sync_td_blocks();
  cfg.validate();
  return cfg;
}

// Random everywhere: the zero-initialised conv3 and the shift-like TM would
// leave parts of the graph without gradient or put frames at exactly zero.
void randomize(NetworkParams<double>& p, Suite& s) {
  for (auto& [name, t] : p.named()) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(t.numel() / t.dim(0)));
    const T64 r = s.randn(t.shape(), sd);
    std::copy(r.data().begin(), r.data().end(), t.mutable_data().begin());
  }
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  Suite s(seed);

  {
    T64 x = s.randn({2, 3, 6, 5}), w = s.randn({4, 3, 3, 3});
    s.check("conv2d k3 s1 p1", kLinearTol, {{"input", x}, {"weight", w}}, [&] { return s.project(conv2d(x, w, 1, 1)); });
    s.check("conv2d k3 s2 p1", kLinearTol, {{"input", x}, {"weight", w}}, [&] { return s.project(conv2d(x, w, 2, 1)); });
    T64 w1 = s.randn({2, 3, 1, 1});
    s.check("conv2d k1", kLinearTol, {{"input", x}, {"weight", w1}}, [&] { return s.project(conv2d(x, w1)); });
    s.check("conv2d k1 s2", kLinearTol, {{"input", x}, {"weight", w1}}, [&] { return s.project(conv2d(x, w1, 2, 0)); });
    T64 b = s.randn({4}), b1 = s.randn({2});
    s.check("conv2d k3 s2 p1 bias", kLinearTol, {{"input", x}, {"weight", w}, {"bias", b}},
            [&] { return s.project(conv2d(x, w, 2, 1, std::optional<T64>(b))); });
    s.check("conv2d k1 bias", kLinearTol, {{"input", x}, {"weight", w1}, {"bias", b1}},
            [&] { return s.project(conv2d(x, w1, 1, 0, std::optional<T64>(b1))); });
  }
  {
    T64 x = s.randn({2, 4, 3, 2, 3}), w = s.randn({3, 3});
    s.check("depthwise_temporal_conv", kLinearTol, {{"input", x}, {"weight", w}},
            [&] { return s.project(depthwise_temporal_conv(x, w)); });
    T64 w5 = s.randn({3, 5});
    s.check("depthwise_temporal_conv k5", kLinearTol, {{"input", x}, {"weight", w5}},
            [&] { return s.project(depthwise_temporal_conv(x, w5)); });
    s.check("temporal_shift", kLinearTol, {{"input", x}}, [&] { return s.project(temporal_shift(x, 1.0 / 3.0)); });
    s.check("global_avg_pool_spatial", kLinearTol, {{"input", x}},
            [&] { return s.project(global_avg_pool_spatial(x)); });
  }
  {
    T64 x = s.randn({3, 5}), w = s.randn({4, 5}), b = s.randn({4});
    s.check("linear", kLinearTol, {{"input", x}, {"weight", w}, {"bias", b}},
            [&] { return s.project(linear(x, w, std::optional<T64>(b))); });
    T64 x3 = s.randn({2, 3, 5});
    s.check("linear rank3", kLinearTol, {{"input", x3}, {"weight", w}}, [&] { return s.project(linear(x3, w)); });
  }
  {
    T64 a = s.randn({2, 3, 4}), b = s.randn({2, 3, 4});
    s.check("sigmoid", kNonlinearTol, {{"input", a}}, [&] { return s.project(sigmoid(a)); });
    T64 r = s.away_from_zero({2, 3, 4});
    s.check("relu", kLinearTol, {{"input", r}}, [&] { return s.project(relu(r)); });
    s.check("add", kLinearTol, {{"a", a}, {"b", b}}, [&] { return s.project(add(a, b)); });
    s.check("sub", kLinearTol, {{"a", a}, {"b", b}}, [&] { return s.project(sub(a, b)); });
    s.check("mul", kLinearTol, {{"a", a}, {"b", b}}, [&] { return s.project(mul(a, b)); });
    s.check("scale", kLinearTol, {{"a", a}}, [&] { return s.project(scale(a, 1.7)); });
    s.check("concat", kLinearTol, {{"a", a}, {"b", b}}, [&] { return s.project(concat<double>({a, b}, 1)); });
    s.check("stack", kLinearTol, {{"a", a}, {"b", b}}, [&] { return s.project(stack<double>({a, b}, 2)); });
    s.check("narrow", kLinearTol, {{"a", a}}, [&] { return s.project(narrow(a, 2, 1, 2)); });
    s.check("select", kLinearTol, {{"a", a}}, [&] { return s.project(select(a, 1, 2)); });
    s.check("reshape", kLinearTol, {{"a", a}}, [&] { return s.project(reshape(a, {6, 4})); });
    s.check("mean_axis", kLinearTol, {{"a", a}}, [&] { return s.project(mean_axis(a, 1)); });
    s.check("sum", kLinearTol, {{"a", a}}, [&] { return scale(sum(a), 0.5); });
    s.check("mean", kLinearTol, {{"a", a}}, [&] { return scale(mean(a), 3.0); });
    T64 x = s.randn({2, 3, 4, 2, 2});
    s.check("channel_scale", kLinearTol, {{"input", x}, {"scale", a}}, [&] { return s.project(channel_scale(x, a)); });
  }
  {
    T64 logits = s.randn({4, 5});
    const std::vector<int> labels{0, 3, 4, 1};
    s.check("softmax_cross_entropy", kNonlinearTol, {{"logits", logits}},
            [&] { return softmax_cross_entropy(logits, labels); });
    T64 z = s.randn({2, 4, 3, 2, 3});
    s.check("td_loss", kNonlinearTol, {{"z", z}}, [&] { return td_loss_channels(z, 2, 1e-8); });
    s.check("td_loss all channels", kNonlinearTol, {{"z", z}}, [&] { return td_loss_channels(z, 3, 1e-8); });
  }
  {
    std::mt19937_64 prng(seed + 1);
    BasicPemParams<double> p = BasicPemParams<double>::random(4, 2, prng);
    Leaves pl{{"f1", p.f1}, {"f2", p.f2}, {"gate", p.gate}, {"expand", p.expand}};
    T64 m = s.randn({3, 2}), d = s.randn({3, 2});
    Leaves ml = pl;
    ml.push_back({"m_prev", m});
    ml.push_back({"d_t", d});
    s.check("memory_step", kNonlinearTol, ml, [&] { return s.project(memory_step(m, d, p).memory); });
    s.check("enhancement", kNonlinearTol, {{"expand", p.expand}, {"m", m}}, [&] { return s.project(enhancement(m, p)); });
    T64 x = s.randn({2, 4, 4, 3, 3});
    Leaves xl = pl;
    xl.push_back({"input", x});
    for (MemoryInit init : {MemoryInit::last_difference, MemoryInit::ones_slot, MemoryInit::zeros}) {
      s.check("pem_forward " + to_string(init), kNonlinearTol, xl,
              [&] { return s.project(pem_forward(x, p, init).enhanced); });
    }
  }
  {
    NetworkConfig cfg = tiny_network();
    NetworkParams<double> p = convert_params<double>(init_params(cfg));
    randomize(p, s);
    const BlockSpec& spec = cfg.blocks[1];
    T64 x = s.randn({2, 3, 4, 5, 5});
    Leaves bl;
    const std::string prefix = "block1.";
    for (auto& [name, t] : p.named()) {
      if (name.rfind(prefix, 0) == 0) bl.push_back({name, t});
    }
    bl.push_back({"input", x});
    s.check("block PEM->TM->ResConv", kNonlinearTol, bl, [&] {
      BlockOutput<double> out = block_forward(x, spec, p.blocks[1], cfg);
      return add(s.project(out.output), td_loss(*out.diversity, cfg.td));
    });

    T64 clips = s.randn({2, 3, 1, 5, 5});
    const std::vector<int> labels{2, 0};
    s.check("network total loss", kNonlinearTol, p.named(), [&] {
      NetworkOutput<double> out = network_forward(clips, cfg, p);
      return total_loss(out.logits, labels, out.z_by_block, cfg.td).loss;
    }, 24);
  }
  return s.take();
}

}  // namespace tdrl
