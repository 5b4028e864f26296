#include "tdrl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "tdrl/ops.hpp"

namespace tdrl {

TmKind parse_tm_kind(const std::string& name) {
  if (name == "none") return TmKind::none;
  if (name == "shift") return TmKind::shift;
  if (name == "depthwise_temporal") return TmKind::depthwise_temporal;
  throw std::invalid_argument("unknown tm_kind '" + name + "' (none, shift, depthwise_temporal)");
}

std::string to_string(TmKind kind) {
  switch (kind) {
    case TmKind::none: return "none";
    case TmKind::shift: return "shift";
    case TmKind::depthwise_temporal: return "depthwise_temporal";
  }
  return "?";
}

Placement parse_placement(const std::string& name) {
  if (name == "before_tm") return Placement::before_tm;
  if (name == "after_tm") return Placement::after_tm;
  throw std::invalid_argument("unknown position '" + name + "' (before_tm, after_tm)");
}

std::string to_string(Placement placement) {
  return placement == Placement::before_tm ? "before_tm" : "after_tm";
}

// ---------------------------------------------------------------------------
// configuration

NetworkConfig NetworkConfig::desk_default() {
  NetworkConfig cfg;
  const std::size_t widths[] = {16, 32, 32, 64};
  const std::size_t strides[] = {1, 2, 1, 2};
  std::size_t in = cfg.stem_channels;
  for (int b = 0; b < 4; ++b) {
    BlockSpec spec;
    spec.id = b;
    spec.channels_in = in;
    spec.channels_out = widths[b];
    spec.mid_channels = widths[b] / 2;
    spec.spatial_stride = strides[b];
    spec.use_pem = true;
    spec.tm_kind = TmKind::depthwise_temporal;
    spec.td_regularized = b >= 1;
    cfg.blocks.push_back(spec);
    in = widths[b];
  }
  cfg.sync_td_blocks();
  return cfg;
}

std::vector<int> NetworkConfig::block_ids() const {
  std::vector<int> ids;
  for (const auto& b : blocks) ids.push_back(b.id);
  return ids;
}

void NetworkConfig::sync_td_blocks() {
  td.regularized_blocks.clear();
  for (const auto& b : blocks)
    if (b.td_regularized) td.regularized_blocks.insert(b.id);
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (frames < 2) fail("network.frames must be >= 2");
  if (classes < 2) fail("network.classes must be >= 2");
  if (image_channels == 0 || height == 0 || width == 0) fail("network image dimensions must be positive");
  if (stem_channels == 0 || stem_stride == 0) fail("network.stem_channels and stem_stride must be positive");
  if (temporal_kernel % 2 == 0 || temporal_kernel > 2 * frames + 1) {
    fail("network.temporal_kernel must be odd and <= 2T+1");
  }
  if (!(shift_fold > 0.0 && shift_fold <= 0.5)) fail("network.shift_fold must lie in (0, 0.5]");
  if (!(input_std > 0.0) || !std::isfinite(input_mean)) fail("network.input_std must be positive and input_mean finite");
  if (blocks.empty()) fail("network.blocks must not be empty");

  std::size_t channels = stem_channels;
  std::size_t h = (height + 2 - 3) / stem_stride + 1;
  std::size_t w = (width + 2 - 3) / stem_stride + 1;
  int prev_id = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockSpec& b = blocks[i];
    const std::string where = "block " + std::to_string(b.id) + ": ";
    if (i > 0 && b.id <= prev_id) fail(where + "block ids must be unique and increasing");
    prev_id = b.id;
    if (b.channels_in != channels) {
      fail(where + "channels_in " + std::to_string(b.channels_in) + " does not match incoming " +
           std::to_string(channels));
    }
    if (b.channels_out == 0 || b.mid_channels == 0 || b.spatial_stride == 0) fail(where + "widths must be positive");
    if (b.use_pem && (pem_reduction == 0 || b.channels_in % pem_reduction != 0)) {
      fail(where + "pem_reduction " + std::to_string(pem_reduction) + " must divide " + std::to_string(b.channels_in));
    }
    if (b.td_regularized && b.tm_kind == TmKind::none) fail(where + "td_regularized requires a temporal module");
    if (h + 2 < 3 || w + 2 < 3) fail(where + "feature map too small");
    h = (h - 1) / b.spatial_stride + 1;
    w = (w - 1) / b.spatial_stride + 1;
    channels = b.channels_out;
  }
  td.validate(block_ids());
  std::set<int> flagged;
  for (const auto& b : blocks)
    if (b.td_regularized) flagged.insert(b.id);
  if (flagged != td.regularized_blocks) fail("td.regularized_blocks disagrees with the blocks' td_regularized flags");
}

// ---------------------------------------------------------------------------
// parameters

template <typename S>
std::vector<std::pair<std::string, BasicTensor<S>>> NetworkParams<S>::named() const {
  std::vector<std::pair<std::string, BasicTensor<S>>> out;
  out.emplace_back("stem.weight", stem);
  out.emplace_back("stem.bias", stem_bias);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    const BlockParams<S>& b = blocks[i];
    if (b.pem) {
      out.emplace_back(p + "pem.f1", b.pem->f1);
      out.emplace_back(p + "pem.f2", b.pem->f2);
      out.emplace_back(p + "pem.gate", b.pem->gate);
      out.emplace_back(p + "pem.expand", b.pem->expand);
    }
    if (b.tm.defined()) out.emplace_back(p + "tm.weight", b.tm);
    out.emplace_back(p + "conv1.weight", b.conv1);
    out.emplace_back(p + "conv1.bias", b.conv1_bias);
    out.emplace_back(p + "conv2.weight", b.conv2);
    out.emplace_back(p + "conv2.bias", b.conv2_bias);
    out.emplace_back(p + "conv3.weight", b.conv3);
    out.emplace_back(p + "conv3.bias", b.conv3_bias);
    if (b.shortcut.defined()) out.emplace_back(p + "shortcut.weight", b.shortcut);
  }
  out.emplace_back("head.weight", head_weight);
  out.emplace_back("head.bias", head_bias);
  return out;
}

template <typename S>
std::size_t NetworkParams<S>::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return Tensor::randn(std::move(shape), rng, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
}

Tensor shift_like_kernel(std::size_t channels, std::size_t kt) {
  Tensor w({channels, kt});
  auto d = w.mutable_data();
  const std::size_t center = kt / 2;
  const std::size_t fold = channels / 8;
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t tap = center;
    if (kt > 1 && c < fold) tap = center - 1;             // read previous frame
    else if (kt > 1 && c < 2 * fold) tap = center + 1;    // read next frame
    d[c * kt + tap] = 1.0f;
  }
  return w;
}

}  // namespace

NetworkParams<float> init_params(const NetworkConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0x5EED);
  NetworkParams<float> p;
  p.stem = he_normal({cfg.stem_channels, cfg.image_channels, 3, 3}, cfg.image_channels * 9, rng);
  p.stem_bias = Tensor::zeros({cfg.stem_channels});
  for (const BlockSpec& spec : cfg.blocks) {
    BlockParams<float> b;
    if (spec.use_pem) b.pem = PemParams::random(spec.channels_in, cfg.pem_reduction, rng);
    if (spec.tm_kind == TmKind::depthwise_temporal) b.tm = shift_like_kernel(spec.channels_in, cfg.temporal_kernel);
    b.conv1 = he_normal({spec.mid_channels, spec.channels_in, 1, 1}, spec.channels_in, rng);
    b.conv2 = he_normal({spec.mid_channels, spec.mid_channels, 3, 3}, spec.mid_channels * 9, rng);
    b.conv3 = Tensor::zeros({spec.channels_out, spec.mid_channels, 1, 1});
    b.conv1_bias = Tensor::zeros({spec.mid_channels});
    b.conv2_bias = Tensor::zeros({spec.mid_channels});
    b.conv3_bias = Tensor::zeros({spec.channels_out});
    if (spec.has_projection()) {
      b.shortcut = Tensor::randn({spec.channels_out, spec.channels_in, 1, 1}, rng,
                                 static_cast<float>(std::sqrt(1.0 / static_cast<double>(spec.channels_in))));
    }
    p.blocks.push_back(std::move(b));
  }
  const std::size_t last = cfg.blocks.back().channels_out;
  const auto bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(last)));
  p.head_weight = Tensor::uniform({cfg.classes, last}, rng, -bound, bound);
  p.head_bias = Tensor::zeros({cfg.classes});
  return p;
}

std::size_t expected_param_count(const NetworkConfig& cfg) {
  std::size_t n = cfg.stem_channels * (cfg.image_channels * 9 + 1);
  for (const BlockSpec& b : cfg.blocks) {
    const std::size_t c = b.channels_in;
    if (b.use_pem) {
      const std::size_t r = c / cfg.pem_reduction;
      n += 2 * r * c + 2 * r + c * r;
    }
    if (b.tm_kind == TmKind::depthwise_temporal) n += c * cfg.temporal_kernel;
    n += b.mid_channels * (c + 1) + b.mid_channels * (b.mid_channels * 9 + 1) + b.channels_out * (b.mid_channels + 1);
    if (b.has_projection()) n += b.channels_out * c;
  }
  n += cfg.classes * cfg.blocks.back().channels_out + cfg.classes;
  return n;
}

template <typename To, typename From>
NetworkParams<To> convert_params(const NetworkParams<From>& params) {
  auto cv = [](const BasicTensor<From>& t) { return t.defined() ? cast<To>(t) : BasicTensor<To>(); };
  NetworkParams<To> out;
  out.stem = cv(params.stem);
  out.stem_bias = cv(params.stem_bias);
  for (const auto& b : params.blocks) {
    BlockParams<To> nb;
    if (b.pem) {
      BasicPemParams<To> pem;
      pem.channels = b.pem->channels;
      pem.reduction = b.pem->reduction;
      pem.f1 = cv(b.pem->f1);
      pem.f2 = cv(b.pem->f2);
      pem.gate = cv(b.pem->gate);
      pem.expand = cv(b.pem->expand);
      nb.pem = std::move(pem);
    }
    nb.tm = cv(b.tm);
    nb.conv1 = cv(b.conv1);
    nb.conv1_bias = cv(b.conv1_bias);
    nb.conv2 = cv(b.conv2);
    nb.conv2_bias = cv(b.conv2_bias);
    nb.conv3 = cv(b.conv3);
    nb.conv3_bias = cv(b.conv3_bias);
    nb.shortcut = cv(b.shortcut);
    out.blocks.push_back(std::move(nb));
  }
  out.head_weight = cv(params.head_weight);
  out.head_bias = cv(params.head_bias);
  return out;
}

NamedTensors to_records(const NetworkParams<float>& params) {
  NamedTensors out;
  for (const auto& [name, t] : params.named()) out.emplace_back(name, t.detach());
  return out;
}

NetworkParams<float> from_records(const NetworkConfig& cfg, const NamedTensors& records) {
  NetworkParams<float> params = init_params(cfg);
  auto slots = params.named();
  if (records.size() != slots.size()) {
    throw FormatError("checkpoint has " + std::to_string(records.size()) + " tensors, configuration expects " +
                      std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& [name, slot] = slots[i];
    const auto& [rname, rt] = records[i];
    if (rname != name) throw FormatError("checkpoint tensor '" + rname + "' where '" + name + "' was expected");
    if (rt.shape() != slot.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(rt.shape()) + ", expected " +
                        shape_str(slot.shape()));
    }
    std::copy(rt.data().begin(), rt.data().end(), slot.mutable_data().begin());
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params) {
  write_tensor_file(path, kCheckpointMagic, to_records(params));
}

NetworkParams<float> load_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg) {
  return from_records(cfg, read_tensor_file(path, kCheckpointMagic));
}

// ---------------------------------------------------------------------------
// forward

namespace {

template <typename S>
BasicTensor<S> apply_tm(const BasicTensor<S>& x, const BlockSpec& spec, const BlockParams<S>& params,
                        const NetworkConfig& cfg) {
  switch (spec.tm_kind) {
    case TmKind::none: return x;
    case TmKind::shift: return temporal_shift(x, cfg.shift_fold);
    case TmKind::depthwise_temporal: return depthwise_temporal_conv(x, params.tm);
  }
  return x;
}

}  // namespace

template <typename S>
BlockOutput<S> block_forward(const BasicTensor<S>& x, const BlockSpec& spec, const BlockParams<S>& params,
                             const NetworkConfig& cfg) {
  const std::string where = "block " + std::to_string(spec.id) + ": ";
  if (x.rank() != 5 || x.dim(2) != spec.channels_in) {
    throw ShapeError(where + "input " + (x.defined() ? shape_str(x.shape()) : "?") + " does not have " +
                     std::to_string(spec.channels_in) + " channels in [N,T,C,H,W] layout");
  }
  if (spec.use_pem != params.pem.has_value() || (spec.tm_kind == TmKind::depthwise_temporal) != params.tm.defined() ||
      spec.has_projection() != params.shortcut.defined()) {
    throw ShapeError(where + "parameters do not match the block specification");
  }
  const std::size_t N = x.dim(0), T = x.dim(1), H = x.dim(3), W = x.dim(4);

  BlockOutput<S> out;
  BasicTensor<S> h = x;
  auto run_pem = [&](const BasicTensor<S>& in) {
    PemOutput<S> pem = pem_forward(in, *params.pem, cfg.memory_init);
    out.enhancement = pem.enhancement;
    return pem.enhanced;
  };
  if (spec.use_pem && spec.pem_position == Placement::before_tm) h = run_pem(h);
  out.enhanced = h;
  if (spec.td_regularized && spec.td_position == Placement::before_tm) out.diversity = h;
  h = apply_tm(h, spec, params, cfg);
  if (spec.td_regularized && spec.td_position == Placement::after_tm) out.diversity = h;
  if (spec.use_pem && spec.pem_position == Placement::after_tm) {
    h = run_pem(h);
    out.enhanced = h;
  }

  const Shape frames{N * T, spec.channels_in, H, W};
  BasicTensor<S> r = reshape(h, frames);
  using Bias = std::optional<BasicTensor<S>>;
  r = relu(conv2d(r, params.conv1, 1, 0, Bias(params.conv1_bias)));
  r = relu(conv2d(r, params.conv2, spec.spatial_stride, 1, Bias(params.conv2_bias)));
  r = conv2d(r, params.conv3, 1, 0, Bias(params.conv3_bias));
  BasicTensor<S> skip = reshape(x, frames);
  if (params.shortcut.defined()) skip = conv2d(skip, params.shortcut, spec.spatial_stride, 0);
  if (skip.shape() != r.shape()) {
    throw ShapeError(where + "residual " + shape_str(r.shape()) + " and shortcut " + shape_str(skip.shape()) +
                     " disagree");
  }
  out.output = reshape(add(r, skip), Shape{N, T, spec.channels_out, r.dim(2), r.dim(3)});
  return out;
}

template <typename S>
NetworkOutput<S> network_forward(const BasicTensor<S>& clips, const NetworkConfig& cfg,
                                 const NetworkParams<S>& params) {
  const Shape want{clips.defined() ? clips.dim(0) : 0, cfg.frames, cfg.image_channels, cfg.height, cfg.width};
  if (!clips.defined() || clips.rank() != 5 || clips.shape() != want) {
    throw ShapeError("network_forward: clips " + (clips.defined() ? shape_str(clips.shape()) : "?") +
                     " do not match configured [N," + std::to_string(cfg.frames) + "," +
                     std::to_string(cfg.image_channels) + "," + std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + "]");
  }
  if (params.blocks.size() != cfg.blocks.size()) throw ShapeError("network_forward: parameter/block count mismatch");
  const std::size_t N = clips.dim(0), T = cfg.frames;

  // Clips are data, so the normalization stays outside the graph.
  std::vector<S> normalized(clips.data().begin(), clips.data().end());
  const S mu = static_cast<S>(cfg.input_mean), inv = static_cast<S>(1.0 / cfg.input_std);
  for (S& v : normalized) v = (v - mu) * inv;
  BasicTensor<S> h(Shape{N * T, cfg.image_channels, cfg.height, cfg.width}, std::move(normalized));
  h = relu(conv2d(h, params.stem, cfg.stem_stride, 1, std::optional<BasicTensor<S>>(params.stem_bias)));
  h = reshape(h, Shape{N, T, cfg.stem_channels, h.dim(2), h.dim(3)});

  NetworkOutput<S> out;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    BlockOutput<S> b = block_forward(h, cfg.blocks[i], params.blocks[i], cfg);
    if (b.diversity) out.z_by_block.emplace(cfg.blocks[i].id, *b.diversity);
    if (b.enhancement) out.enhancement_by_block.emplace(cfg.blocks[i].id, *b.enhancement);
    h = b.output;
  }
  const BasicTensor<S> pooled = mean_axis(global_avg_pool_spatial(h), 1);  // [N, C]
  out.logits = linear(pooled, params.head_weight, std::optional<BasicTensor<S>>(params.head_bias));
  return out;
}

template struct NetworkParams<float>;
template struct NetworkParams<double>;
template NetworkParams<double> convert_params(const NetworkParams<float>&);
template NetworkParams<float> convert_params(const NetworkParams<double>&);

#define TDRL_INSTANTIATE_BACKBONE(S)                                                                         \
  template BlockOutput<S> block_forward(const BasicTensor<S>&, const BlockSpec&, const BlockParams<S>&,      \
                                        const NetworkConfig&);                                               \
  template NetworkOutput<S> network_forward(const BasicTensor<S>&, const NetworkConfig&, const NetworkParams<S>&);

TDRL_INSTANTIATE_BACKBONE(float)
TDRL_INSTANTIATE_BACKBONE(double)

#undef TDRL_INSTANTIATE_BACKBONE

}  // namespace tdrl
