#pragma once

// Residual 2-D CNN video classifier.
//
// block:   X -> [PEM] -> TM -> [PEM if placed after TM] -> ResConv -> + shortcut(X)
// ResConv: 1x1 -> ReLU -> 3x3 (stride s) -> ReLU -> 1x1, each convolution with a bias
// network: (x - input_mean) / input_std -> stem 3x3 conv + ReLU -> blocks
//          -> spatial GAP -> mean over T -> linear head
//
// The diversity features Z are captured right before or right after the TM.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdrl/checkpoint.hpp"
#include "tdrl/pem.hpp"
#include "tdrl/tdloss.hpp"
#include "tdrl/tensor.hpp"

namespace tdrl {

enum class TmKind { none, shift, depthwise_temporal };
enum class Placement { before_tm, after_tm };

TmKind parse_tm_kind(const std::string& name);
std::string to_string(TmKind kind);
Placement parse_placement(const std::string& name);
std::string to_string(Placement placement);

struct BlockSpec {
  int id = 0;
  std::size_t channels_in = 16;
  std::size_t channels_out = 16;
  std::size_t mid_channels = 8;
  std::size_t spatial_stride = 1;
  bool use_pem = false;
  Placement pem_position = Placement::before_tm;
  TmKind tm_kind = TmKind::depthwise_temporal;
  bool td_regularized = false;
  Placement td_position = Placement::after_tm;

  bool has_projection() const { return channels_in != channels_out || spatial_stride != 1; }
};

struct NetworkConfig {
  std::size_t frames = 8;
  std::size_t classes = 4;
  std::size_t image_channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 1;
  std::size_t pem_reduction = 4;
  MemoryInit memory_init = MemoryInit::last_difference;
  std::size_t temporal_kernel = 3;
  double shift_fold = 0.125;
  // pixel statistics of the default generator settings
  double input_mean = 0.317;
  double input_std = 0.160;
  std::vector<BlockSpec> blocks;
  TdConfig td;
  std::uint64_t seed = 0;

  // Four blocks 16 -> 32 -> 32 -> 64 with PEM everywhere, depthwise TM, and
  // TD regularization on the last three blocks.
  static NetworkConfig desk_default();

  std::vector<int> block_ids() const;
  // Copies the td_regularized flags into td.regularized_blocks.
  void sync_td_blocks();
  // Throws std::invalid_argument describing the first inconsistency.
  void validate() const;
};

template <typename S>
struct BlockParams {
  std::optional<BasicPemParams<S>> pem;
  BasicTensor<S> tm;        // [C_in, k_t] for depthwise TM
  BasicTensor<S> conv1;     // [mid, C_in, 1, 1]
  BasicTensor<S> conv1_bias;
  BasicTensor<S> conv2;     // [mid, mid, 3, 3]
  BasicTensor<S> conv2_bias;
  BasicTensor<S> conv3;     // [C_out, mid, 1, 1]
  BasicTensor<S> conv3_bias;
  BasicTensor<S> shortcut;  // [C_out, C_in, 1, 1] when shapes change
};

template <typename S>
struct NetworkParams {
  BasicTensor<S> stem;  // [C_stem, C_img, 3, 3]
  BasicTensor<S> stem_bias;
  std::vector<BlockParams<S>> blocks;
  BasicTensor<S> head_weight;  // [K, C_last]
  BasicTensor<S> head_bias;    // [K]

  // Stable names used for checkpoints and optimizer state.
  std::vector<std::pair<std::string, BasicTensor<S>>> named() const;
  std::size_t count() const;
};

// He-normal convolutions, zero final ResConv conv, zero biases, shift-like TM
// weights, uniform PEM and head weights. Deterministic in cfg.seed.
NetworkParams<float> init_params(const NetworkConfig& cfg);

// Closed-form parameter count for a configuration.
std::size_t expected_param_count(const NetworkConfig& cfg);

template <typename To, typename From>
NetworkParams<To> convert_params(const NetworkParams<From>& params);

NamedTensors to_records(const NetworkParams<float>& params);
// Rebuilds parameters for cfg from records; throws FormatError naming the
// first missing, extra or misshapen tensor.
NetworkParams<float> from_records(const NetworkConfig& cfg, const NamedTensors& records);

void save_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params);
NetworkParams<float> load_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg);

template <typename S>
struct BlockOutput {
  BasicTensor<S> output;                     // [N,T,C_out,H',W']
  std::optional<BasicTensor<S>> diversity;   // Z when td_regularized
  std::optional<BasicTensor<S>> enhancement; // A [N,T,C_in] when use_pem
  BasicTensor<S> enhanced;                   // PEM output U (or X without PEM)
};

template <typename S>
BlockOutput<S> block_forward(const BasicTensor<S>& x, const BlockSpec& spec, const BlockParams<S>& params,
                             const NetworkConfig& cfg);

template <typename S>
struct NetworkOutput {
  BasicTensor<S> logits;  // [N,K]
  std::map<int, BasicTensor<S>> z_by_block;
  std::map<int, BasicTensor<S>> enhancement_by_block;
};

// clips [N,T,C_img,H,W]
template <typename S>
NetworkOutput<S> network_forward(const BasicTensor<S>& clips, const NetworkConfig& cfg,
                                 const NetworkParams<S>& params);

}  // namespace tdrl
