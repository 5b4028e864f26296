#pragma once

// Differentiable operators. All functions are defined for float and double.
// Video activations use the [N, T, C, H, W] layout; per-frame 2-D operators
// take [N, C, H, W].

#include <cstddef>
#include <optional>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

// Cross-correlation with zero padding. input [N,C_in,H,W], weight [C_out,C_in,k,k],
// optional bias [C_out].
template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                      std::size_t stride = 1, std::size_t pad = 0,
                      const std::optional<BasicTensor<S>>& bias = std::nullopt);

// Per-channel 1-D convolution along T with zero padding (k_t - 1) / 2.
// input [N,T,C,H,W], weight [C,k_t], k_t odd.
template <typename S>
BasicTensor<S> depthwise_temporal_conv(const BasicTensor<S>& input, const BasicTensor<S>& weight);

// Shifts the first floor(C*fold) channels one frame forward in time and the
// next floor(C*fold) one frame backward; vacated frames are zero.
template <typename S>
BasicTensor<S> temporal_shift(const BasicTensor<S>& input, double fold_fraction);

// [N,T,C,H,W] -> [N,T,C], mean over the spatial plane.
template <typename S>
BasicTensor<S> global_avg_pool_spatial(const BasicTensor<S>& input);

// Affine map on the trailing axis. weight [D_out,D_in], bias [D_out].
template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                      const std::optional<BasicTensor<S>>& bias = std::nullopt);

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& input);
template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& input);

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor);

// Multiplies input by scale broadcast over the trailing axes. scale's shape
// must be a prefix of input's shape, e.g. [N,T,C] against [N,T,C,H,W].
template <typename S>
BasicTensor<S> channel_scale(const BasicTensor<S>& input, const BasicTensor<S>& scale);

template <typename S>
BasicTensor<S> concat(const std::vector<BasicTensor<S>>& parts, std::size_t axis);

// Inserts a new axis and stacks equally shaped parts along it.
template <typename S>
BasicTensor<S> stack(const std::vector<BasicTensor<S>>& parts, std::size_t axis);

// Sub-range [start, start+length) along axis; the axis is kept.
template <typename S>
BasicTensor<S> narrow(const BasicTensor<S>& input, std::size_t axis, std::size_t start,
                      std::size_t length);

// Single index along axis; the axis is removed.
template <typename S>
BasicTensor<S> select(const BasicTensor<S>& input, std::size_t axis, std::size_t index);

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& input, Shape shape);

// Mean over one axis; the axis is removed.
template <typename S>
BasicTensor<S> mean_axis(const BasicTensor<S>& input, std::size_t axis);

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& input);
template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& input);

// Mean over the batch of -log softmax(logits)[label]. logits [N,K].
template <typename S>
BasicTensor<S> softmax_cross_entropy(const BasicTensor<S>& logits, const std::vector<int>& labels);

}  // namespace tdrl
