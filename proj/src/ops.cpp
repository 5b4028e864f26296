#include "tdrl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Core>

namespace tdrl {

namespace {

template <typename S>
void require_rank(const BasicTensor<S>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

template <typename S>
void require_same_shape(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Valid output range [lo, hi) so that 0 <= o*stride - pad + k < extent.
struct Range {
  std::size_t lo;
  std::size_t hi;
};

Range valid_range(std::size_t out_extent, std::size_t in_extent, std::size_t stride,
                  std::size_t pad, std::size_t k) {
  const long long p = static_cast<long long>(pad) - static_cast<long long>(k);
  const long long s = static_cast<long long>(stride);
  long long lo = p > 0 ? (p + s - 1) / s : 0;
  long long hi_incl = (static_cast<long long>(in_extent) - 1 + p);
  long long hi = hi_incl < 0 ? 0 : hi_incl / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out_extent));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename S>
S dot(const S* a, const S* b, std::size_t n) {
  S acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename S>
void axpy(S alpha, const S* x, S* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct ConvGeometry {
  std::size_t channels, height, width, k, stride, pad, out_h, out_w;
};

// cols [C*k*k, Ho*Wo]; row (c, ky, kx) holds the input pixel each output reads
// through that tap, or 0 in the padding.
template <typename S>
void im2col(const S* x, const ConvGeometry& g, S* cols) {
  const std::size_t out_plane = g.out_h * g.out_w;
  for (std::size_t ky = 0; ky < g.k; ++ky) {
    const Range rows = valid_range(g.out_h, g.height, g.stride, g.pad, ky);
    for (std::size_t kx = 0; kx < g.k; ++kx) {
      const Range cs = valid_range(g.out_w, g.width, g.stride, g.pad, kx);
      for (std::size_t c = 0; c < g.channels; ++c) {
        S* row = cols + ((c * g.k + ky) * g.k + kx) * out_plane;
        const S* xp = x + c * g.height * g.width;
        std::fill(row, row + out_plane, S(0));
        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
          const S* xrow = xp + (oy * g.stride + ky - g.pad) * g.width + kx - g.pad;
          S* orow = row + oy * g.out_w;
          for (std::size_t ox = cs.lo; ox < cs.hi; ++ox) orow[ox] = xrow[ox * g.stride];
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the input.
template <typename S>
void col2im_add(const S* cols, const ConvGeometry& g, S* x) {
  const std::size_t out_plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    S* xp = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const Range rows = valid_range(g.out_h, g.height, g.stride, g.pad, ky);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const Range cs = valid_range(g.out_w, g.width, g.stride, g.pad, kx);
        const S* row = cols + ((c * g.k + ky) * g.k + kx) * out_plane;
        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
          S* xrow = xp + (oy * g.stride + ky - g.pad) * g.width + kx - g.pad;
          const S* grow = row + oy * g.out_w;
          for (std::size_t ox = cs.lo; ox < cs.hi; ++ox) xrow[ox * g.stride] += grow[ox];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& input, const BasicTensor<S>& weight, std::size_t stride,
                      std::size_t pad, const std::optional<BasicTensor<S>>& bias) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match " + std::to_string(Cout) +
                     " output channels");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (H + 2 * pad < k || W + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t in_plane = H * W, out_plane = Ho * Wo;

  const std::size_t patch = Cin * k * k;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  const ConvGeometry geo{Cin, H, W, k, stride, pad, Ho, Wo};

  // out_n [Cout, P] = W [Cout, Cin*k*k] * cols_n [Cin*k*k, P]
  std::vector<S> out(N * Cout * out_plane);
  std::vector<S> cols(pointwise ? 0 : patch * out_plane);
  const ConstMatMap<S> wm(weight.data().data(), Cout, patch);
  for (std::size_t n = 0; n < N; ++n) {
    const S* xn = input.data().data() + n * Cin * in_plane;
    if (!pointwise) im2col(xn, geo, cols.data());
    const ConstMatMap<S> cm(pointwise ? xn : cols.data(), patch, out_plane);
    MatMap<S> om(out.data() + n * Cout * out_plane, Cout, out_plane);
    om.noalias() = wm * cm;
    if (bias) om.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias->data().data(), Cout);
  }

  std::vector<BasicTensor<S>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const BasicTensor<S> b = bias ? *bias : BasicTensor<S>();
  return make_result<S>(
      "conv2d", Shape{N, Cout, Ho, Wo}, std::move(out), inputs,
      [=](std::span<const S> g) {
        std::span<S> gx = grad_sink(input);
        std::span<S> gw = grad_sink(weight);
        if (b.defined()) {
          std::span<S> gb = grad_sink(b);
          for (std::size_t n = 0; n < N && !gb.empty(); ++n)
            for (std::size_t c = 0; c < Cout; ++c) {
              const S* gp = g.data() + (n * Cout + c) * out_plane;
              double acc = 0.0;
              for (std::size_t p = 0; p < out_plane; ++p) acc += static_cast<double>(gp[p]);
              gb[c] += static_cast<S>(acc);
            }
        }
        const ConstMatMap<S> wm(weight.data().data(), Cout, patch);
        std::vector<S> cols(pointwise ? 0 : patch * out_plane);
        std::vector<S> gcols(pointwise ? 0 : patch * out_plane);
        for (std::size_t n = 0; n < N; ++n) {
          const S* xn = input.data().data() + n * Cin * in_plane;
          const ConstMatMap<S> gm(g.data() + n * Cout * out_plane, Cout, out_plane);
          if (!gw.empty()) {
            if (!pointwise) im2col(xn, geo, cols.data());
            const ConstMatMap<S> cm(pointwise ? xn : cols.data(), patch, out_plane);
            MatMap<S>(gw.data(), Cout, patch).noalias() += gm * cm.transpose();
          }
          if (!gx.empty()) {
            S* gxn = gx.data() + n * Cin * in_plane;
            if (pointwise) {
              MatMap<S>(gxn, Cin, in_plane).noalias() += wm.transpose() * gm;
            } else {
              MatMap<S>(gcols.data(), patch, out_plane).noalias() = wm.transpose() * gm;
              col2im_add(gcols.data(), geo, gxn);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// temporal operators

template <typename S>
BasicTensor<S> depthwise_temporal_conv(const BasicTensor<S>& input, const BasicTensor<S>& weight) {
  require_rank(input, 5, "depthwise_temporal_conv", "input");
  require_rank(weight, 2, "depthwise_temporal_conv", "weight");
  const std::size_t N = input.dim(0), T = input.dim(1), C = input.dim(2);
  const std::size_t plane = input.dim(3) * input.dim(4);
  const std::size_t kt = weight.dim(1);
  if (weight.dim(0) != C) {
    throw ShapeError("depthwise_temporal_conv: weight " + shape_str(weight.shape()) +
                     " does not match channels of input " + shape_str(input.shape()));
  }
  if (kt % 2 == 0) throw ShapeError("depthwise_temporal_conv: temporal kernel must be odd");
  if (kt > 2 * T + 1) {
    throw ShapeError("depthwise_temporal_conv: temporal kernel " + std::to_string(kt) +
                     " exceeds 2T+1 for T=" + std::to_string(T));
  }
  const long long half = static_cast<long long>(kt / 2);
  const S* x = input.data().data();
  const S* w = weight.data().data();
  std::vector<S> out(input.numel(), S(0));
  auto frame = [=](std::size_t n, std::size_t t, std::size_t c) { return ((n * T + t) * C + c) * plane; };

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j < kt; ++j) {
          const long long src = static_cast<long long>(t) + static_cast<long long>(j) - half;
          if (src < 0 || src >= static_cast<long long>(T)) continue;
          axpy(w[c * kt + j], x + frame(n, static_cast<std::size_t>(src), c), out.data() + frame(n, t, c),
               plane);
        }

  return make_result<S>("depthwise_temporal_conv", input.shape(), std::move(out), {input, weight},
                        [=](std::span<const S> g) {
                          std::span<S> gx = grad_sink(input);
                          std::span<S> gw = grad_sink(weight);
                          const S* xd = input.data().data();
                          const S* wd = weight.data().data();
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t t = 0; t < T; ++t)
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t j = 0; j < kt; ++j) {
                                  const long long src =
                                      static_cast<long long>(t) + static_cast<long long>(j) - half;
                                  if (src < 0 || src >= static_cast<long long>(T)) continue;
                                  const std::size_t from = frame(n, static_cast<std::size_t>(src), c);
                                  const S* go = g.data() + frame(n, t, c);
                                  if (!gx.empty()) axpy(wd[c * kt + j], go, gx.data() + from, plane);
                                  if (!gw.empty()) gw[c * kt + j] += dot(go, xd + from, plane);
                                }
                        });
}

template <typename S>
BasicTensor<S> temporal_shift(const BasicTensor<S>& input, double fold_fraction) {
  require_rank(input, 5, "temporal_shift", "input");
  if (!(fold_fraction > 0.0 && fold_fraction <= 0.5)) {
    throw std::invalid_argument("temporal_shift: fold fraction must lie in (0, 0.5]");
  }
  const std::size_t N = input.dim(0), T = input.dim(1), C = input.dim(2);
  const std::size_t plane = input.dim(3) * input.dim(4);
  const auto fold = static_cast<std::size_t>(std::floor(static_cast<double>(C) * fold_fraction));

  // source frame for (t, c), or -1 for a zero-filled slot
  auto source = [=](std::size_t t, std::size_t c) -> long long {
    if (c < fold) return static_cast<long long>(t) - 1;
    if (c < 2 * fold) return t + 1 < T ? static_cast<long long>(t + 1) : -1;
    return static_cast<long long>(t);
  };
  const S* x = input.data().data();
  std::vector<S> out(input.numel(), S(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        const long long src = source(t, c);
        if (src < 0) continue;
        std::copy_n(x + ((n * T + static_cast<std::size_t>(src)) * C + c) * plane, plane,
                    out.data() + ((n * T + t) * C + c) * plane);
      }
  return make_result<S>("temporal_shift", input.shape(), std::move(out), {input},
                        [=](std::span<const S> g) {
                          std::span<S> gx = grad_sink(input);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t t = 0; t < T; ++t)
                              for (std::size_t c = 0; c < C; ++c) {
                                const long long src = source(t, c);
                                if (src < 0) continue;
                                S* dst = gx.data() + ((n * T + static_cast<std::size_t>(src)) * C + c) * plane;
                                const S* go = g.data() + ((n * T + t) * C + c) * plane;
                                for (std::size_t i = 0; i < plane; ++i) dst[i] += go[i];
                              }
                        });
}

template <typename S>
BasicTensor<S> global_avg_pool_spatial(const BasicTensor<S>& input) {
  require_rank(input, 5, "global_avg_pool_spatial", "input");
  const std::size_t N = input.dim(0), T = input.dim(1), C = input.dim(2);
  const std::size_t plane = input.dim(3) * input.dim(4);
  const std::size_t maps = N * T * C;
  const S* x = input.data().data();
  std::vector<S> out(maps);
  for (std::size_t m = 0; m < maps; ++m) {
    double acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[m * plane + i];
    out[m] = static_cast<S>(acc / static_cast<double>(plane));
  }
  return make_result<S>("global_avg_pool_spatial", Shape{N, T, C}, std::move(out), {input},
                        [=](std::span<const S> g) {
                          std::span<S> gx = grad_sink(input);
                          const S inv = S(1) / static_cast<S>(plane);
                          for (std::size_t m = 0; m < maps; ++m) {
                            const S v = g[m] * inv;
                            S* dst = gx.data() + m * plane;
                            for (std::size_t i = 0; i < plane; ++i) dst[i] += v;
                          }
                        });
}

// ---------------------------------------------------------------------------
// dense

template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& input, const BasicTensor<S>& weight,
                      const std::optional<BasicTensor<S>>& bias) {
  require_rank(weight, 2, "linear", "weight");
  const std::size_t Dout = weight.dim(0), Din = weight.dim(1);
  if (input.shape().back() != Din) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " trailing dim does not match weight " +
                     shape_str(weight.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != Dout)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = input.numel() / Din;
  Shape out_shape = input.shape();
  out_shape.back() = Dout;
  const S* x = input.data().data();
  const S* w = weight.data().data();
  std::vector<S> out(rows * Dout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < Dout; ++o) {
      out[r * Dout + o] = dot(w + o * Din, x + r * Din, Din) + (bias ? bias->data()[o] : S(0));
    }
  BasicTensor<S> b = bias ? *bias : BasicTensor<S>();
  return make_result<S>("linear", std::move(out_shape), std::move(out), {input, weight, b},
                        [=](std::span<const S> g) {
                          std::span<S> gx = grad_sink(input);
                          std::span<S> gw = grad_sink(weight);
                          std::span<S> gb = grad_sink(b);
                          const S* xd = input.data().data();
                          const S* wd = weight.data().data();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t o = 0; o < Dout; ++o) {
                              const S go = g[r * Dout + o];
                              if (!gx.empty()) axpy(go, wd + o * Din, gx.data() + r * Din, Din);
                              if (!gw.empty()) axpy(go, xd + r * Din, gw.data() + o * Din, Din);
                              if (!gb.empty()) gb[o] += go;
                            }
                        });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& input) {
  std::vector<S> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // split on sign so exp never overflows
    const S v = x[i];
    if (v >= 0) {
      out[i] = S(1) / (S(1) + std::exp(-v));
    } else {
      const S e = std::exp(v);
      out[i] = e / (S(1) + e);
    }
  }
  std::vector<S> y = out;
  return make_result<S>("sigmoid", input.shape(), std::move(out), {input},
                        [=, y = std::move(y)](std::span<const S> g) {
                          std::span<S> gx = grad_sink(input);
                          for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
                        });
}

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& input) {
  std::vector<S> out(input.data().begin(), input.data().end());
  for (S& v : out) v = v > 0 ? v : S(0);
  return make_result<S>("relu", input.shape(), std::move(out), {input}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    const auto x = input.data();
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] > 0 ? g[i] : S(0);
  });
}

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<S>("add", a.shape(), std::move(out), {a, b}, [=](std::span<const S> g) {
    for (const auto& t : {a, b}) {
      std::span<S> gt = grad_sink(t);
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
    }
  });
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "sub");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<S>("sub", a.shape(), std::move(out), {a, b}, [=](std::span<const S> g) {
    std::span<S> ga = grad_sink(a);
    std::span<S> gb = grad_sink(b);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<S>("mul", a.shape(), std::move(out), {a, b}, [=](std::span<const S> g) {
    std::span<S> ga = grad_sink(a);
    std::span<S> gb = grad_sink(b);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.data()[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.data()[i];
  });
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (S& v : out) v *= factor;
  return make_result<S>("scale", a.shape(), std::move(out), {a}, [=](std::span<const S> g) {
    std::span<S> ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename S>
BasicTensor<S> channel_scale(const BasicTensor<S>& input, const BasicTensor<S>& scale) {
  const Shape& xs = input.shape();
  const Shape& ss = scale.shape();
  if (ss.size() > xs.size() || !std::equal(ss.begin(), ss.end(), xs.begin())) {
    throw ShapeError("channel_scale: scale " + shape_str(ss) + " is not a leading prefix of input " +
                     shape_str(xs));
  }
  const std::size_t groups = scale.numel();
  const std::size_t inner = input.numel() / groups;
  const S* x = input.data().data();
  const S* s = scale.data().data();
  std::vector<S> out(input.numel());
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t i = 0; i < inner; ++i) out[gi * inner + i] = x[gi * inner + i] * s[gi];
  return make_result<S>("channel_scale", xs, std::move(out), {input, scale}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    std::span<S> gs = grad_sink(scale);
    const S* xd = input.data().data();
    const S* sd = scale.data().data();
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const S* go = g.data() + gi * inner;
      if (!gx.empty()) axpy(sd[gi], go, gx.data() + gi * inner, inner);
      if (!gs.empty()) gs[gi] += dot(go, xd + gi * inner, inner);
    }
  });
}

// ---------------------------------------------------------------------------
// structural

namespace {

// outer = product of dims before axis, inner = product after axis
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename S>
BasicTensor<S> concat(const std::vector<BasicTensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) ok = i == axis || ps[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(ps) +
                       " differ outside axis " + std::to_string(axis));
    }
    out_shape[axis] += ps[axis];
  }
  const AxisSplit total = split_at(out_shape, axis);
  std::vector<S> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * total.inner;
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk,
                  out.data() + o * total.extent * total.inner + offset * total.inner);
    }
    offset += p.dim(axis);
  }
  return make_result<S>("concat", std::move(out_shape), std::move(out), parts, [=](std::span<const S> g) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      std::span<S> gp = grad_sink(parts[k]);
      if (gp.empty()) continue;
      const std::size_t chunk = parts[k].dim(axis) * total.inner;
      for (std::size_t o = 0; o < total.outer; ++o) {
        const S* src = g.data() + o * total.extent * total.inner + offsets[k] * total.inner;
        S* dst = gp.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  std::vector<S> out(input.data().begin(), input.data().end());
  return make_result<S>("reshape", std::move(shape), std::move(out), {input}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

template <typename S>
BasicTensor<S> stack(const std::vector<BasicTensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<BasicTensor<S>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (axis > p.rank()) throw ShapeError("stack: axis out of range for " + shape_str(p.shape()));
    Shape s = p.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, axis);
}

template <typename S>
BasicTensor<S> narrow(const BasicTensor<S>& input, std::size_t axis, std::size_t start,
                      std::size_t length) {
  if (axis >= input.rank() || length == 0 || start + length > input.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(input.shape()));
  }
  const AxisSplit sp = split_at(input.shape(), axis);
  Shape out_shape = input.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * sp.inner;
  std::vector<S> out(sp.outer * chunk);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(input.data().data() + (o * sp.extent + start) * sp.inner, chunk, out.data() + o * chunk);
  }
  return make_result<S>("narrow", std::move(out_shape), std::move(out), {input}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      S* dst = gx.data() + (o * sp.extent + start) * sp.inner;
      const S* src = g.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <typename S>
BasicTensor<S> select(const BasicTensor<S>& input, std::size_t axis, std::size_t index) {
  if (input.rank() < 2) throw ShapeError("select: needs rank >= 2, got " + shape_str(input.shape()));
  BasicTensor<S> n = narrow(input, axis, index, 1);
  Shape s = input.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(n, std::move(s));
}

template <typename S>
BasicTensor<S> mean_axis(const BasicTensor<S>& input, std::size_t axis) {
  if (axis >= input.rank() || input.rank() < 2) {
    throw ShapeError("mean_axis: invalid axis " + std::to_string(axis) + " for " + shape_str(input.shape()));
  }
  const AxisSplit sp = split_at(input.shape(), axis);
  Shape out_shape = input.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> acc(sp.outer * sp.inner, 0.0);
  const S inv = S(1) / static_cast<S>(sp.extent);
  const S* x = input.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) acc[o * sp.inner + i] += x[(o * sp.extent + e) * sp.inner + i];
  std::vector<S> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<S>(acc[i] / static_cast<double>(sp.extent));
  return make_result<S>("mean_axis", std::move(out_shape), std::move(out), {input}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i] * inv;
  });
}

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& input) {
  double acc = 0;
  for (S v : input.data()) acc += v;
  return make_result<S>("sum", Shape{1}, std::vector<S>{static_cast<S>(acc)}, {input}, [=](std::span<const S> g) {
    std::span<S> gx = grad_sink(input);
    for (S& v : gx) v += g[0];
  });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& input) {
  return scale(sum(input), S(1) / static_cast<S>(input.numel()));
}

// ---------------------------------------------------------------------------
// loss

template <typename S>
BasicTensor<S> softmax_cross_entropy(const BasicTensor<S>& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(N));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(K) + ")");
    }
  }
  const S* z = logits.data().data();
  std::vector<S> prob(N * K);
  S loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const S* row = z + n * K;
    const S mx = *std::max_element(row, row + K);
    S denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
    const S log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - mx - log_denom);
    loss -= row[labels[n]] - mx - log_denom;
  }
  loss /= static_cast<S>(N);
  return make_result<S>("softmax_cross_entropy", Shape{1}, std::vector<S>{loss}, {logits},
                        [=, prob = std::move(prob)](std::span<const S> g) {
                          std::span<S> gz = grad_sink(logits);
                          const S f = g[0] / static_cast<S>(N);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t k = 0; k < K; ++k) {
                              const S onehot = static_cast<std::size_t>(labels[n]) == k ? S(1) : S(0);
                              gz[n * K + k] += f * (prob[n * K + k] - onehot);
                            }
                        });
}

#define TDRL_INSTANTIATE_OPS(S)                                                                           \
  template BasicTensor<S> conv2d(const BasicTensor<S>&, const BasicTensor<S>&, std::size_t, std::size_t,        \
                                 const std::optional<BasicTensor<S>>&);                                       \
  template BasicTensor<S> depthwise_temporal_conv(const BasicTensor<S>&, const BasicTensor<S>&);          \
  template BasicTensor<S> temporal_shift(const BasicTensor<S>&, double);                                  \
  template BasicTensor<S> global_avg_pool_spatial(const BasicTensor<S>&);                                 \
  template BasicTensor<S> linear(const BasicTensor<S>&, const BasicTensor<S>&,                           \
                                 const std::optional<BasicTensor<S>>&);                                   \
  template BasicTensor<S> sigmoid(const BasicTensor<S>&);                                                 \
  template BasicTensor<S> relu(const BasicTensor<S>&);                                                    \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);                              \
  template BasicTensor<S> sub(const BasicTensor<S>&, const BasicTensor<S>&);                              \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);                              \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                                \
  template BasicTensor<S> channel_scale(const BasicTensor<S>&, const BasicTensor<S>&);                    \
  template BasicTensor<S> concat(const std::vector<BasicTensor<S>>&, std::size_t);                        \
  template BasicTensor<S> stack(const std::vector<BasicTensor<S>>&, std::size_t);                         \
  template BasicTensor<S> narrow(const BasicTensor<S>&, std::size_t, std::size_t, std::size_t);           \
  template BasicTensor<S> select(const BasicTensor<S>&, std::size_t, std::size_t);                        \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                                          \
  template BasicTensor<S> mean_axis(const BasicTensor<S>&, std::size_t);                                  \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                                     \
  template BasicTensor<S> mean(const BasicTensor<S>&);                                                    \
  template BasicTensor<S> softmax_cross_entropy(const BasicTensor<S>&, const std::vector<int>&);

TDRL_INSTANTIATE_OPS(float)
TDRL_INSTANTIATE_OPS(double)

#undef TDRL_INSTANTIATE_OPS

}  // namespace tdrl
