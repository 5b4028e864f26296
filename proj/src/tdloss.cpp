#include "tdrl/tdloss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "tdrl/ops.hpp"

namespace tdrl {

void TdConfig::validate(const std::vector<int>& block_ids) const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("td.ratio must lie in [0, 1]");
  if (!(eps > 0.0)) throw std::invalid_argument("td.eps must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("td.lambda must be >= 0");
  for (int id : regularized_blocks) {
    if (std::find(block_ids.begin(), block_ids.end(), id) == block_ids.end()) {
      throw std::invalid_argument("td: regularized block " + std::to_string(id) + " does not exist");
    }
  }
}

std::size_t TdConfig::regularized_channels(std::size_t channels) const {
  // small tolerance so that e.g. 0.5 * 16 is not floored to 7
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(channels) + 1e-9));
}

double LossBreakdown::td_sum() const {
  double s = 0.0;
  for (const auto& [id, v] : td_terms) s += v;
  return s;
}

template <typename S>
double cosine_sim(std::span<const S> u, std::span<const S> v, double eps) {
  if (u.size() != v.size() || u.empty()) throw ShapeError("cosine_sim: vectors must have equal nonzero length");
  long double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<long double>(u[i]) * v[i];
    uu += static_cast<long double>(u[i]) * u[i];
    vv += static_cast<long double>(v[i]) * v[i];
  }
  const long double nu = std::max<long double>(std::sqrt(uu), eps);
  const long double nv = std::max<long double>(std::sqrt(vv), eps);
  return std::clamp(static_cast<double>(uv / (nu * nv)), -1.0, 1.0);
}

namespace {

// Gram matrix of the T frame maps of one (n, c) pair and the clamped norms.
template <typename S>
void frame_gram(const S* base, std::size_t T, std::size_t frame_stride, std::size_t plane, double eps,
                std::vector<double>& gram, std::vector<double>& norm) {
  for (std::size_t i = 0; i < T; ++i) {
    const S* zi = base + i * frame_stride;
    for (std::size_t j = i; j < T; ++j) {
      const S* zj = base + j * frame_stride;
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += static_cast<double>(zi[p]) * static_cast<double>(zj[p]);
      gram[i * T + j] = acc;
      gram[j * T + i] = acc;
    }
  }
  for (std::size_t i = 0; i < T; ++i) norm[i] = std::max(std::sqrt(gram[i * T + i]), eps);
}

template <typename S>
void check_features(const BasicTensor<S>& z, std::size_t channels, const char* op) {
  if (z.rank() != 5) throw ShapeError(std::string(op) + ": features must be [N,T,C,H,W], got " + shape_str(z.shape()));
  if (z.dim(1) < 2) throw ShapeError(std::string(op) + ": need T >= 2");
  if (channels > z.dim(2)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(channels) + " regularized channels exceed C=" +
                     std::to_string(z.dim(2)));
  }
}

}  // namespace

template <typename S>
BasicTensor<S> td_loss_channels(const BasicTensor<S>& z, std::size_t channels, double eps) {
  check_features(z, channels, "td_loss");
  const std::size_t N = z.dim(0), T = z.dim(1), C = z.dim(2);
  const std::size_t plane = z.dim(3) * z.dim(4);
  const std::size_t frame_stride = C * plane;
  const double pairs = static_cast<double>(T * (T - 1));

  std::vector<double> gram(T * T), norm(T);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      frame_gram(z.data().data() + (n * T * C + c) * plane, T, frame_stride, plane, eps, gram, norm);
      double acc = 0.0;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j)
          if (i != j) acc += std::clamp(gram[i * T + j] / (norm[i] * norm[j]), -1.0, 1.0);
      total += acc / pairs;
    }
  total /= static_cast<double>(N);

  return make_result<S>(
      "td_loss", Shape{1}, std::vector<S>{static_cast<S>(total)}, {z}, [=](std::span<const S> g) {
        std::span<S> gz = grad_sink(z);
        const S* zd = z.data().data();
        std::vector<double> gram(T * T), norm(T), coef(T);
        // d/dz_i of sum_{ordered i!=j} cos_ij = 2 sum_{j != i} [z_j/(n_i n_j) - cos_ij z_i / n_i^2]
        // A frame whose norm is below eps gets no gradient: the clamped cosine is
        // linear there with slope 1/eps, which would swamp everything else.
        const double scale = static_cast<double>(g[0]) * 2.0 / (pairs * static_cast<double>(N));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (n * T * C + c) * plane;
            frame_gram(zd + base, T, frame_stride, plane, eps, gram, norm);
            for (std::size_t i = 0; i < T; ++i) {
              S* gi = gz.data() + base + i * frame_stride;
              if (std::sqrt(gram[i * T + i]) < eps) continue;
              double self = 0.0;
              for (std::size_t j = 0; j < T; ++j) {
                if (j == i) continue;
                coef[j] = scale / (norm[i] * norm[j]);
                self += gram[i * T + j] / (norm[i] * norm[j]) / (norm[i] * norm[i]);
              }
              self *= scale;
              const S* zi = zd + base + i * frame_stride;
              for (std::size_t p = 0; p < plane; ++p) {
                double acc = -self * static_cast<double>(zi[p]);
                for (std::size_t j = 0; j < T; ++j) {
                  if (j != i) acc += coef[j] * static_cast<double>(zd[base + j * frame_stride + p]);
                }
                gi[p] += static_cast<S>(acc);
              }
            }
          }
      });
}

template <typename S>
std::vector<double> frame_similarity_matrix(const BasicTensor<S>& z, std::size_t channels, double eps) {
  check_features(z, channels, "frame_similarity_matrix");
  const std::size_t N = z.dim(0), T = z.dim(1), C = z.dim(2);
  const std::size_t plane = z.dim(3) * z.dim(4);
  std::vector<double> out(T * T, 0.0);
  if (channels == 0) return out;
  std::vector<double> gram(T * T), norm(T);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      frame_gram(z.data().data() + (n * T * C + c) * plane, T, C * plane, plane, eps, gram, norm);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) out[i * T + j] += std::clamp(gram[i * T + j] / (norm[i] * norm[j]), -1.0, 1.0);
    }
  for (double& v : out) v /= static_cast<double>(N * channels);
  return out;
}

template <typename S>
double mean_pairwise_cosine(const BasicTensor<S>& z, std::size_t channels, double eps) {
  if (channels == 0) return 0.0;
  NoGradGuard guard;
  return static_cast<double>(td_loss_channels(z, channels, eps).item()) / static_cast<double>(channels);
}

template <typename S>
TotalLoss<S> total_loss(const BasicTensor<S>& logits, const std::vector<int>& labels,
                        const std::map<int, BasicTensor<S>>& z_by_block, const TdConfig& cfg) {
  TotalLoss<S> out;
  BasicTensor<S> ce = softmax_cross_entropy(logits, labels);
  out.breakdown.cross_entropy = static_cast<double>(ce.item());

  std::vector<BasicTensor<S>> terms;
  for (int id : cfg.regularized_blocks) {
    auto it = z_by_block.find(id);
    if (it == z_by_block.end()) {
      throw std::invalid_argument("total_loss: no features captured for regularized block " + std::to_string(id));
    }
    if (cfg.lambda == 0.0) {
      NoGradGuard guard;
      out.breakdown.td_terms[id] = static_cast<double>(td_loss(it->second, cfg).item());
    } else {
      BasicTensor<S> term = td_loss(it->second, cfg);
      out.breakdown.td_terms[id] = static_cast<double>(term.item());
      terms.push_back(term);
    }
  }

  if (terms.empty()) {
    out.loss = ce;
  } else {
    BasicTensor<S> reg = terms.size() == 1 ? terms.front() : sum(concat(terms, 0));
    out.loss = add(ce, scale(reg, static_cast<S>(cfg.lambda)));
  }
  out.breakdown.total = static_cast<double>(out.loss.item());
  return out;
}

#define TDRL_INSTANTIATE_TD(S)                                                                              \
  template double cosine_sim(std::span<const S>, std::span<const S>, double);                               \
  template BasicTensor<S> td_loss_channels(const BasicTensor<S>&, std::size_t, double);                     \
  template std::vector<double> frame_similarity_matrix(const BasicTensor<S>&, std::size_t, double);         \
  template double mean_pairwise_cosine(const BasicTensor<S>&, std::size_t, double);                         \
  template TotalLoss<S> total_loss(const BasicTensor<S>&, const std::vector<int>&,                          \
                                   const std::map<int, BasicTensor<S>>&, const TdConfig&);

TDRL_INSTANTIATE_TD(float)
TDRL_INSTANTIATE_TD(double)

#undef TDRL_INSTANTIATE_TD

}  // namespace tdrl
