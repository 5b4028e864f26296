#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tdrl/ops.hpp"
#include "tdrl/tdloss.hpp"

using namespace tdrl;

namespace {

// Direct definition: per sample, per channel, mean over ordered pairs.
double td_oracle(const Tensor64& z, std::size_t channels) {
  const std::size_t N = z.dim(0), T = z.dim(1), C = z.dim(2), P = z.dim(3) * z.dim(4);
  long double total = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      long double acc = 0;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          if (i == j) continue;
          long double uv = 0, uu = 0, vv = 0;
          for (std::size_t p = 0; p < P; ++p) {
            const long double a = z.data()[((n * T + i) * C + c) * P + p];
            const long double b = z.data()[((n * T + j) * C + c) * P + p];
            uv += a * b, uu += a * a, vv += b * b;
          }
          acc += uv / (std::sqrt(uu) * std::sqrt(vv));
        }
      total += acc / static_cast<long double>(T * (T - 1));
    }
  return static_cast<double>(total / N);
}

Tensor to_float(const Tensor64& z) {
  return Tensor(z.shape(), std::vector<float>(z.data().begin(), z.data().end()));
}

Tensor64 permute_frames(const Tensor64& z, const std::vector<std::size_t>& perm) {
  const std::size_t N = z.dim(0), T = z.dim(1), F = z.numel() / (N * T);
  Tensor64 out(z.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(z.data().begin() + (n * T + perm[t]) * F, F, out.mutable_data().begin() + (n * T + t) * F);
  return out;
}

}  // namespace

TEST_CASE("td_loss matches the direct definition") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = 1 + trial % 3, T = 2 + trial % 5, C = 1 + trial % 6, H = 1 + trial % 3, W = 1 + trial % 4;
    const Tensor64 z = Tensor64::randn({N, T, C, H, W}, rng, 1.0);
    for (std::size_t ch = 0; ch <= C; ++ch) {
      CHECK(td_loss_channels(z, ch, 1e-8).item() == doctest::Approx(td_oracle(z, ch)).epsilon(1e-10));
    }
  }
}

TEST_CASE("identical nonzero frames give C_mu") {
  std::mt19937_64 rng(2);
  const std::size_t N = 3, T = 8, C = 16, HW = 9;
  const Tensor64 frame = Tensor64::randn({N, 1, C, 3, 3}, rng, 1.0);
  Tensor64 z({N, T, C, 3, 3});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(frame.data().begin() + n * C * HW, C * HW, z.mutable_data().begin() + (n * T + t) * C * HW);
  TdConfig cfg;
  cfg.ratio = 0.5;
  CHECK(std::abs(td_loss(z, cfg).item() - 8.0) < 1e-5);
  CHECK(std::abs(td_loss(to_float(z), cfg).item() - 8.0) < 1e-5);
  CHECK(mean_pairwise_cosine(z, 8, 1e-8) == doctest::Approx(1.0));
}

TEST_CASE("orthogonal frame pairs give zero") {
  // T = 2, each channel's two frames have disjoint support.
  Tensor64 z({2, 2, 4, 2, 2});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c) {
      z.mutable_data()[((n * 2 + 0) * 4 + c) * 4 + 0] = 1.0 + c;
      z.mutable_data()[((n * 2 + 1) * 4 + c) * 4 + 3] = -2.0 - n;
    }
  TdConfig cfg;
  cfg.ratio = 1.0;
  CHECK(std::abs(td_loss(z, cfg).item()) < 1e-5);
}

TEST_CASE("td_loss lies within [-C_mu, C_mu]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 1 + trial % 9;
    Tensor64 z = Tensor64::randn({2, static_cast<std::size_t>(2 + trial % 4), C, 2, 2}, rng, 1.0);
    if (trial % 3 == 0) z = relu(z);  // nonnegative maps push toward +C_mu
    TdConfig cfg;
    cfg.ratio = (trial % 4 + 1) / 4.0;
    const double cmu = static_cast<double>(cfg.regularized_channels(C));
    const double v = td_loss(z, cfg).item();
    CHECK(v >= -cmu - 1e-12);
    CHECK(v <= cmu + 1e-12);
  }
}

TEST_CASE("td_loss is invariant to frame permutation and positive channel scaling") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 2 + trial % 7, C = 2 + trial % 5;
    const Tensor64 z = Tensor64::randn({2, T, C, 3, 2}, rng, 1.0);
    TdConfig cfg;
    cfg.ratio = 0.5;
    const double base = td_loss(z, cfg).item();

    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(std::abs(td_loss(permute_frames(z, perm), cfg).item() - base) <= 1e-6);

    std::uniform_real_distribution<double> pos(0.01, 100.0);
    std::vector<double> per_channel(C);
    for (double& v : per_channel) v = pos(rng);
    Tensor64 s({2, T, C});
    for (std::size_t i = 0; i < s.numel(); ++i) s.mutable_data()[i] = per_channel[i % C];
    CHECK(std::abs(td_loss(channel_scale(z, s), cfg).item() - base) <= 1e-6);
  }
}

TEST_CASE("ratio rounding and empty selection") {
  TdConfig cfg;
  cfg.ratio = 0.5;
  CHECK(cfg.regularized_channels(16) == 8);
  cfg.ratio = 0.25;
  CHECK(cfg.regularized_channels(3) == 0);
  const Tensor64 z = Tensor64::ones({1, 3, 3, 1, 1});
  CHECK(td_loss(z, cfg).item() == 0.0);
  CHECK(mean_pairwise_cosine(z, 0, 1e-8) == 0.0);
  CHECK_THROWS_AS(td_loss_channels(Tensor64::ones({1, 1, 3, 1, 1}), 1, 1e-8), ShapeError);
  CHECK_THROWS_AS(td_loss_channels(Tensor64::ones({1, 2, 3, 1, 1}), 4, 1e-8), ShapeError);
}

TEST_CASE("zero frames are finite and receive no gradient") {
  Tensor64 z({1, 3, 1, 2, 1}, std::vector<double>{0, 0, 1, 2, 3, -1});
  z.set_requires_grad();
  const Tensor64 l = td_loss_channels(z, 1, 1e-8);
  CHECK(std::isfinite(l.item()));
  l.backward();
  CHECK(z.grad()[0] == 0.0);
  CHECK(z.grad()[1] == 0.0);
  for (double g : z.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("gradient descent on a free tensor lowers similarity") {
  std::mt19937_64 rng(5);
  Tensor64 z = Tensor64::randn({1, 4, 2, 3, 3}, rng, 0.1);
  for (std::size_t i = 0; i < z.numel(); ++i) z.mutable_data()[i] += 1.0;  // start highly similar
  const double start = td_loss_channels(z, 2, 1e-8).item();
  for (int step = 0; step < 100; ++step) {
    z.zero_grad();
    z.set_requires_grad();
    td_loss_channels(z, 2, 1e-8).backward();
    for (std::size_t i = 0; i < z.numel(); ++i) z.mutable_data()[i] -= 0.5 * z.grad()[i];
  }
  const double end = td_loss_channels(z, 2, 1e-8).item();
  CHECK(start > 1.9);
  CHECK(end < start - 1.0);
}

TEST_CASE("similarity matrix is symmetric with unit diagonal") {
  std::mt19937_64 rng(6);
  const Tensor z = Tensor::randn({3, 5, 4, 2, 2}, rng, 1.0f);
  const auto m = frame_similarity_matrix(z, 2, 1e-8);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(m[i * 5 + i] == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t j = 0; j < 5; ++j) CHECK(m[i * 5 + j] == doctest::Approx(m[j * 5 + i]).epsilon(1e-12));
  }
  double off = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (i != j) off += m[i * 5 + j];
  CHECK(off / 20 == doctest::Approx(mean_pairwise_cosine(z, 2, 1e-8)).epsilon(1e-5));
}

TEST_CASE("total loss adds lambda times the block terms") {
  std::mt19937_64 rng(7);
  const Tensor64 logits = Tensor64::randn({2, 4}, rng, 1.0);
  const std::vector<int> labels{1, 3};
  std::map<int, Tensor64> z{{1, Tensor64::randn({2, 3, 4, 2, 2}, rng, 1.0)},
                            {2, Tensor64::randn({2, 3, 8, 1, 1}, rng, 1.0)}};
  TdConfig cfg;
  cfg.lambda = 0.25;
  cfg.regularized_blocks = {1, 2};
  const auto tl = total_loss(logits, labels, z, cfg);
  const double ce = softmax_cross_entropy(logits, labels).item();
  const double t1 = td_loss(z.at(1), cfg).item(), t2 = td_loss(z.at(2), cfg).item();
  CHECK(tl.breakdown.cross_entropy == doctest::Approx(ce));
  CHECK(tl.breakdown.td_terms.at(1) == doctest::Approx(t1));
  CHECK(tl.breakdown.td_sum() == doctest::Approx(t1 + t2));
  CHECK(tl.loss.item() == doctest::Approx(ce + 0.25 * (t1 + t2)).epsilon(1e-12));

  cfg.regularized_blocks = {3};
  CHECK_THROWS_AS(total_loss(logits, labels, z, cfg), std::invalid_argument);
}
