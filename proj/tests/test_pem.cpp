#include <doctest.h>

#include <cmath>
#include <random>

#include "tdrl/ops.hpp"
#include "tdrl/pem.hpp"

using namespace tdrl;

namespace {

using P64 = BasicPemParams<double>;

// C = 2, r = 1, T = 3, one pixel per frame.
P64 transcript_params() {
  P64 p;
  p.channels = 2;
  p.reduction = 1;
  p.f1 = Tensor64({2, 2}, std::vector<double>{1, 0, 0.5, 1});
  p.f2 = Tensor64({2, 2}, std::vector<double>{0.5, -1, 1, 0.5});
  p.gate = Tensor64({1, 4}, std::vector<double>{0.5, -0.5, 1, 0.25});
  p.expand = Tensor64({2, 2}, std::vector<double>{1, -1, 0.5, 2});
  return p;
}

Tensor64 transcript_input() { return Tensor64({1, 3, 2, 1, 1}, std::vector<double>{1, 2, 0.5, 3, 2, 1}); }

struct Step {
  double gamma;
  double m[2];
  double a[2];
};

void check_transcript(MemoryInit init, const double (&m0)[2], const Step (&steps)[3]) {
  const PemOutput<double> out = pem_forward(transcript_input(), transcript_params(), init);
  REQUIRE(out.memories.size() == 4);
  CHECK(out.memories[0].data()[0] == doctest::Approx(m0[0]).epsilon(1e-12));
  CHECK(out.memories[0].data()[1] == doctest::Approx(m0[1]).epsilon(1e-12));
  for (std::size_t t = 0; t < 3; ++t) {
    CAPTURE(t);
    CHECK(std::abs(out.gammas[t].item() - steps[t].gamma) < 1e-6);
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(std::abs(out.memories[t + 1].data()[c] - steps[t].m[c]) < 1e-6);
      CHECK(std::abs(out.enhancement.at({0, t, c}) - steps[t].a[c]) < 1e-6);
      CHECK(out.enhanced.at({0, t, c, 0, 0}) ==
            doctest::Approx(transcript_input().at({0, t, c, 0, 0}) * steps[t].a[c]).epsilon(1e-12));
    }
  }
}

}  // namespace

TEST_CASE("frame differences: relu(f2 x_{t+1}) - relu(f1 x_t), last slot ones") {
  const PemOutput<double> out = pem_forward(transcript_input(), transcript_params());
  // relu(f1 x0) = (1, 2.5), relu(f2 x1) = (0, 2)
  // relu(f1 x1) = (0.5, 3.25), relu(f2 x2) = (0, 2.5)
  const std::vector<double> expect{-1, -0.5, -0.5, -0.75, 1, 1};
  for (std::size_t i = 0; i < 6; ++i) CHECK(out.diffs.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("pem_forward matches the hand transcript, last_difference init") {
  check_transcript(MemoryInit::last_difference, {-0.5, -0.75},
                   {{0.2689414213699951, {-0.63447071068499761, -0.68276464465750131},
                     {0.51207113745407939, 0.15672973131995213}},
                    {0.33998680190278263, {-0.588752443809611, -0.70562377809519461},
                     {0.52918462195714655, 0.15373219378866629}},
                    {0.78725126865011963, {0.66199493315048319, 0.63713070505005742},
                     {0.5062157367989093, 0.83275210288513224}}});
}

TEST_CASE("pem_forward matches the hand transcript, ones_slot init") {
  check_transcript(MemoryInit::ones_slot, {1, 1},
                   {{0.24508501313237172, {0.50982997373525651, 0.63237248030144244},
                     {0.46940265295715217, 0.82048840067117823}},
                    {0.32108909750864939, {0.18558457883141991, 0.18850774818065913},
                     {0.49926920818306997, 0.61533826085355758}},
                    {0.77704675133126033, {0.81842343608454526, 0.81907516618736698},
                     {0.49983706748006174, 0.88568079709431102}}});
}

TEST_CASE("pem_forward matches the hand transcript, zeros init") {
  check_transcript(MemoryInit::zeros, {0, 0},
                   {{0.24508501313237172, {-0.24508501313237172, -0.12254250656618586},
                     {0.46940265295715222, 0.40911442060028608}},
                    {0.32108909750864939, {-0.32693543620712773, -0.32401226685788853},
                     {0.49926920818306997, 0.30757259707382889}},
                    {0.77704675133126033, {0.70415543372394973, 0.70480716382677144},
                     {0.49983706748006174, 0.85342145019541282}}});
}

TEST_CASE("memory_step is a convex combination with gate in (0,1)") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N = 1 + trial % 4, C = 4 * (1 + trial % 3);
    P64 p = P64::zeros(C, 1);
    p.gate = Tensor64::randn({1, 2 * C}, rng, 0.5);
    const Tensor64 m = Tensor64::randn({N, C}, rng, 2.0), d = Tensor64::randn({N, C}, rng, 2.0);
    const auto r = memory_step(m, d, p);
    for (std::size_t n = 0; n < N; ++n) {
      const double g = r.gamma.data()[n];
      CHECK(g > 0.0);
      CHECK(g < 1.0);
      for (std::size_t c = 0; c < C; ++c) {
        const double lo = std::min(m.at({n, c}), d.at({n, c})), hi = std::max(m.at({n, c}), d.at({n, c}));
        const double v = r.memory.at({n, c});
        CHECK(v >= lo - 1e-12);
        CHECK(v <= hi + 1e-12);
        CHECK(v == doctest::Approx((1 - g) * m.at({n, c}) + g * d.at({n, c})).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("zero gate weights give gamma = 0.5 and the midpoint") {
  P64 p = P64::zeros(3, 1);
  const Tensor64 m({2, 3}, std::vector<double>{1, 2, 3, -1, 0, 4});
  const Tensor64 d({2, 3}, std::vector<double>{3, 2, 1, 1, 1, 1});
  const auto r = memory_step(m, d, p);
  for (std::size_t n = 0; n < 2; ++n) CHECK(r.gamma.data()[n] == 0.5);
  for (std::size_t i = 0; i < 6; ++i) CHECK(r.memory.data()[i] == 0.5 * (m.data()[i] + d.data()[i]));
}

TEST_CASE("a saturated gate copies the new difference") {
  P64 p = P64::zeros(2, 1);
  p.gate = Tensor64({1, 4}, std::vector<double>{0, 0, 50, 50});
  const Tensor64 m({1, 2}, std::vector<double>{7, -7}), d({1, 2}, std::vector<double>{1, 1});
  const auto r = memory_step(m, d, p);
  CHECK(r.memory.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.memory.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero memory gives a = 0.5; zero PEM weights halve the input") {
  std::mt19937_64 rng(9);
  const P64 p = P64::zeros(8, 4);
  const Tensor64 a = enhancement(Tensor64({3, 2}, 0.0), P64::random(8, 4, rng));
  for (double v : a.data()) CHECK(v == 0.5);
  const Tensor64 x = Tensor64::randn({2, 4, 8, 3, 3}, rng, 1.0);
  const PemOutput<double> out = pem_forward(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.enhanced.data()[i] == 0.5 * x.data()[i]);
}

TEST_CASE("gate causality: frame t+2 does not affect a_0..a_t") {
  std::mt19937_64 rng(21);
  const std::size_t T = 6;
  const P64 p = P64::random(8, 2, rng);
  const Tensor64 x = Tensor64::randn({2, T, 8, 3, 3}, rng, 1.0);
  for (MemoryInit init : {MemoryInit::ones_slot, MemoryInit::zeros}) {
    const Tensor64 base = pem_forward(x, p, init).enhancement;
    for (std::size_t k = 2; k < T; ++k) {
      Tensor64 y = x.clone();
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 8 * 9; ++i) y.mutable_data()[(n * T + k) * 72 + i] += 1.5;
      const Tensor64 a = pem_forward(y, p, init).enhancement;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t t = 0; t + 2 <= k; ++t)
          for (std::size_t c = 0; c < 8; ++c) CHECK(a.at({n, t, c}) == base.at({n, t, c}));
    }
  }
}

TEST_CASE("constant-in-time input with f1 = f2 has zero differences except the ones slot") {
  std::mt19937_64 rng(4);
  P64 p = P64::random(8, 2, rng);
  p.f2 = p.f1.clone();
  Tensor64 x({1, 5, 8, 2, 2});
  const Tensor64 frame = Tensor64::randn({8 * 4}, rng, 1.0);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 32; ++i) x.mutable_data()[t * 32 + i] = frame.data()[i];
  const PemOutput<double> out = pem_forward(x, p, MemoryInit::zeros);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.diffs.at({0, t, c}) == (t == 4 ? 1.0 : 0.0));
  // zero memory stays zero until the ones slot arrives
  for (std::size_t t = 1; t <= 4; ++t)
    for (double v : out.memories[t].data()) CHECK(v == 0.0);
}

TEST_CASE("memory stays finite over long clips") {
  std::mt19937_64 rng(8);
  const P64 p = P64::random(4, 1, rng);
  const Tensor64 x = Tensor64::randn({1, 64, 4, 2, 2}, rng, 100.0);
  const PemOutput<double> out = pem_forward(x, p);
  for (const auto& m : out.memories)
    for (double v : m.data()) CHECK(std::isfinite(v));
}

TEST_CASE("PEM parameters are validated") {
  CHECK_THROWS_AS(PemParams::zeros(6, 4).validate(), ShapeError);
  PemParams p = PemParams::zeros(8, 4);
  p.gate = Tensor({1, 3});
  CHECK_THROWS_AS(p.validate(), ShapeError);
  CHECK_THROWS_AS(pem_forward(Tensor({1, 1, 8, 2, 2}), PemParams::zeros(8, 4)), ShapeError);
  CHECK_THROWS_AS(parse_memory_init("bogus"), std::invalid_argument);
}
