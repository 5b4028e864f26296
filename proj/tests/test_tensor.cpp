#include <doctest.h>

#include <cmath>
#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "tdrl/checkpoint.hpp"
#include "tdrl/gradcheck.hpp"
#include "tdrl/gradcheck_suite.hpp"
#include "tdrl/ops.hpp"

using namespace tdrl;

TEST_CASE("forward ops match nested-loop oracles on 100 random shapes") {
  for (const auto& [op, err] : oracle::sweep<double>(11)) {
    CAPTURE(op);
    CHECK(err < 1e-12);
  }
  for (const auto& [op, err] : oracle::sweep<float>(12)) {
    CAPTURE(op);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("oracle sweep covers every forward operator") {
  const auto res = oracle::sweep<double>(1, 2);
  for (const char* op : {"conv2d", "depthwise_temporal_conv", "temporal_shift", "global_avg_pool_spatial", "linear",
                         "sigmoid", "relu", "add", "sub", "mul", "scale", "channel_scale", "concat", "stack", "narrow",
                         "select", "reshape", "mean_axis", "sum", "mean", "softmax_cross_entropy"}) {
    CAPTURE(op);
    CHECK(res.count(op) == 1);
  }
}

TEST_CASE("small hand cases") {
  SUBCASE("conv2d 3x3 same padding on a delta") {
    Tensor x({1, 1, 3, 3}, 0.0f);
    x.mutable_data()[4] = 1.0f;
    Tensor w({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    // cross-correlation with a centred delta flips the kernel
    const std::vector<float> expect{9, 8, 7, 6, 5, 4, 3, 2, 1};
    CHECK(conv2d(x, w, 1, 1).data().size() == 9);
    for (std::size_t i = 0; i < 9; ++i) CHECK(conv2d(x, w, 1, 1).data()[i] == expect[i]);
  }
  SUBCASE("temporal shift moves frames and zero-fills") {
    Tensor x({1, 3, 2, 1, 1}, std::vector<float>{1, 10, 2, 20, 3, 30});
    const Tensor y = temporal_shift(x, 0.5);  // channel 0 reads t-1, channel 1 reads t+1
    const std::vector<float> expect{0, 20, 1, 30, 2, 0};
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == expect[i]);
  }
  SUBCASE("sigmoid is stable at extremes") {
    Tensor x({2}, std::vector<float>{-1000.0f, 1000.0f});
    const Tensor y = sigmoid(x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == 1.0f);
  }
  SUBCASE("cross-entropy of zero logits is ln K") {
    Tensor z({3, 4}, 0.0f);
    CHECK(softmax_cross_entropy(z, {0, 1, 3}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  }
}

TEST_CASE("shape errors are rejected") {
  Tensor a({2, 3}, 1.0f), b({3, 2}, 1.0f);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3})), ShapeError);
  CHECK_THROWS_AS(depthwise_temporal_conv(Tensor({1, 2, 3, 1, 1}), Tensor({2, 3})), ShapeError);
  CHECK_THROWS_AS(depthwise_temporal_conv(Tensor({1, 2, 3, 1, 1}), Tensor({3, 2})), ShapeError);
  CHECK_THROWS_AS(temporal_shift(Tensor({1, 2, 3, 1, 1}), 0.75), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({2, 3}), {0, 3}), std::out_of_range);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
}

TEST_CASE("non-finite results raise NumericalError naming the op") {
  Tensor a({2}, std::vector<float>{1.0f, std::numeric_limits<float>::infinity()});
  try {
    (void)scale(a, 0.0f);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.op() == "scale");
  }
}

TEST_CASE("autograd accumulates through shared subexpressions") {
  Tensor x({3}, std::vector<float>{1, 2, 3});
  x.set_requires_grad();
  const Tensor y = sum(add(mul(x, x), x));  // d/dx = 2x + 1
  y.backward();
  CHECK(x.grad()[0] == 3.0f);
  CHECK(x.grad()[1] == 5.0f);
  CHECK(x.grad()[2] == 7.0f);
}

TEST_CASE("NoGradGuard stops graph construction") {
  Tensor x({2}, 1.0f);
  x.set_requires_grad();
  {
    NoGradGuard guard;
    CHECK_FALSE(mul(x, x).requires_grad());
  }
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("tape replays each node once in reverse topological order") {
  Tensor x({2}, 2.0f);
  x.set_requires_grad();
  const Tensor a = relu(x), b = mul(a, a), c = add(b, a), d = sum(c);
  const Tape<float> tape = Tape<float>::record(d);
  CHECK(tape.size() == 4);
  d.backward();
  CHECK(x.grad()[0] == 5.0f);  // 2x + 1 at x = 2
}

TEST_CASE("gradcheck suite passes and spans every operator") {
  const auto cases = run_gradcheck_suite();
  CHECK(cases.size() >= 30);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(c.passed());
  }
}

TEST_CASE("gradcheck catches a wrong backward") {
  std::mt19937_64 rng(1);
  Tensor64 x = Tensor64::randn({4}, rng, 1.0);
  // A custom op whose backward is off by a factor of two.
  auto bad = [](const Tensor64& in) {
    std::vector<double> out(in.data().begin(), in.data().end());
    for (double& v : out) v = v * v;
    return make_result<double>("bad_square", in.shape(), out, {in}, [in](std::span<const double> g) {
      std::span<double> gx = grad_sink(in);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * in.data()[i];
    });
  };
  const double err = grad_check<double>([&](const Tensor64& in) { return sum(bad(in)); }, x, 1e-6);
  CHECK(err > 0.3);
}

TEST_CASE("gradcheck detects nondeterministic functions") {
  std::mt19937_64 rng(1);
  Tensor64 x = Tensor64::randn({3}, rng, 1.0);
  int calls = 0;
  auto f = [&](const Tensor64& in) { return scale(sum(in), 1.0 + 1e-3 * (++calls)); };
  CHECK_THROWS_AS(grad_check<double>(f, x, 1e-6), NondeterminismError);
}

TEST_CASE("tensor records round-trip bit-exactly") {
  std::mt19937_64 rng(5);
  const auto dir = std::filesystem::temp_directory_path() / "tdrl_test_records";
  std::filesystem::create_directories(dir);
  for (int trial = 0; trial < 20; ++trial) {
    NamedTensors recs;
    const int n = 1 + trial % 4;
    for (int i = 0; i < n; ++i) {
      Shape s;
      for (int r = 0; r <= (trial + i) % 4; ++r) s.push_back(1 + (rng() % 4));
      Tensor t = Tensor::randn(s, rng, 10.0);
      t.mutable_data()[0] = -0.0f;
      recs.emplace_back("t" + std::to_string(i) + (i % 2 ? ".weight" : ""), t);
    }
    const auto path = dir / "r.bin";
    write_tensor_file(path, kCheckpointMagic, recs);
    const NamedTensors back = read_tensor_file(path, kCheckpointMagic);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(back[i].first == recs[i].first);
      CHECK(back[i].second.shape() == recs[i].second.shape());
      for (std::size_t j = 0; j < recs[i].second.numel(); ++j) {
        CHECK(std::bit_cast<std::uint32_t>(back[i].second.data()[j]) ==
              std::bit_cast<std::uint32_t>(recs[i].second.data()[j]));
      }
    }
  }
}

TEST_CASE("corrupt tensor files are rejected") {
  const auto path = std::filesystem::temp_directory_path() / "tdrl_test_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE!";
  }
  CHECK_THROWS_AS(read_tensor_file(path, kCheckpointMagic), FormatError);
  NamedTensors one{{"w", Tensor({2, 2}, 1.0f)}};
  write_tensor_file(path, kCheckpointMagic, one);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(read_tensor_file(path, kCheckpointMagic), FormatError);
}
