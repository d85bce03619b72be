#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "oracles.hpp"
#include "ttt/serialize.hpp"

using namespace ttt;

TEST_SUITE("tensor") {
  TEST_CASE("matmul agrees with the triple loop") {
    std::mt19937_64 rng(1);
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 9, 33}, {64, 64, 64}}) {
      const Tensor a = oracle::random({std::size_t(m), std::size_t(k)}, rng);
      const Tensor b = oracle::random({std::size_t(k), std::size_t(n)}, rng);
      CHECK(max_abs_diff(matmul(a, b), oracle::matmul(a, b)) < 1e-12);
    }
  }

  TEST_CASE("matmul shape errors and MAC counting") {
    std::mt19937_64 rng(2);
    const Tensor a = oracle::random({3, 4}, rng), b = oracle::random({5, 2}, rng);
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    mac_counter_reset();
    (void)matmul(a, oracle::random({4, 6}, rng));
    CHECK(mac_counter() == 3 * 4 * 6);
  }

  TEST_CASE("transpose") {
    std::mt19937_64 rng(3);
    const Tensor a = oracle::random({37, 70}, rng);
    CHECK(max_abs_diff(transpose(a), oracle::transpose(a)) == 0.0);
  }

  TEST_CASE("zero extents are rejected") {
    CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
  }

  TEST_CASE("conv3x3 matches the sliding window") {
    std::mt19937_64 rng(4);
    for (Grid g : {Grid{1, 1}, Grid{1, 5}, Grid{3, 4}, Grid{6, 6}}) {
      const std::size_t n = g.tokens();
      const Tensor x = oracle::random({n, 3}, rng);
      const Tensor kd = oracle::random({9, 3}, rng);
      const Tensor kf = oracle::random({9, 3, 5}, rng);
      CHECK(max_abs_diff(conv3x3(x, g, kd, ConvKind::depthwise), oracle::conv(x, g, kd, true)) < 1e-13);
      CHECK(max_abs_diff(conv3x3(x, g, kf, ConvKind::full), oracle::conv(x, g, kf, false)) < 1e-13);
      CHECK(max_abs_diff(conv3x3(x, g, kd, std::size_t{3}), oracle::conv(x, g, kd, true)) < 1e-13);
    }
  }

  TEST_CASE("conv3x3 gradients are adjoints") {
    std::mt19937_64 rng(5);
    const Grid g{4, 5};
    auto dot = [](const Tensor& a, const Tensor& b) {
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    };
    for (ConvKind kind : {ConvKind::depthwise, ConvKind::full}) {
      const Tensor x = oracle::random({20, 3}, rng);
      const Tensor k = kind == ConvKind::depthwise ? oracle::random({9, 3}, rng) : oracle::random({9, 3, 2}, rng);
      const Tensor y = oracle::random({20, kind == ConvKind::depthwise ? 3u : 2u}, rng);
      const double lhs = dot(conv3x3(x, g, k, kind), y);
      CHECK(std::abs(lhs - dot(x, conv3x3_input_grad(y, g, k, kind))) < 1e-12);
      CHECK(std::abs(lhs - dot(k, conv3x3_kernel_grad(x, y, g, kind))) < 1e-12);
    }
  }

  TEST_CASE("conv3x3 rejects a grid that does not cover the tokens") {
    std::mt19937_64 rng(6);
    CHECK_THROWS_AS(conv3x3(oracle::random({10, 2}, rng), Grid{3, 3}, oracle::random({9, 2}, rng), ConvKind::depthwise),
                    GridError);
  }

  TEST_CASE("softmax rows") {
    std::mt19937_64 rng(7);
    const Tensor m = oracle::random({5, 9}, rng, -30, 30);
    const Tensor s = softmax_rows(m);
    CHECK(max_abs_diff(s, oracle::softmax_rows(m)) < 1e-15);
    for (std::size_t i = 0; i < 5; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 9; ++j) row += s.at(i, j);
      CHECK(row == doctest::Approx(1.0).epsilon(1e-15));
    }
    const Tensor big({1, 3}, {1000.0, 1000.0, 1000.0});
    CHECK(softmax_rows(big).all_finite());
    Tensor bad({1, 2}, {0.0, std::nan("")});
    CHECK_THROWS_AS(softmax_rows(bad), NonFiniteError);
  }

  TEST_CASE("pointwise ops and broadcasting") {
    const Tensor a({2, 2}, {1, -2, 3, -4});
    const Tensor s = Tensor::scalar(2.0);
    CHECK(add(a, s)[1] == 0.0);
    CHECK(mul(a, a)[3] == 16.0);
    CHECK(sign(a)[1] == -1.0);
    CHECK(abs(a)[3] == 4.0);
    CHECK(scale(a, 0.5)[2] == 1.5);
    CHECK_THROWS_AS(add(a, Tensor({3}, {1, 2, 3})), DimensionError);
    for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
      const double h = 1e-6;
      CHECK(silu_prime(x) == doctest::Approx((silu(x + h) - silu(x - h)) / (2 * h)).epsilon(1e-8));
      CHECK(silu_second(x) == doctest::Approx((silu_prime(x + h) - silu_prime(x - h)) / (2 * h)).epsilon(1e-7));
      CHECK(silu(x) == doctest::Approx(oracle::silu(x)));
    }
  }

  TEST_CASE("memory probe tracks peak and largest allocation") {
    memory_probe_reset();
    const auto before = memory_probe();
    {
      Tensor big({1000, 10});
      CHECK(memory_probe().live_bytes >= before.live_bytes + 80000);
    }
    const auto after = memory_probe();
    CHECK(after.peak_bytes >= before.live_bytes + 80000);
    CHECK(after.largest_allocation_bytes >= 80000);
  }

  TEST_CASE("tensor records round-trip") {
    std::mt19937_64 rng(8);
    const Tensor a = oracle::random({3, 4, 2}, rng);
    std::stringstream ss;
    write_tensor(ss, a);
    const Tensor b = read_tensor(ss);
    CHECK(b.shape() == a.shape());
    CHECK(max_abs_diff(a, b) == 0.0);

    const Tensor f = a.cast(DType::f32);
    std::stringstream s32;
    write_tensor(s32, f);
    const Tensor g = read_tensor(s32);
    CHECK(g.dtype() == DType::f32);
    CHECK(max_abs_diff(f, g) == 0.0);
    CHECK(max_abs_diff(a, g) < 1e-6);

    std::stringstream junk("XXXX\x02\x01");
    CHECK_THROWS_AS(read_tensor(junk), FormatError);
  }

  TEST_CASE("checkpoints round-trip") {
    std::mt19937_64 rng(9);
    NamedTensors t{{"a.w", oracle::random({2, 3}, rng)}, {"b", oracle::random({5}, rng)}};
    const auto stem = std::filesystem::temp_directory_path() / "ttt_ckpt_test";
    save_checkpoint(stem, t);
    const auto back = load_checkpoint(stem);
    REQUIRE(back.size() == 2);
    CHECK(max_abs_diff(back.at("a.w"), t.at("a.w")) == 0.0);
    CHECK(back.at("b").shape() == Shape{5});
  }
}
