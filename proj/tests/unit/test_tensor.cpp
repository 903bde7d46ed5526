#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mulm/error.hpp"
#include "mulm/tensor.hpp"
#include "oracles.hpp"

using namespace mulm;

namespace {

Tensor2D random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> d(r * c);
  for (auto& v : d) v = u(rng);
  return Tensor2D(r, c, std::move(d));
}

std::vector<float> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("matmul agrees with a triple-loop double oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 17);
    const auto n = dim(rng), k = dim(rng), m = dim(rng);
    const auto a = random_tensor(rng, n, k);
    const auto b = random_tensor(rng, k, m);
    const auto got = matmul(a, b);
    const auto want = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
    REQUIRE(got.rows() == n);
    REQUIRE(got.cols() == m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) CHECK(got(i, j) == doctest::Approx(want[i][j]).epsilon(1e-5));
  }
}

TEST_CASE("matmul identity and dimension errors") {
  std::mt19937_64 rng(1);
  const auto a = random_tensor(rng, 3, 4);
  CHECK(matmul(a, Tensor2D::identity(4)) == a);
  CHECK(matmul(Tensor2D::identity(3), a) == a);
  CHECK_THROWS_AS(matmul(a, Tensor2D(3, 4)), DimensionError);
  CHECK_THROWS_AS(Tensor2D(2, 2, std::vector<float>(3)), DimensionError);
}

TEST_CASE("matvec and matvec_transposed match matmul") {
  std::mt19937_64 rng(3);
  const auto w = random_tensor(rng, 5, 7);
  const auto x = random_vec(rng, 5);
  const auto y = matvec(x, w);
  const auto ref = matmul(Tensor2D(1, 5, x), w);
  for (std::size_t j = 0; j < 7; ++j) CHECK(y[j] == doctest::Approx(ref(0, j)));
  const auto z = random_vec(rng, 7);
  const auto t = matvec_transposed(w, z);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += double(w(i, j)) * z[j];
    CHECK(t[i] == doctest::Approx(s).epsilon(1e-5));
  }
  CHECK_THROWS_AS(matvec(random_vec(rng, 4), w), DimensionError);
  CHECK_THROWS_AS(matvec_transposed(w, random_vec(rng, 5)), DimensionError);
}

TEST_CASE("rmsnorm: unit RMS output with unit gain, gain scales elementwise") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_vec(rng, 32);
    const std::vector<float> ones(32, 1.0f);
    const auto y = rmsnorm(x, ones, 1e-12f);
    double ss = 0.0;
    for (float v : y) ss += double(v) * v;
    CHECK(std::sqrt(ss / 32) == doctest::Approx(1.0).epsilon(1e-5));
    const auto g = random_vec(rng, 32);
    const auto yg = rmsnorm(x, g, 1e-5f);
    const auto want = oracle::rmsnorm(std::vector<double>(x.begin(), x.end()), g, 1e-5);
    for (std::size_t i = 0; i < 32; ++i) CHECK(yg[i] == doctest::Approx(want[i]).epsilon(1e-5));
  }
  CHECK_THROWS_AS(rmsnorm(std::vector<float>(3), std::vector<float>(4), 1e-5f), DimensionError);
}

TEST_CASE("rmsnorm of the zero vector stays finite") {
  const std::vector<float> z(8, 0.0f), g(8, 1.0f);
  for (float v : rmsnorm(z, g, 1e-5f)) CHECK(v == 0.0f);
}

TEST_CASE("rope: matches complex rotation, preserves norm, position 0 is identity") {
  std::mt19937_64 rng(5);
  for (std::size_t len : {2, 4, 8, 16, 64}) {
    const auto v = random_vec(rng, len);
    CHECK(apply_rope(v, 0, 1e6) == v);
    for (std::size_t pos : {1, 7, 100, 1023}) {
      const auto r = apply_rope(v, pos, 1e6);
      std::vector<double> want(v.begin(), v.end());
      oracle::rope(want, 0, len, pos, 1e6);
      double n0 = 0, n1 = 0;
      for (std::size_t i = 0; i < len; ++i) {
        CHECK(r[i] == doctest::Approx(want[i]).epsilon(1e-5));
        n0 += double(v[i]) * v[i];
        n1 += double(r[i]) * r[i];
      }
      CHECK(n1 == doctest::Approx(n0).epsilon(1e-5));
    }
  }
}

TEST_CASE("rope: dot products depend only on relative position") {
  std::mt19937_64 rng(9);
  const auto q = random_vec(rng, 16);
  const auto k = random_vec(rng, 16);
  auto dot = [](const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
    return s;
  };
  const double base = dot(apply_rope(q, 10, 1e6), apply_rope(k, 3, 1e6));
  for (std::size_t shift : {1, 50, 500}) {
    CHECK(dot(apply_rope(q, 10 + shift, 1e6), apply_rope(k, 3 + shift, 1e6)) ==
          doctest::Approx(base).epsilon(1e-4));
  }
}

TEST_CASE("rope rejects odd lengths") {
  std::vector<float> v(5, 1.0f);
  CHECK_THROWS_AS(apply_rope_inplace(v, 1, 1e6), ConfigError);
}

TEST_CASE("silu values and stability") {
  CHECK(silu(0.0f) == 0.0f);
  CHECK(silu(1.0f) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(silu(-1.0f) == doctest::Approx(-1.0 / (1.0 + std::exp(1.0))));
  CHECK(std::isfinite(silu(-1000.0f)));
  CHECK(silu(-1000.0f) == doctest::Approx(0.0));
  CHECK(silu(1000.0f) == doctest::Approx(1000.0));
}

TEST_CASE("swiglu_ffn matches the gated formula") {
  std::mt19937_64 rng(21);
  const std::size_t d = 6, m = 10;
  const auto g = random_tensor(rng, d, m), u = random_tensor(rng, d, m), dn = random_tensor(rng, m, d);
  const auto x = random_vec(rng, d);
  const auto y = swiglu_ffn(x, g, u, dn);
  const std::vector<double> xd(x.begin(), x.end());
  auto gg = oracle::vecmat(xd, oracle::to_mat(g));
  const auto uu = oracle::vecmat(xd, oracle::to_mat(u));
  for (std::size_t j = 0; j < m; ++j) gg[j] = oracle::silu(gg[j]) * uu[j];
  const auto want = oracle::vecmat(gg, oracle::to_mat(dn));
  for (std::size_t i = 0; i < d; ++i) CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-4));
  CHECK_THROWS_AS(swiglu_ffn(x, g, u, random_tensor(rng, m + 1, d)), DimensionError);
}

TEST_CASE("softmax: sums to one, shift invariant, handles large logits") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    auto x = random_vec(rng, 13);
    const auto p = softmax(x);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    for (auto& v : x) v += 50.0f;
    const auto p2 = softmax(x);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p2[i] == doctest::Approx(p[i]).epsilon(1e-4));
  }
  const auto big = softmax(std::vector<float>{1000.0f, 0.0f});
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(std::isfinite(big[1]));
}
