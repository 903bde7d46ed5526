#include "mulm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mulm/error.hpp"

namespace mulm {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(rows_, cols_));
  }
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " x " +
                         shape_str(b.rows(), b.cols()));
  }
  Tensor2D out(a.rows(), b.cols());
  // i-k-j order: each out(i, j) still accumulates k = 0..K-1 in sequence.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    auto a_row = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const float aik = a_row[k];
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

std::vector<float> matvec(std::span<const float> x, const Tensor2D& w) {
  if (x.size() != w.rows()) {
    throw DimensionError("matvec: vector of " + std::to_string(x.size()) + " x " +
                         shape_str(w.rows(), w.cols()));
  }
  std::vector<float> out(w.cols(), 0.0f);
  for (std::size_t k = 0; k < w.rows(); ++k) {
    const float xk = x[k];
    auto w_row = w.row(k);
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xk * w_row[j];
  }
  return out;
}

std::vector<float> matvec_transposed(const Tensor2D& w, std::span<const float> x) {
  if (x.size() != w.cols()) {
    throw DimensionError("matvec_transposed: " + shape_str(w.rows(), w.cols()) +
                         " x vector of " + std::to_string(x.size()));
  }
  std::vector<float> out(w.rows(), 0.0f);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto w_row = w.row(r);
    float acc = 0.0f;
    for (std::size_t c = 0; c < w.cols(); ++c) acc += w_row[c] * x[c];
    out[r] = acc;
  }
  return out;
}

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps) {
  if (x.size() != gain.size()) {
    throw DimensionError("rmsnorm: input " + std::to_string(x.size()) + " vs gain " +
                         std::to_string(gain.size()));
  }
  if (!(eps > 0.0f)) throw DomainError("rmsnorm: eps must be positive");
  std::vector<float> out(x.size(), 0.0f);
  if (x.empty()) return out;
  float sum_sq = 0.0f;
  for (float v : x) sum_sq += v * v;
  const float inv = 1.0f / std::sqrt(sum_sq / static_cast<float>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] * inv);
  return out;
}

void apply_rope_inplace(std::span<float> vec, std::size_t position, double theta) {
  if (vec.size() % 2 != 0) {
    throw ConfigError("rope: head dimension " + std::to_string(vec.size()) + " is odd");
  }
  const double dim = static_cast<double>(vec.size());
  for (std::size_t i = 0; i < vec.size() / 2; ++i) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / dim);
    const double angle = static_cast<double>(position) * freq;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float x = vec[2 * i];
    const float y = vec[2 * i + 1];
    vec[2 * i] = x * c - y * s;
    vec[2 * i + 1] = x * s + y * c;
  }
}

std::vector<float> apply_rope(std::span<const float> vec, std::size_t position, double theta) {
  std::vector<float> out(vec.begin(), vec.end());
  apply_rope_inplace(out, position, theta);
  return out;
}

float silu(float z) noexcept {
  // z * sigmoid(z), written to stay finite for large |z|.
  if (z >= 0.0f) return z / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return z * e / (1.0f + e);
}

std::vector<float> swiglu_ffn(std::span<const float> x, const Tensor2D& w_gate,
                              const Tensor2D& w_up, const Tensor2D& w_down) {
  if (w_gate.rows() != x.size() || w_up.rows() != x.size() || w_gate.cols() != w_up.cols() ||
      w_down.rows() != w_gate.cols() || w_down.cols() != x.size()) {
    throw DimensionError("swiglu_ffn: inconsistent gate/up/down shapes");
  }
  auto gate = matvec(x, w_gate);
  const auto up = matvec(x, w_up);
  for (std::size_t j = 0; j < gate.size(); ++j) gate[j] = silu(gate[j]) * up[j];
  return matvec(gate, w_down);
}

std::vector<float> softmax(std::span<const float> x) {
  std::vector<float> out(x.size(), 0.0f);
  if (x.empty()) return out;
  const float max_v = *std::max_element(x.begin(), x.end());
  float sum = 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - max_v);
    sum += out[i];
  }
  for (float& v : out) v /= sum;
  return out;
}

}  // namespace mulm
