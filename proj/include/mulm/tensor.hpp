#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mulm {

// Dense row-major float matrix. Weights use the "x · W" convention: a
// projection from n inputs to m outputs is stored as an n×m tensor.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols);
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Tensor2D identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Matrix product with a fixed sequential reduction order over the inner
/// dimension. Throws DimensionError when a.cols() != b.rows().
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

/// Row vector times matrix: x (1×n) · w (n×m) -> m values.
std::vector<float> matvec(std::span<const float> x, const Tensor2D& w);

/// Matrix times transposed matrix row space: returns w · x for w (m×n), used
/// for the tied output head (logits = E · h).
std::vector<float> matvec_transposed(const Tensor2D& w, std::span<const float> x);

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps);

/// Rotates consecutive pairs (v[2i], v[2i+1]) by position * theta^(-2i/len).
void apply_rope_inplace(std::span<float> vec, std::size_t position, double theta);
std::vector<float> apply_rope(std::span<const float> vec, std::size_t position, double theta);

float silu(float z) noexcept;

/// down( silu(x·gate) ⊙ (x·up) ) with gate/up d×m and down m×d.
std::vector<float> swiglu_ffn(std::span<const float> x, const Tensor2D& w_gate,
                              const Tensor2D& w_up, const Tensor2D& w_down);

std::vector<float> softmax(std::span<const float> x);

}  // namespace mulm
