#pragma once

// Dense row-major float32 tensors and the forward/backward kernels used by
// the transformer. Every reduction accumulates in double.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace gcm {

inline constexpr float kLayerNormEps = 1e-5f;

// Non-owning read-only view of a row-major matrix.
struct MatrixView {
  std::span<const float> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  MatrixView() = default;
  MatrixView(std::span<const float> d, std::size_t r, std::size_t c);

  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const float> row(std::size_t r) const { return data.subspan(r * cols, cols); }
};

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> values);
  static Tensor2D from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor2D identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  operator MatrixView() const { return {data_, rows_, cols_}; }
  MatrixView view() const { return *this; }

  bool all_finite() const;
  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

class Tensor3D {
 public:
  Tensor3D() = default;
  Tensor3D(std::size_t d0, std::size_t d1, std::size_t d2, float fill = 0.0f);

  std::size_t dim0() const noexcept { return d0_; }
  std::size_t dim1() const noexcept { return d1_; }
  std::size_t dim2() const noexcept { return d2_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * d1_ + j) * d2_ + k];
  }
  float operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * d1_ + j) * d2_ + k];
  }
  // The innermost vector at (i, j).
  std::span<float> at(std::size_t i, std::size_t j) { return {data_.data() + (i * d1_ + j) * d2_, d2_}; }
  std::span<const float> at(std::size_t i, std::size_t j) const {
    return {data_.data() + (i * d1_ + j) * d2_, d2_};
  }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  bool all_finite() const;
  bool operator==(const Tensor3D&) const = default;

 private:
  std::size_t d0_ = 0, d1_ = 0, d2_ = 0;
  std::vector<float> data_;
};

bool all_finite(std::span<const float> values);

// --- forward kernels -------------------------------------------------------

Tensor2D matmul(const MatrixView& a, const MatrixView& b);
// a * b^T
Tensor2D matmul_bt(const MatrixView& a, const MatrixView& b);
// a^T * b
Tensor2D matmul_at(const MatrixView& a, const MatrixView& b);
Tensor2D transpose(const MatrixView& a);

// Adds `bias` to every row.
void add_row_bias(Tensor2D& x, std::span<const float> bias);

Tensor2D softmax_rows(const MatrixView& x);

std::vector<float> layernorm(std::span<const float> x, std::span<const float> gain,
                             std::span<const float> bias, float eps = kLayerNormEps);
Tensor2D layernorm_rows(const MatrixView& x, std::span<const float> gain, std::span<const float> bias,
                        float eps = kLayerNormEps);

// Exact (erf) GELU.
Tensor2D gelu(const MatrixView& x);

// Natural log of softmax(logits)[target], computed stably.
double log_softmax_at(std::span<const float> logits, std::size_t target);

// --- backward kernels ------------------------------------------------------
// Each takes the saved forward inputs (or outputs where cheaper) plus the
// upstream gradient and returns gradients for the kernel's inputs.

struct MatmulGrads {
  Tensor2D da;
  Tensor2D db;
};
MatmulGrads matmul_backward(const MatrixView& a, const MatrixView& b, const MatrixView& upstream);

// `y` is the saved softmax output.
Tensor2D softmax_rows_backward(const MatrixView& y, const MatrixView& upstream);

struct LayerNormGrads {
  std::vector<float> dx;
  std::vector<float> dgain;
  std::vector<float> dbias;
};
LayerNormGrads layernorm_backward(std::span<const float> x, std::span<const float> gain,
                                  std::span<const float> upstream, float eps = kLayerNormEps);

// Row-wise version. Parameter gradients are accumulated into dgain/dbias.
Tensor2D layernorm_rows_backward(const MatrixView& x, std::span<const float> gain, const MatrixView& upstream,
                                 std::span<float> dgain, std::span<float> dbias, float eps = kLayerNormEps);

Tensor2D gelu_backward(const MatrixView& x, const MatrixView& upstream);

// Gradient of -log softmax(logits)[target] with respect to logits:
// softmax(logits) - onehot(target).
std::vector<float> softmax_cross_entropy_backward(std::span<const float> logits, std::size_t target);

// Column sums accumulated into `out` (length = cols).
void accumulate_column_sums(const MatrixView& x, std::span<float> out);

}  // namespace gcm
