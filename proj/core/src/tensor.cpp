#include "gcm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gcm/errors.hpp"

namespace gcm {

namespace {

std::string dims(const MatrixView& m) { return std::to_string(m.rows) + "x" + std::to_string(m.cols); }

}  // namespace

MatrixView::MatrixView(std::span<const float> d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {
  if (d.size() != r * c) throw ShapeError("matrix view: data length does not match dims");
}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged initializer");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor2D(r, c, std::move(values));
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

bool Tensor2D::all_finite() const { return gcm::all_finite(data_); }

Tensor3D::Tensor3D(std::size_t d0, std::size_t d1, std::size_t d2, float fill)
    : d0_(d0), d1_(d1), d2_(d2), data_(d0 * d1 * d2, fill) {}

bool Tensor3D::all_finite() const { return gcm::all_finite(data_); }

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

Tensor2D matmul(const MatrixView& a, const MatrixView& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: " + dims(a) + " * " + dims(b));
  Tensor2D out(a.rows, b.cols);
  std::vector<double> acc(b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const float* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) acc[j] += aik * brow[j];
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < b.cols; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Tensor2D matmul_bt(const MatrixView& a, const MatrixView& b) {
  if (a.cols != b.cols) throw ShapeError("matmul_bt: " + dims(a) + " * (" + dims(b) + ")^T");
  Tensor2D out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const float* brow = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += static_cast<double>(arow[k]) * brow[k];
      out(i, j) = static_cast<float>(s);
    }
  }
  return out;
}

Tensor2D matmul_at(const MatrixView& a, const MatrixView& b) {
  if (a.rows != b.rows) throw ShapeError("matmul_at: (" + dims(a) + ")^T * " + dims(b));
  std::vector<double> acc(a.cols * b.cols, 0.0);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const float* arow = a.data.data() + k * a.cols;
    const float* brow = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* orow = acc.data() + i * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
    }
  }
  Tensor2D out(a.cols, b.cols);
  std::transform(acc.begin(), acc.end(), out.values().begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

Tensor2D transpose(const MatrixView& a) {
  Tensor2D out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

void add_row_bias(Tensor2D& x, std::span<const float> bias) {
  if (bias.size() != x.cols()) throw ShapeError("bias length does not match columns");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

Tensor2D softmax_rows(const MatrixView& x) {
  Tensor2D out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto in = x.row(i);
    auto o = out.row(i);
    const float mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    std::vector<double> e(in.size());
    for (std::size_t j = 0; j < in.size(); ++j) {
      e[j] = std::exp(static_cast<double>(in[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = static_cast<float>(e[j] / total);
  }
  return out;
}

namespace {

struct Moments {
  double mean;
  double inv_std;
};

Moments moments(std::span<const float> x, float eps) {
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  return {mean, 1.0 / std::sqrt(var + eps)};
}

void layernorm_into(std::span<const float> x, std::span<const float> gain, std::span<const float> bias, float eps,
                    std::span<float> out) {
  const auto m = moments(x, eps);
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = static_cast<float>((x[j] - m.mean) * m.inv_std * gain[j] + bias[j]);
  }
}

// Writes dx and accumulates dgain/dbias for one row.
void layernorm_row_backward(std::span<const float> x, std::span<const float> gain, std::span<const float> dy,
                            float eps, std::span<float> dx, std::span<float> dgain, std::span<float> dbias) {
  const auto m = moments(x, eps);
  const std::size_t n = x.size();
  double mean_dxhat = 0.0;
  double mean_dxhat_xhat = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double xhat = (x[j] - m.mean) * m.inv_std;
    const double dxhat = static_cast<double>(dy[j]) * gain[j];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * xhat;
    dgain[j] += static_cast<float>(dy[j] * xhat);
    dbias[j] += dy[j];
  }
  mean_dxhat /= static_cast<double>(n);
  mean_dxhat_xhat /= static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double xhat = (x[j] - m.mean) * m.inv_std;
    const double dxhat = static_cast<double>(dy[j]) * gain[j];
    dx[j] = static_cast<float>(m.inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
  }
}

}  // namespace

std::vector<float> layernorm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                             float eps) {
  if (gain.size() != x.size() || bias.size() != x.size()) throw ShapeError("layernorm: gain/bias length mismatch");
  std::vector<float> out(x.size());
  layernorm_into(x, gain, bias, eps, out);
  return out;
}

Tensor2D layernorm_rows(const MatrixView& x, std::span<const float> gain, std::span<const float> bias, float eps) {
  if (gain.size() != x.cols || bias.size() != x.cols) throw ShapeError("layernorm: gain/bias length mismatch");
  Tensor2D out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) layernorm_into(x.row(i), gain, bias, eps, out.row(i));
  return out;
}

Tensor2D gelu(const MatrixView& x) {
  Tensor2D out(x.rows, x.cols);
  auto o = out.values();
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    o[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  return out;
}

double log_softmax_at(std::span<const float> logits, std::size_t target) {
  if (target >= logits.size()) throw InputError("log_softmax_at: target out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (float v : logits) total += std::exp(v - mx);
  return (logits[target] - mx) - std::log(total);
}

MatmulGrads matmul_backward(const MatrixView& a, const MatrixView& b, const MatrixView& upstream) {
  if (a.cols != b.rows || upstream.rows != a.rows || upstream.cols != b.cols) {
    throw ShapeError("matmul_backward: " + dims(a) + " * " + dims(b) + " with upstream " + dims(upstream));
  }
  return {matmul_bt(upstream, b), matmul_at(a, upstream)};
}

Tensor2D softmax_rows_backward(const MatrixView& y, const MatrixView& upstream) {
  if (y.rows != upstream.rows || y.cols != upstream.cols) throw ShapeError("softmax_backward: shape mismatch");
  Tensor2D dx(y.rows, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i) {
    const auto yr = y.row(i);
    const auto gr = upstream.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += static_cast<double>(yr[j]) * gr[j];
    auto o = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = static_cast<float>(yr[j] * (gr[j] - dot));
  }
  return dx;
}

LayerNormGrads layernorm_backward(std::span<const float> x, std::span<const float> gain,
                                  std::span<const float> upstream, float eps) {
  if (gain.size() != x.size() || upstream.size() != x.size()) throw ShapeError("layernorm_backward: length mismatch");
  LayerNormGrads g{std::vector<float>(x.size()), std::vector<float>(x.size(), 0.0f),
                   std::vector<float>(x.size(), 0.0f)};
  layernorm_row_backward(x, gain, upstream, eps, g.dx, g.dgain, g.dbias);
  return g;
}

Tensor2D layernorm_rows_backward(const MatrixView& x, std::span<const float> gain, const MatrixView& upstream,
                                 std::span<float> dgain, std::span<float> dbias, float eps) {
  if (upstream.rows != x.rows || upstream.cols != x.cols || gain.size() != x.cols || dgain.size() != x.cols ||
      dbias.size() != x.cols) {
    throw ShapeError("layernorm_rows_backward: shape mismatch");
  }
  Tensor2D dx(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    layernorm_row_backward(x.row(i), gain, upstream.row(i), eps, dx.row(i), dgain, dbias);
  }
  return dx;
}

Tensor2D gelu_backward(const MatrixView& x, const MatrixView& upstream) {
  if (x.rows != upstream.rows || x.cols != upstream.cols) throw ShapeError("gelu_backward: shape mismatch");
  Tensor2D dx(x.rows, x.cols);
  auto o = dx.values();
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * v * v) * inv_sqrt_2pi;
    o[i] = static_cast<float>(upstream.data[i] * (cdf + v * pdf));
  }
  return dx;
}

std::vector<float> softmax_cross_entropy_backward(std::span<const float> logits, std::size_t target) {
  if (target >= logits.size()) throw InputError("cross entropy: target out of range");
  const Tensor2D p = softmax_rows(MatrixView(logits, 1, logits.size()));
  std::vector<float> g(p.values().begin(), p.values().end());
  g[target] -= 1.0f;
  return g;
}

void accumulate_column_sums(const MatrixView& x, std::span<float> out) {
  if (out.size() != x.cols) throw ShapeError("column sums: length mismatch");
  std::vector<double> acc(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto r = x.row(i);
    for (std::size_t j = 0; j < x.cols; ++j) acc[j] += r[j];
  }
  for (std::size_t j = 0; j < x.cols; ++j) out[j] += static_cast<float>(acc[j]);
}

}  // namespace gcm
