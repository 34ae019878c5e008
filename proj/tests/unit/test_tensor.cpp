#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "gcm/errors.hpp"
#include "gcm/tensor.hpp"
#include "reference_kernels.hpp"

using namespace gcm;

namespace {

Tensor2D random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> n(0.0f, scale);
  Tensor2D t(r, c);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

}  // namespace

TEST(Tensor, IdentityTimesMatrix) {
  const Tensor2D m = Tensor2D::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  EXPECT_EQ(matmul(Tensor2D::identity(3), m), m);
}

TEST(Tensor, TimesZeroIsZero) {
  const Tensor2D out = matmul(Tensor2D::from_rows({{1, 2}, {3, 4}}), Tensor2D(2, 2));
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const Tensor2D a = random_matrix(8, 8, rng), b = random_matrix(8, 8, rng);
  const Tensor2D c = matmul(a, b);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 8; ++k) s += double{a(i, k)} * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-6);
    }
}

TEST(Tensor, TransposedProductsAgree) {
  std::mt19937_64 rng(2);
  const Tensor2D a = random_matrix(5, 3, rng), b = random_matrix(4, 3, rng), c = random_matrix(5, 4, rng);
  const Tensor2D bt = matmul_bt(a, b), ref_bt = matmul(a, transpose(b));
  const Tensor2D at = matmul_at(a, c), ref_at = matmul(transpose(a), c);
  for (std::size_t i = 0; i < bt.size(); ++i) EXPECT_NEAR(bt.values()[i], ref_bt.values()[i], 1e-6);
  for (std::size_t i = 0; i < at.size(); ++i) EXPECT_NEAR(at.values()[i], ref_at.values()[i], 1e-6);
}

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor2D(2, 3), Tensor2D(2, 3)), ShapeError);
  EXPECT_THROW(matmul_bt(Tensor2D(2, 3), Tensor2D(2, 4)), ShapeError);
  EXPECT_THROW(matmul_at(Tensor2D(2, 3), Tensor2D(3, 3)), ShapeError);
  EXPECT_THROW(Tensor2D(2, 2, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, SoftmaxExamples) {
  const Tensor2D s = softmax_rows(Tensor2D::from_rows({{0, 0}, {std::log(2.0f), 0}, {1000, 0}}));
  EXPECT_NEAR(s(0, 0), 0.5, 1e-7);
  EXPECT_NEAR(s(0, 1), 0.5, 1e-7);
  EXPECT_NEAR(s(1, 0), 2.0 / 3.0, 1e-6);
  EXPECT_NEAR(s(1, 1), 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(s(2, 0), 1.0, 1e-7);
  EXPECT_NEAR(s(2, 1), 0.0, 1e-7);
  EXPECT_TRUE(s.all_finite());
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  const Tensor2D s = softmax_rows(random_matrix(20, 13, rng, 5.0f));
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double sum = 0;
    for (float v : s.row(r)) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Tensor, LayerNormExamples) {
  const std::vector<float> one(4, 1.0f), zero(4, 0.0f);
  for (float v : layernorm(std::vector<float>{3, 3, 3, 3}, one, zero)) EXPECT_EQ(v, 0.0f);
  const std::vector<float> g2{1, 1}, b2{0, 0};
  const auto y = layernorm(std::vector<float>{1, -1}, g2, b2, 1e-12f);
  EXPECT_NEAR(y[0], 1.0, 1e-6);
  EXPECT_NEAR(y[1], -1.0, 1e-6);
}

TEST(Tensor, LayerNormMatchesDirectFormula) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.5f, 2.0f);
  std::vector<float> x(17), g(17), b(17);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = n(rng), g[i] = n(rng), b[i] = n(rng);
  double mean = 0, var = 0;
  for (float v : x) mean += v;
  mean /= 17;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= 17;
  const auto y = layernorm(x, g, b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i], 1e-5);
}

TEST(Tensor, Deterministic) {
  std::mt19937_64 rng(5);
  const Tensor2D a = random_matrix(9, 7, rng), b = random_matrix(7, 6, rng);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
  EXPECT_EQ(gelu(a), gelu(a));
  EXPECT_EQ(softmax_rows(a), softmax_rows(a));
}

TEST(TensorGrad, MatmulWrtAIsUpstreamTimesBTransposed) {
  std::mt19937_64 rng(6);
  const Tensor2D a = random_matrix(3, 4, rng), b = random_matrix(4, 5, rng), g = random_matrix(3, 5, rng);
  const auto grads = matmul_backward(a, b, g);
  const Tensor2D expect = matmul(g, transpose(b));
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(grads.da.values()[i], expect.values()[i], 1e-6);
}

TEST(TensorGrad, SoftmaxCrossEntropy) {
  const std::vector<float> logits{0.3f, -1.2f, 2.0f, 0.0f};
  const auto g = softmax_cross_entropy_backward(logits, 2);
  const Tensor2D p = softmax_rows(Tensor2D(1, 4, logits));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], p(0, i) - (i == 2 ? 1.0 : 0.0), 1e-7);
  auto loss = [](const ref::Vec& x) { return -std::log(ref::softmax_rows(x, 1, 4)[2]); };
  EXPECT_LE(fd::max_rel_error(logits, g, loss), fd::kTolerance);
}

// Each kernel: L = sum(G * f(x)) for a random upstream G, with f evaluated in
// double by the reference kernels, on up to 100 coordinates of every input.
TEST(TensorGrad, MatmulFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor2D a = random_matrix(6, 5, rng), b = random_matrix(5, 7, rng), g = random_matrix(6, 7, rng);
  const auto grads = matmul_backward(a, b, g);
  const ref::Vec ad = ref::to_double(a.values()), bd = ref::to_double(b.values());
  auto loss_a = [&](const ref::Vec& x) { return ref::dot(ref::matmul(x, bd, 6, 5, 7), g.values()); };
  auto loss_b = [&](const ref::Vec& x) { return ref::dot(ref::matmul(ad, x, 6, 5, 7), g.values()); };
  EXPECT_LE(fd::max_rel_error(a.values(), grads.da.values(), loss_a), fd::kTolerance);
  EXPECT_LE(fd::max_rel_error(b.values(), grads.db.values(), loss_b), fd::kTolerance);
}

TEST(TensorGrad, SoftmaxFiniteDifferences) {
  std::mt19937_64 rng(8);
  const Tensor2D x = random_matrix(6, 9, rng, 2.0f), g = random_matrix(6, 9, rng);
  const Tensor2D dx = softmax_rows_backward(softmax_rows(x), g);
  auto loss = [&](const ref::Vec& v) { return ref::dot(ref::softmax_rows(v, 6, 9), g.values()); };
  EXPECT_LE(fd::max_rel_error(x.values(), dx.values(), loss), fd::kTolerance);
}

TEST(TensorGrad, LayerNormFiniteDifferences) {
  std::mt19937_64 rng(9);
  const Tensor2D x = random_matrix(5, 12, rng, 2.0f), gain = random_matrix(1, 12, rng),
                 bias = random_matrix(1, 12, rng), g = random_matrix(5, 12, rng);
  std::vector<float> dgain(12, 0.0f), dbias(12, 0.0f);
  const Tensor2D dx = layernorm_rows_backward(x, gain.values(), g, dgain, dbias);
  const ref::Vec xd = ref::to_double(x.values()), gd = ref::to_double(gain.values()),
                 bd = ref::to_double(bias.values());
  auto f = [&](const ref::Vec& xx, const ref::Vec& gg, const ref::Vec& bb) {
    return ref::dot(ref::layernorm_rows(xx, gg, bb, 5, 12), g.values());
  };
  EXPECT_LE(fd::max_rel_error(x.values(), dx.values(), [&](const ref::Vec& v) { return f(v, gd, bd); }),
            fd::kTolerance);
  EXPECT_LE(fd::max_rel_error(gain.values(), dgain, [&](const ref::Vec& v) { return f(xd, v, bd); }),
            fd::kTolerance);
  EXPECT_LE(fd::max_rel_error(bias.values(), dbias, [&](const ref::Vec& v) { return f(xd, gd, v); }),
            fd::kTolerance);
}

TEST(TensorGrad, ForwardMatchesReference) {
  std::mt19937_64 rng(12);
  const Tensor2D x = random_matrix(4, 6, rng, 2.0f), gain = random_matrix(1, 6, rng), bias = random_matrix(1, 6, rng);
  const ref::Vec xd = ref::to_double(x.values());
  const auto s = softmax_rows(x);
  const auto sd = ref::softmax_rows(xd, 4, 6);
  const auto l = layernorm_rows(x, gain.values(), bias.values());
  const auto ld = ref::layernorm_rows(xd, ref::to_double(gain.values()), ref::to_double(bias.values()), 4, 6);
  const auto u = gelu(x);
  const auto ud = ref::gelu(xd);
  for (std::size_t i = 0; i < xd.size(); ++i) {
    EXPECT_NEAR(s.values()[i], sd[i], 1e-6);
    EXPECT_NEAR(l.values()[i], ld[i], 1e-5);
    EXPECT_NEAR(u.values()[i], ud[i], 1e-6);
  }
}

TEST(TensorGrad, LayerNormVectorMatchesRows) {
  std::mt19937_64 rng(10);
  const Tensor2D x = random_matrix(1, 8, rng), gain = random_matrix(1, 8, rng), g = random_matrix(1, 8, rng);
  std::vector<float> dgain(8, 0.0f), dbias(8, 0.0f);
  const Tensor2D rows = layernorm_rows_backward(x, gain.values(), g, dgain, dbias);
  const auto single = layernorm_backward(x.values(), gain.values(), g.values());
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(single.dx[i], rows(0, i), 1e-6);
    EXPECT_NEAR(single.dgain[i], dgain[i], 1e-6);
    EXPECT_NEAR(single.dbias[i], dbias[i], 1e-6);
  }
}

TEST(TensorGrad, GeluFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor2D x = random_matrix(7, 9, rng, 2.0f), g = random_matrix(7, 9, rng);
  const Tensor2D dx = gelu_backward(x, g);
  auto loss = [&](const ref::Vec& v) { return ref::dot(ref::gelu(v), g.values()); };
  EXPECT_LE(fd::max_rel_error(x.values(), dx.values(), loss), fd::kTolerance);
}

TEST(TensorGrad, ColumnSums) {
  const Tensor2D x = Tensor2D::from_rows({{1, 2}, {3, 4}, {5, 6}});
  std::vector<float> out{1, 1};
  accumulate_column_sums(x, out);
  EXPECT_EQ(out, (std::vector<float>{10, 13}));
}
