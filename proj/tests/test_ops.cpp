#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "clmr/error.hpp"
#include "clmr/gradcheck.hpp"
#include "clmr/ops.hpp"

using namespace clmr;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false, double scale_by = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale_by);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Straightforward six-loop cross-correlation.
std::vector<double> conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, Padding pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const long p = pad == Padding::Same ? long(k / 2) : 0;
  const std::size_t ho = pad == Padding::Same ? h : h - k + 1, wo = pad == Padding::Same ? wd : wd - k + 1;
  std::vector<double> out(n * co * ho * wo, 0.0);
  const auto xv = x.values();
  const auto wv = w.values();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t z = 0; z < wo; ++z) {
          double acc = b.defined() ? b.values()[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(y + ky) - p, ix = long(z + kx) - p;
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += xv[((s * ci + c) * h + std::size_t(iy)) * wd + std::size_t(ix)] *
                       wv[((o * ci + c) * k + ky) * k + kx];
              }
          out[((s * co + o) * ho + y) * wo + z] = acc;
        }
  return out;
}

// Weighted sum so every output element carries a distinct upstream gradient.
Tensor probe_loss(const Tensor& out, std::uint64_t seed) {
  return sum(mul(out, random_tensor(out.shape(), seed)));
}

struct ConvCase {
  std::size_t n, cin, h, w, cout, k;
  Padding pad;
  bool bias;
};

class ConvTest : public ::testing::TestWithParam<ConvCase> {};

}  // namespace

TEST_P(ConvTest, ForwardMatchesReference) {
  const auto c = GetParam();
  const Tensor x = random_tensor({c.n, c.cin, c.h, c.w}, 1);
  const Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, 2);
  const Tensor b = c.bias ? random_tensor({c.cout}, 3) : Tensor();
  const Tensor y = conv2d(x, w, b, c.pad);
  const auto ref = conv_reference(x, w, b, c.pad);
  ASSERT_EQ(y.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.values()[i], ref[i], 1e-12) << i;
}

TEST_P(ConvTest, GradientsMatchFiniteDifferences) {
  const auto c = GetParam();
  Tensor x = random_tensor({c.n, c.cin, c.h, c.w}, 4, true);
  Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, 5, true, 0.3);
  Tensor b = c.bias ? random_tensor({c.cout}, 6, true) : Tensor();
  std::vector<Tensor> params{x, w};
  if (c.bias) params.push_back(b);
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 40;
  opt.seed = 7;
  const double err = finite_diff_check([&] { return probe_loss(conv2d(x, w, b, c.pad), 8); }, params, 1e-5, opt);
  EXPECT_LT(err, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(
    Paths, ConvTest,
    ::testing::Values(ConvCase{2, 3, 10, 10, 5, 3, Padding::Same, true},    // direct, cout % 4 != 0
                      ConvCase{3, 2, 12, 12, 9, 3, Padding::Valid, false},  // direct, valid padding
                      ConvCase{2, 4, 9, 11, 8, 5, Padding::Same, true},     // direct, k = 5, non-square
                      ConvCase{2, 3, 16, 16, 16, 3, Padding::Same, false},  // direct, several blocks
                      ConvCase{2, 6, 6, 6, 4, 3, Padding::Same, true},      // narrow map, GEMM path
                      ConvCase{4, 3, 2, 2, 5, 3, Padding::Same, false},     // 2x2 maps packed per tile
                      ConvCase{2, 7, 8, 8, 3, 1, Padding::Same, true},      // 1x1 kernel
                      ConvCase{1, 1, 5, 5, 2, 3, Padding::Valid, true}));

TEST(Conv, ShapeErrors) {
  const Tensor x({1, 2, 8, 8}, 0.0);
  EXPECT_THROW(conv2d(x, Tensor({3, 3, 3, 3}, 0.0), Tensor(), Padding::Same), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({3, 2, 2, 2}, 0.0), Tensor(), Padding::Same), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({3, 2, 3, 3}, 0.0), Tensor({2}, 0.0), Padding::Same), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 8}, 0.0), Tensor({3, 2, 3, 3}, 0.0), Tensor(), Padding::Same), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 2, 2}, 0.0), Tensor({3, 2, 3, 3}, 0.0), Tensor(), Padding::Valid), ShapeError);
}

TEST(BatchNorm, TrainModeNormalizes) {
  const Tensor x = random_tensor({4, 3, 5, 5}, 11, false, 3.0);
  const Tensor g({3}, 1.0), s({3}, 0.0);
  auto stats = BatchNormStats::init(3);
  const Tensor y = batch_norm(x, g, s, stats, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) {
        const double v = y.values()[(b * 3 + c) * 25 + i];
        mean += v;
        sq += v * v;
      }
    EXPECT_NEAR(mean / 100, 0.0, 1e-12);
    EXPECT_NEAR(sq / 100, 1.0, 1e-5);
  }
  EXPECT_NE(stats.running_mean[0], 0.0);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  auto stats = BatchNormStats::init(2);
  stats.running_mean = {1.0, -2.0};
  stats.running_var = {4.0, 0.25};
  const Tensor x({1, 2, 1, 1}, std::vector<double>{3.0, -1.0});
  const Tensor g({2}, std::vector<double>{2.0, 1.0}), s({2}, std::vector<double>{0.5, 0.0});
  const Tensor y = batch_norm(x, g, s, stats, Mode::Eval);
  EXPECT_NEAR(y.values()[0], 2.0 * (2.0 / std::sqrt(4.0 + stats.eps)) + 0.5, 1e-12);
  EXPECT_NEAR(y.values()[1], 1.0 / std::sqrt(0.25 + stats.eps), 1e-12);
  EXPECT_EQ(stats.running_mean[0], 1.0);
}

TEST(BatchNorm, Gradients) {
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    Tensor x = random_tensor({3, 2, 4, 5}, 12, true, 2.0);
    Tensor g = random_tensor({2}, 13, true);
    Tensor s = random_tensor({2}, 14, true);
    std::vector<Tensor> params{x, g, s};
    const double err = finite_diff_check(
        [&] {
          auto stats = BatchNormStats::init(2);
          stats.running_var = {1.5, 0.7};
          return probe_loss(batch_norm(x, g, s, stats, mode), 15);
        },
        params, 1e-5);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(BatchNorm, DegenerateBatchRejected) {
  auto stats = BatchNormStats::init(1);
  EXPECT_THROW(batch_norm(Tensor({1, 1, 1, 1}, 1.0), Tensor({1}, 1.0), Tensor({1}, 0.0), stats, Mode::Train),
               DomainError);
}

TEST(Ops, ReluAndGradient) {
  const Tensor x({4}, std::vector<double>{-1.0, 0.5, 2.0, -0.1}, true);
  const Tensor y = relu(x);
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[2], 2.0);
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Ops, MaxPoolPicksMaximum) {
  const Tensor x({1, 1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 8, 7}, true);
  const Tensor y = max_pool2x2(x);
  ASSERT_EQ(y.numel(), 2u);
  EXPECT_EQ(y.values()[0], 5.0);
  EXPECT_EQ(y.values()[1], 8.0);
  backward(sum(y));
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[6], 1.0);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_THROW(max_pool2x2(Tensor({1, 1, 3, 4}, 0.0)), ShapeError);
}

TEST(Ops, UpsampleRepeatsPixels) {
  const Tensor x({1, 1, 1, 2}, std::vector<double>{1.0, 2.0});
  const Tensor y = upsample2x(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(y.values()[i], want[i]);
}

TEST(Ops, ConcatOrdersChannels) {
  const Tensor a({1, 1, 1, 2}, std::vector<double>{1, 2});
  const Tensor b({1, 2, 1, 2}, std::vector<double>{3, 4, 5, 6});
  const Tensor c = concat_channels(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 3, 1, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(c.values()[i], double(i + 1));
  EXPECT_THROW(concat_channels(a, Tensor({1, 1, 2, 2}, 0.0)), ShapeError);
}

TEST(Ops, PoolUpsampleConcatGradients) {
  Tensor x = random_tensor({2, 2, 4, 6}, 21, true);
  Tensor y = random_tensor({2, 3, 2, 3}, 22, true);
  std::vector<Tensor> params{x, y};
  const double err = finite_diff_check(
      [&] { return probe_loss(concat_channels(upsample2x(max_pool2x2(x)), upsample2x(y)), 23); }, params, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(Ops, SoftmaxCrossEntropy) {
  // Uniform logits: loss is log(C).
  const Tensor flat({1, 4, 1, 2}, 0.3);
  const std::vector<std::int32_t> labels{0, 3};
  EXPECT_NEAR(softmax_cross_entropy(flat, labels).item(), std::log(4.0), 1e-14);

  Tensor logits = random_tensor({2, 3, 2, 2}, 31, true, 2.0);
  std::vector<std::int32_t> lab{0, 1, 2, 1, 2, 2, 0, 1};
  std::vector<Tensor> params{logits};
  EXPECT_LT(finite_diff_check([&] { return softmax_cross_entropy(logits, lab); }, params, 1e-5), 1e-6);

  lab[3] = 3;
  EXPECT_THROW(softmax_cross_entropy(logits, lab), DomainError);
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<std::int32_t>(3, 0)), ShapeError);
}

TEST(GradCheck, DetectsWrongGradient) {
  Tensor x({3}, std::vector<double>{0.5, -1.0, 2.0}, true);
  std::vector<Tensor> params{x};
  // Correct gradient passes.
  EXPECT_LT(finite_diff_check([&] { return sum(mul(x, x)); }, params, 1e-5), 1e-8);
  // A node whose backward ignores half of the true derivative is flagged.
  auto wrong = [&] {
    auto impl = x.impl();
    std::vector<double> v(3);
    for (int i = 0; i < 3; ++i) v[i] = x.values()[i] * x.values()[i];
    Tensor sq = Tensor::make_result({3}, v, {x}, [impl](const detail::TensorImpl& out) {
      auto& g = impl->grad_buffer();
      for (int i = 0; i < 3; ++i) g[i] += out.grad[i] * impl->values[i];
    });
    return sum(sq);
  };
  EXPECT_GT(finite_diff_check(wrong, params, 1e-5), 0.4);
  EXPECT_THROW(finite_diff_check(wrong, params, 1.0), ConfigError);
}
