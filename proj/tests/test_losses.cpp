#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "seam/cam.hpp"
#include "seam/losses.hpp"

using namespace seam;

namespace {

Tensor ones_mask(std::size_t h, std::size_t w) { return Tensor::full({1, 1, h, w}, 1.0); }

Tensor smooth_stack(std::size_t s, double phase) {
  Tensor raw({1, 3, s, s});
  auto v = raw.mutable_values();
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        v[(k * s + y) * s + x] = std::sin(0.4 * x / s * 8 + k + phase) * std::cos(0.3 * y / s * 8 - k);
  return normalize_with_background(rectify_and_scale(raw));
}

}  // namespace

TEST(SoftMargin, Examples) {
  EXPECT_NEAR(multilabel_soft_margin(Tensor({1, 3}), Tensor({1, 3}, {1, 0, 1})).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(multilabel_soft_margin(Tensor({1, 2}, {2, -2}), Tensor({1, 2}, {1, 0})).item(), 0.1269, 5e-5);
  EXPECT_NEAR(multilabel_soft_margin(Tensor({1, 2}, {2, -2}), Tensor({1, 2}, {1, 0})).item(), std::log1p(std::exp(-2.0)),
              1e-15);
  EXPECT_LT(multilabel_soft_margin(Tensor({1, 3}, {800, 900, 1000}), Tensor({1, 3}, {1, 1, 1})).item(), 1e-300);
  EXPECT_TRUE(std::isfinite(multilabel_soft_margin(Tensor({1, 1}, {-1000}), Tensor({1, 1}, {1})).item()));
  EXPECT_THROW(multilabel_soft_margin(Tensor({1, 2}), Tensor({1, 2}, {0.5, 1})), DomainError);
  EXPECT_THROW(multilabel_soft_margin(Tensor({1, 2}), Tensor({2, 1})), DimensionError);
}

TEST(SoftMargin, MatchesLogSigmoidDefinition) {
  std::mt19937_64 rng(1);
  Tensor z = oracle::random_tensor({4, 3}, rng, -4, 4);
  Tensor l({4, 3});
  for (double& v : l.mutable_values()) v = static_cast<double>(rng() % 2);
  double ref = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z[i]));
    ref -= (l[i] * std::log(s) + (1 - l[i]) * std::log(1 - s)) / 12.0;
  }
  EXPECT_NEAR(multilabel_soft_margin(z, l).item(), ref, 1e-13);
}

TEST(SoftMargin, GradientAndConvexity) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = oracle::random_tensor({3, 3}, rng, -3, 3, true);
    Tensor z2 = oracle::random_tensor({3, 3}, rng, -3, 3);
    Tensor l({3, 3});
    for (double& v : l.mutable_values()) v = static_cast<double>(rng() % 2);
    backward(multilabel_soft_margin(z, l));
    const auto numeric = oracle::numeric_grad(z, [&] { return multilabel_soft_margin(z, l).item(); });
    EXPECT_LT(oracle::max_rel_error(z.grad(), numeric), 1e-4);
    const double mid = multilabel_soft_margin(scale(add(z.detach(), z2), 0.5), l).item();
    EXPECT_LE(mid, 0.5 * (multilabel_soft_margin(z.detach(), l).item() + multilabel_soft_margin(z2, l).item()) + 1e-15);
  }
}

TEST(ClassificationLoss, AveragesBranches) {
  std::mt19937_64 rng(3);
  Tensor a = oracle::random_tensor({2, 3}, rng), b = oracle::random_tensor({2, 3}, rng);
  Tensor l({2, 3}, {1, 0, 1, 0, 0, 1});
  EXPECT_EQ(classification_loss(a, a, l).item(), multilabel_soft_margin(a, l).item());
  EXPECT_EQ(classification_loss(a, b, l).item(),
            0.5 * (multilabel_soft_margin(a, l).item() + multilabel_soft_margin(b, l).item()));
  Tensor perfect({2, 3}, {50, -50, 50, -50, -50, 50});
  EXPECT_NEAR(classification_loss(perfect, Tensor({2, 3}), l).item(), 0.5 * std::log(2.0), 1e-15);
}

TEST(ErLoss, ZeroOnMatchingPairs) {
  const Tensor cam = smooth_stack(16, 0.0);
  EXPECT_EQ(er_loss(cam, cam, AffineTransform{}, ones_mask(16, 16)).item(), 0.0);
  AffineTransform t;
  t.scale = 0.3;
  t.rotation_deg = 9.0;
  t.translation_px = {1.0, 0.0};
  t.hflip = true;
  const Tensor warped = warp(cam, t);
  EXPECT_LT(er_loss(cam, warped, t, warp_valid_mask(t, 16, 16)).item(), 1e-10);
}

TEST(ErLoss, MatchesElementwiseOracle) {
  std::mt19937_64 rng(4);
  Tensor a = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1), b = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1);
  double ref = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) ref += std::abs(a[i] - b[i]);
  ref /= static_cast<double>(a.numel());
  EXPECT_NEAR(er_loss(a, b, AffineTransform{}, ones_mask(5, 5)).item(), ref, 1e-15);
  // A partial mask averages over the valid pixels only.
  Tensor m = ones_mask(5, 5);
  m.mutable_values()[0] = 0.0;
  double part = 0.0;
  for (std::size_t k = 0; k < 8; ++k)
    for (std::size_t p = 1; p < 25; ++p) part += std::abs(a[k * 25 + p] - b[k * 25 + p]);
  EXPECT_NEAR(er_loss(a, b, AffineTransform{}, m).item(), part / (8 * 24), 1e-15);
}

TEST(ErLoss, ShapeMismatchAfterWarp) {
  AffineTransform t;
  t.scale = 0.5;
  EXPECT_THROW(er_loss(Tensor({1, 2, 8, 8}), Tensor({1, 2, 8, 8}), t, ones_mask(4, 4)), DimensionError);
}

TEST(ErLoss, GradientReachesBothBranches) {
  std::mt19937_64 rng(5);
  Tensor a = oracle::random_tensor({1, 2, 6, 6}, rng, 0, 1, true);
  Tensor b = oracle::random_tensor({1, 2, 3, 3}, rng, 0, 1, true);
  AffineTransform t;
  t.scale = 0.5;
  const Tensor valid = warp_valid_mask(t, 6, 6);
  backward(er_loss(a, b, t, valid));
  for (Tensor* x : {&a, &b}) {
    const auto numeric = oracle::numeric_grad(*x, [&] { return er_loss(a, b, t, valid).item(); });
    EXPECT_LT(oracle::max_rel_error(x->grad(), numeric), 1e-4);
  }
}

TEST(ErLoss, SymmetricUnderSwapAndInverse) {
  const Tensor big = smooth_stack(16, 0.0);
  const Tensor small = smooth_stack(8, 0.3);
  AffineTransform down, up;
  down.scale = 0.5;
  up.scale = 2.0;
  const double fwd = er_loss(big, small, down, ones_mask(8, 8)).item();
  const double inv = er_loss(small, big, up, ones_mask(16, 16)).item();
  EXPECT_LT(std::abs(fwd - inv), 0.05);
}

TEST(Ohem, KeepAllEqualsMaskedMeanExactly) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor v = oracle::random_tensor({3, 4, 6, 6}, rng, 0, 1);
    Tensor m = ones_mask(6, 6);
    for (double& x : m.mutable_values()) x = rng() % 4 ? 1.0 : 0.0;
    EXPECT_EQ(ohem_mean(v, m, {1.0}).item(), masked_mean(v, m).item());
  }
}

TEST(Ohem, KeepsTheLargestPixels) {
  Tensor v({1, 1, 2, 2}, {0.1, 0.4, 0.2, 0.3});
  EXPECT_DOUBLE_EQ(ohem_mean(v, ones_mask(2, 2), {0.5}).item(), 0.35);
  Tensor m = ones_mask(2, 2);
  m.mutable_values()[1] = 0.0;  // the largest pixel is out of bounds
  EXPECT_DOUBLE_EQ(ohem_mean(v, m, {0.5}).item(), 0.25);
  EXPECT_THROW(ohem_mean(v, m, {0.0}), ParameterError);
  EXPECT_THROW(ohem_mean(v, m, {1.5}), ParameterError);
}

TEST(Ohem, MatchesSortAndSelectOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor v = oracle::random_tensor({2, 3, 5, 5}, rng, 0, 1);
    const double keep = 0.05 + (rng() % 95) / 100.0;
    double ref = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> pix(25, 0.0);
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t p = 0; p < 25; ++p) pix[p] += v[(b * 3 + k) * 25 + p] / 3.0;
      std::sort(pix.begin(), pix.end(), std::greater<>());
      const auto n = static_cast<std::size_t>(std::ceil(keep * 25 - 1e-9));
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += pix[i];
      ref += s / n / 2.0;
    }
    EXPECT_NEAR(ohem_mean(v, ones_mask(5, 5), {keep}).item(), ref, 1e-14);
  }
}

TEST(EcrLoss, Examples) {
  std::mt19937_64 rng(8);
  Tensor yo = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1), yt = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1);
  Tensor ho = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1), ht = oracle::random_tensor({2, 4, 5, 5}, rng, 0, 1);
  const Tensor m = ones_mask(5, 5);
  const AffineTransform id;
  EXPECT_EQ(ecr_loss(yo, yt, ho, ht, id, m, {1.0}).item(),
            add(masked_mean(abs(sub(yo, ht)), m), masked_mean(abs(sub(ho, yt)), m)).item());
  EXPECT_EQ(ecr_loss(yo, ho, ho, yo, id, m, {0.2}).item(), 0.0);
  EXPECT_THROW(ecr_loss(yo, yt, ho, ht, id, m, {0.0}), ParameterError);
  // Four single-channel pixels with losses (0.4, 0.3, 0.2, 0.1) in each term.
  Tensor zero({1, 1, 2, 2});
  Tensor d({1, 1, 2, 2}, {0.4, 0.3, 0.2, 0.1});
  EXPECT_DOUBLE_EQ(ecr_loss(d, d, zero, zero, id, ones_mask(2, 2), {0.5}).item(), 0.7);
}

TEST(EcrLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  Tensor yo = oracle::random_tensor({1, 3, 6, 6}, rng, 0, 1, true), yt = oracle::random_tensor({1, 3, 3, 3}, rng, 0, 1, true);
  Tensor ho = oracle::random_tensor({1, 3, 6, 6}, rng, 0, 1, true), ht = oracle::random_tensor({1, 3, 3, 3}, rng, 0, 1, true);
  AffineTransform t;
  t.scale = 0.5;
  const Tensor valid = warp_valid_mask(t, 6, 6);
  auto f = [&] { return ecr_loss(yo, yt, ho, ht, t, valid, {0.5}); };
  backward(f());
  for (Tensor* x : {&yo, &yt, &ho, &ht}) {
    const auto numeric = oracle::numeric_grad(*x, [&] { return f().item(); });
    EXPECT_LT(oracle::max_rel_error(x->grad(), numeric), 1e-4);
  }
}

TEST(TotalLoss, AdditivityIsExact) {
  const auto b = total_loss(Tensor::scalar(0.2), Tensor::scalar(0.1), Tensor::scalar(0.3));
  EXPECT_EQ(b.total, 0.2 + 0.1 + 0.3);
  EXPECT_NEAR(b.total, 0.6, 1e-15);
  const auto z = total_loss(Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0));
  EXPECT_EQ(z.total, 0.0);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = u(rng), e = u(rng), c = u(rng);
    const auto r = total_loss(Tensor::scalar(a), Tensor::scalar(e), Tensor::scalar(c));
    EXPECT_EQ(r.total, a + e + c);
    EXPECT_EQ(r.l_cls, a);
    EXPECT_EQ(r.l_er, e);
    EXPECT_EQ(r.l_ecr, c);
  }
  const auto w = total_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(4), {1.0, 0.0, 0.5});
  EXPECT_EQ(w.total, 3.0);
}
