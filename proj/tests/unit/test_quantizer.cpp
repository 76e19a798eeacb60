#include <gtest/gtest.h>

#include <cmath>

#include "qsvd/error.hpp"
#include "qsvd/factorizer.hpp"
#include "qsvd/linalg.hpp"
#include "qsvd/quantizer.hpp"
#include "qsvd/rng.hpp"
#include "test_util.hpp"

using namespace qsvd;

namespace {

LayerFactors seeded_factors(std::size_t e, std::uint64_t seed, std::size_t rank = 0) {
  Rng rng(seed);
  AttentionLayerWeights w{rng.gaussian(e, e), rng.gaussian(e, e), rng.gaussian(e, e), rng.gaussian(e, e)};
  const auto f = factorize_layer(w, no_whitening(e));
  return rank ? truncate(f, rank) : f;
}

std::vector<DenseMatrix> seeded_inputs(std::size_t n, std::size_t len, std::size_t e, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DenseMatrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(rng.gaussian(len, e));
  return out;
}

// max over channels of max_t |x| divided by the mean over channels
double channel_ratio(const DenseMatrix& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] = std::max(m[c], std::abs(x(r, c)));
  double mx = 0, mean = 0;
  for (double v : m) mx = std::max(mx, v), mean += v / m.size();
  return mx / mean;
}

double mean_sq(const DenseMatrix& a, const DenseMatrix& b) {
  const auto d = a - b;
  return std::pow(d.frobenius_norm(), 2) / d.size();
}

}  // namespace

TEST(QuantizeTensor, FourBitHandExample) {
  const auto x = DenseMatrix::from_rows({{-3.5, 0, 7}});
  const auto q = quantize_tensor(x, 4, Granularity::kPerToken, 1.0);
  EXPECT_EQ(q.scales, std::vector<double>{1.0});
  EXPECT_EQ(q.codes, DenseMatrix::from_rows({{-4, 0, 7}}));
  EXPECT_EQ(q.dequantized, DenseMatrix::from_rows({{-4, 0, 7}}));
}

TEST(QuantizeTensor, SixteenBitsIsIdentity) {
  Rng rng(1);
  const auto x = rng.gaussian(5, 7);
  for (auto g : {Granularity::kPerTensor, Granularity::kPerToken, Granularity::kPerChannel})
    EXPECT_EQ(quantize_tensor(x, 16, g, 0.8).dequantized, x);
}

TEST(QuantizeTensor, IdempotentBitwise) {
  Rng rng(2);
  for (int bits : {4, 8}) {
    for (auto g : {Granularity::kPerTensor, Granularity::kPerToken, Granularity::kPerChannel}) {
      const auto x = rng.gaussian(6, 9, 3.0);
      const auto once = quantize_tensor(x, bits, g, 1.0).dequantized;
      EXPECT_EQ(quantize_tensor(once, bits, g, 1.0).dequantized, once) << bits;
    }
  }
}

TEST(QuantizeTensor, AllZeroGroup) {
  DenseMatrix x(2, 3);
  x(1, 2) = 5.0;
  const auto q = quantize_tensor(x, 4, Granularity::kPerToken, 1.0);
  EXPECT_EQ(q.scales[0], kMinScale);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(q.codes(0, c), 0.0);
  EXPECT_EQ(q.dequantized(1, 2), 5.0);
}

TEST(QuantizeTensor, CodesClamped) {
  Rng rng(3);
  const auto x = rng.gaussian(4, 10);
  const auto q = quantize_tensor(x, 4, Granularity::kPerToken, 0.7);
  for (double c : q.codes.values()) EXPECT_LE(std::abs(c), 7.0);
  EXPECT_EQ(q.scales.size(), 4u);
}

TEST(QuantizeTensor, RejectsBadBitsAndRatio) {
  const auto x = DenseMatrix::identity(2);
  EXPECT_THROW(quantize_tensor(x, 5, Granularity::kPerToken, 1.0), Error);
  EXPECT_THROW(quantize_tensor(x, 4, Granularity::kPerToken, 0.0), Error);
  EXPECT_THROW(quantize_tensor(x, 4, Granularity::kPerToken, 1.2), Error);
}

TEST(ClipSearch, LargeValueKeepsFullRange) {
  const std::vector<double> g{0, 1, 10};
  EXPECT_EQ(search_weight_clip(g, 4), 1.0);
  const double s = 10.0 / 7.0;
  EXPECT_NEAR(group_quant_error(g, 4, 1.0), (1 - s) * (1 - s), 1e-12);
  EXPECT_NEAR(group_quant_error(g, 4, 1.0) / 3.0, 0.061, 5e-4);  // as a per-element mean
  EXPECT_GE(group_quant_error(g, 4, 0.5), 25.0);
}

TEST(ClipSearch, UniformGroup) {
  const std::vector<double> g(6, 2.5);
  EXPECT_EQ(search_weight_clip(g, 4), 1.0);
  EXPECT_EQ(group_quant_error(g, 4, 1.0), 0.0);
}

TEST(ClipSearch, ExhaustiveArgminNeverWorseThanFull) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const int bits = t % 2 ? 4 : 8;
    auto m = rng.gaussian(1, 16);
    m(0, t % 16) *= 1 + 10 * rng.uniform();  // occasional outlier
    const std::vector<double> g(m.values().begin(), m.values().end());
    const double got = search_weight_clip(g, bits);
    double best = INFINITY, arg = 0;
    for (double r : clip_grid()) {
      const double e = group_quant_error(g, bits, r);
      if (e < best) best = e, arg = r;
    }
    EXPECT_EQ(got, arg);
    EXPECT_LE(group_quant_error(g, bits, got), group_quant_error(g, bits, 1.0));
  }
  const auto grid = clip_grid();
  ASSERT_EQ(grid.size(), 7u);
  EXPECT_EQ(grid.front(), 1.0);
  EXPECT_NEAR(grid.back(), 0.7, 1e-15);
}

TEST(Rotations, HadamardWherePowerOfTwo) {
  const auto p = build_rotations(32, 12, 9, RotationMode::kHadamard);
  EXPECT_EQ(p.h1_spec.kind, RotationKind::kHadamard);
  EXPECT_EQ(p.h1, hadamard(32));
  EXPECT_EQ(p.h2_spec.kind, RotationKind::kRandomOrthogonal);
  EXPECT_LE(orthogonality_error(p.h2), 1e-10);
  EXPECT_EQ(p.h2.rows(), 12u);
}

TEST(Rotations, DeterministicPerSeed) {
  const auto a = build_rotations(12, 6, 3, RotationMode::kRandom);
  const auto b = build_rotations(12, 6, 3, RotationMode::kRandom);
  EXPECT_EQ(a.h1, b.h1);
  EXPECT_EQ(a.h2, b.h2);
  EXPECT_FALSE(a.h1 == build_rotations(12, 6, 4, RotationMode::kRandom).h1);
  const auto none = build_rotations(4, 2, 1, RotationMode::kNone);
  EXPECT_EQ(none.h1, DenseMatrix::identity(4));
  EXPECT_EQ(none.h2, DenseMatrix::identity(2));
}

TEST(Rotations, FullPrecisionInvariance) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto f = seeded_factors(16, seed, 6 + seed % 5);
    Rng rng(seed + 50);
    const auto x = rng.gaussian(7, 16);
    for (auto mode : {RotationMode::kHadamard, RotationMode::kRandom}) {
      const auto layer = quantize_layer(f, build_rotations(16, f.rank(), seed, mode), QuantSpec{}, 0.5);
      const auto rotated = expand_latent(layer, project_latent(layer, x));
      const auto plain = matmul(matmul(x, f.with_beta(0.5).w_down()), f.with_beta(0.5).w_up());
      EXPECT_LE(max_abs_diff(rotated, plain), 1e-9) << "seed " << seed;
    }
  }
}

TEST(Rotations, HadamardSmoothsPlantedOutliers) {
  const auto cfg = testutil::small_config(1, 32, 4);
  const auto h = hadamard(32);
  int ratio_wins = 0, mse_wins = 0;
  const QuantSpec a4{16, 4, std::nullopt, kActivationClipRatio};
  for (std::uint64_t t = 0; t < 100; ++t) {
    const auto calib = testutil::calib_for(cfg, 1, 16, 1000 + t, {t % 32});
    const auto& x = calib.inputs[0];
    const auto xr = matmul_nt(x, h);
    ratio_wins += channel_ratio(xr) < channel_ratio(x);
    Rng rng(2000 + t);
    const auto w = rng.gaussian(32, 32);
    const auto y = matmul(x, w);
    const double rotated = mean_sq(matmul(quantize_activation(xr, a4), matmul(h, w)), y);
    const double plain = mean_sq(matmul(quantize_activation(x, a4), w), y);
    mse_wins += rotated <= plain;
  }
  EXPECT_GE(ratio_wins, 90);
  EXPECT_GE(mse_wins, 90);
}

TEST(QuantizeLayer, SixteenBitMatchesFullPrecision) {
  const auto f = seeded_factors(8, 3, 5);
  const auto layer = quantize_layer(f, build_rotations(8, 5, 1, RotationMode::kHadamard), QuantSpec{}, 0.3);
  Rng rng(5);
  const auto x = rng.gaussian(4, 8);
  EXPECT_LE(max_abs_diff(expand_latent(layer, project_latent(layer, x)),
                         matmul(matmul(x, f.with_beta(0.3).w_down()), f.with_beta(0.3).w_up())),
            1e-9);
}

TEST(QuantizeLayer, EightBitWeightErrorBound) {
  const QuantSpec w8{8, 16, std::nullopt, kActivationClipRatio};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto f = seeded_factors(8, seed);
    const auto layer = quantize_layer(f, build_rotations(8, 8, seed, RotationMode::kNone), w8, 0.5);
    const auto g = f.with_beta(0.5);
    const DenseMatrix raw[] = {g.w_down(), g.w_up_q(), g.w_up_k(), g.w_up_v()};
    const QuantizedTensor* qt[] = {&layer.down, &layer.up_q, &layer.up_k, &layer.up_v};
    for (int m = 0; m < 4; ++m) {
      const auto& w = raw[m];
      const auto& q = qt[m]->dequantized;
      for (std::size_t c = 0; c < w.cols(); ++c) {
        double err = 0, norm = 0, mx = 0, emax = 0;
        for (std::size_t r = 0; r < w.rows(); ++r) {
          const double d = w(r, c) - q(r, c);
          err += d * d, norm += w(r, c) * w(r, c);
          mx = std::max(mx, std::abs(w(r, c)));
          emax = std::max(emax, std::abs(d));
        }
        const double slack = 1e-6;
        EXPECT_LE(std::sqrt(err / norm), std::ldexp(1.0, -7) + slack) << "seed " << seed << " m " << m << " c " << c;
        EXPECT_LE(emax, (std::ldexp(1.0, -7) + slack) * mx);
      }
    }
  }
}

TEST(QuantizeLayer, DequantizedEqualsCodesTimesScales) {
  const auto f = seeded_factors(8, 2, 4);
  const auto layer = quantize_layer(f, build_rotations(8, 4, 2, RotationMode::kHadamard), quant_spec_for_scheme("w4a4"), 0.4);
  for (const QuantizedTensor* t : {&layer.down, &layer.up_q, &layer.up_k, &layer.up_v})
    for (std::size_t r = 0; r < t->codes.rows(); ++r)
      for (std::size_t c = 0; c < t->codes.cols(); ++c)
        EXPECT_EQ(t->dequantized(r, c), t->codes(r, c) * t->scales[c]);
  EXPECT_EQ(layer.beta, 0.4);
}

TEST(QuantizeLayer, ShapeMismatch) {
  const auto f = seeded_factors(8, 2, 4);
  EXPECT_THROW(quantize_layer(f, build_rotations(8, 5, 2, RotationMode::kHadamard), QuantSpec{}, 0.5), Error);
}

TEST(OptimizeBeta, FullPrecisionObjectiveIsZero) {
  const auto f = seeded_factors(8, 6, 5);
  const auto xs = seeded_inputs(3, 6, 8, 1);
  const auto r = optimize_beta(f, build_rotations(8, 5, 1, RotationMode::kNone), QuantSpec{}, xs);
  EXPECT_EQ(r.beta, 0.0);
  ASSERT_EQ(r.objectives.size(), 11u);
  for (double o : r.objectives) EXPECT_EQ(o, 0.0);
}

TEST(OptimizeBeta, ExhaustiveArgminAndDefaultBound) {
  for (const char* scheme : {"w8a8", "w8a4", "w4a4"}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto f = seeded_factors(8, seed, 6);
      const auto rot = build_rotations(8, 6, seed, RotationMode::kHadamard);
      const auto spec = quant_spec_for_scheme(scheme);
      const auto xs = seeded_inputs(2, 5, 8, seed + 10);
      const auto r = optimize_beta(f, rot, spec, xs);
      double best = INFINITY, arg = -1;
      for (double b : beta_grid()) {
        const double o = beta_objective(f, rot, spec, xs, b);
        if (o < best) best = o, arg = b;
      }
      EXPECT_EQ(r.beta, arg) << scheme << " seed " << seed;
      EXPECT_LE(beta_objective(f, rot, spec, xs, r.beta), beta_objective(f, rot, spec, xs, 0.5));
    }
  }
}

TEST(OptimizeBeta, PlantedSpreadPenalizesBetaOne) {
  // Σ = diag(100, 1), orthonormal bases, 4-bit cache
  Rng rng(42);
  const auto u = random_orthogonal(2, 1);
  const auto v = random_orthogonal(6, 2).block(0, 0, 2, 6);
  const LayerFactors f(u, {100.0, 1.0}, v, 0.5, no_whitening(2), {0, 1});
  const QuantSpec a4{16, 4, std::nullopt, kActivationClipRatio};
  const auto rot = build_rotations(2, 2, 0, RotationMode::kNone);
  const auto xs = seeded_inputs(4, 16, 2, 42);
  EXPECT_GT(beta_objective(f, rot, a4, xs, 1.0), beta_objective(f, rot, a4, xs, 0.0));
}

TEST(OptimizeBeta, EmptyCalibrationRejected) {
  const auto f = seeded_factors(4, 1);
  EXPECT_THROW(optimize_beta(f, build_rotations(4, 4, 1, RotationMode::kNone), QuantSpec{}, {}), Error);
}

TEST(Schemes, NamesRoundTrip) {
  for (const char* s : {"fp", "w8a8", "w8a4", "w4a4"}) EXPECT_EQ(scheme_for_spec(quant_spec_for_scheme(s)), s);
  EXPECT_EQ(quant_spec_for_scheme("w8a4").activation_bits, 4);
  EXPECT_THROW(quant_spec_for_scheme("w2a2"), Error);
}
