#include <gtest/gtest.h>

#include <cmath>

#include "qsvd/compressed_model.hpp"
#include "qsvd/cost_model.hpp"
#include "qsvd/error.hpp"
#include "qsvd/latent_engine.hpp"
#include "qsvd/rng.hpp"
#include "test_util.hpp"

using namespace qsvd;

namespace {

CompressedModel uniform_rank(const ToyModel& m, std::size_t r) {
  CompressedModel c = full_rank_model(m, factorize_model(m, WhiteningTransform::Kind::kNone, nullptr));
  for (auto& f : c.layers) f = truncate(f, r);
  return c;
}

DenseMatrix dense_outputs(const ToyModel& m, const DenseMatrix& x) {
  InferenceEngine e(m);
  return e.prefill(x);
}

DenseMatrix latent_outputs(const CompressedModel& m, const DenseMatrix& x) {
  InferenceEngine e(m);
  return e.prefill(x);
}

DenseMatrix decode_all(InferenceEngine& e, const DenseMatrix& x, std::size_t prompt) {
  DenseMatrix out(x.rows(), x.cols());
  const auto head = e.prefill(x.block(0, 0, prompt, x.cols()));
  for (std::size_t t = 0; t < prompt; ++t)
    for (std::size_t c = 0; c < x.cols(); ++c) out(t, c) = head(t, c);
  for (std::size_t t = prompt; t < x.rows(); ++t) {
    const auto y = e.decode_step(x.block(t, 0, 1, x.cols()));
    for (std::size_t c = 0; c < x.cols(); ++c) out(t, c) = y(0, c);
  }
  return out;
}

}  // namespace

TEST(Engine, DenseMatchesForward) {
  const auto m = make_toy_model(testutil::small_config(3, 8, 2, true), 4);
  Rng rng(1);
  const auto x = rng.gaussian(7, 8);
  EXPECT_LE(max_abs_diff(dense_outputs(m, x), forward(m, x).output), 1e-12);
}

TEST(Engine, FullRankLatentEqualsDense) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto cfg = testutil::small_config(2 + seed % 3, 16, 2 + 2 * (seed % 2), seed % 3 == 0);
    const auto m = make_toy_model(cfg, seed);
    Rng rng(seed + 1000);
    const auto x = rng.gaussian(3 + seed % 9, 16);
    EXPECT_LE(max_abs_diff(latent_outputs(uniform_rank(m, 16), x), dense_outputs(m, x)), 1e-6) << "seed " << seed;
  }
}

TEST(Engine, SingleTokenPrefillIsForward) {
  const auto m = make_toy_model(testutil::small_config(), 2);
  Rng rng(3);
  const auto x = rng.gaussian(1, 8);
  EXPECT_LE(max_abs_diff(latent_outputs(uniform_rank(m, 8), x), forward(m, x).output), 1e-9);
  EXPECT_LE(max_abs_diff(dense_outputs(m, x), forward(m, x).output), 1e-9);
}

TEST(Engine, DecodeMatchesPrefill) {
  for (bool rope : {false, true}) {
    const auto m = make_toy_model(testutil::small_config(2, 16, 4, rope), 11);
    const auto c = uniform_rank(m, 16);
    const auto lo = uniform_rank(m, 6);
    Rng rng(5);
    const auto x = rng.gaussian(9, 16);
    for (std::size_t prompt : {1u, 4u, 8u}) {
      InferenceEngine d(m), l(c), t(lo);
      EXPECT_LE(max_abs_diff(decode_all(d, x, prompt), dense_outputs(m, x)), 1e-6) << "rope " << rope;
      EXPECT_LE(max_abs_diff(decode_all(l, x, prompt), latent_outputs(c, x)), 1e-6) << "rope " << rope;
      // the consistency holds below full rank as well
      EXPECT_LE(max_abs_diff(decode_all(t, x, prompt), latent_outputs(lo, x)), 1e-6) << "rope " << rope;
    }
  }
}

TEST(Engine, DecodeOfNextTokenMatchesLongerPrefill) {
  const auto m = make_toy_model(testutil::small_config(2, 8, 2, true), 6);
  const auto c = uniform_rank(m, 8);
  Rng rng(8);
  const auto x = rng.gaussian(6, 8);
  InferenceEngine e(c);
  e.prefill(x.block(0, 0, 5, 8));
  const auto y = e.decode_step(x.block(5, 0, 1, 8));
  const auto full = latent_outputs(c, x);
  EXPECT_LE(max_abs_diff(y, full.block(5, 0, 1, 8)), 1e-6);
  EXPECT_EQ(e.tokens_seen(), 6u);
}

TEST(Engine, DivergenceShrinksWithRank) {
  const auto m = make_toy_model(ModelConfig{}, 3);
  const auto calib = testutil::calib_for(m.config, 4, 16, 3);
  double prev = INFINITY;
  for (std::size_t r : {8u, 16u, 24u, 32u}) {
    const auto rep = evaluate(uniform_rank(m, r), m, calib);
    EXPECT_LE(rep.output_mse, prev) << "r=" << r;
    prev = rep.output_mse;
  }
  EXPECT_LE(prev, 1e-12);
}

TEST(Engine, W8A8WithinGoldenEnvelope) {
  const auto run = testutil::run_pipeline("w8a8");
  bool recorded = false;
  const auto g = testutil::golden("w8a8_output_mse", run.report.output_mse, &recorded);
  if (recorded) std::cout << "golden w8a8_output_mse recorded: " << run.report.output_mse << "\n";
  EXPECT_TRUE(std::isfinite(run.report.output_mse));
  EXPECT_LE(run.report.output_mse, g.get<double>() * 1.05);
}

TEST(Engine, CacheSizesMatchClosedForms) {
  const auto m = make_toy_model(ModelConfig{}, 1);
  Rng rng(2);
  const auto x = rng.gaussian(16, 32);
  InferenceEngine d(m);
  d.prefill(x);
  const auto c = uniform_rank(m, 12);
  InferenceEngine l(c);
  l.prefill(x);
  std::uint64_t dense = 0, latent = 0;
  for (auto v : d.cache_elements()) dense += v;
  for (auto v : l.cache_elements()) latent += v;
  EXPECT_EQ(dense, 4096u);
  EXPECT_EQ(latent, 768u);
  EXPECT_EQ(static_cast<double>(latent) / dense, 0.1875);
  const std::vector<std::size_t> ranks(4, 12);
  const auto joint = cost(Scheme::kJointSvd, 32, 16, ranks);
  const auto base = cost(Scheme::kDense, 32, 16, ranks);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(l.cache_elements()[i], joint.per_layer[i].eta);
    EXPECT_EQ(d.cache_elements()[i], base.per_layer[i].eta);
    EXPECT_EQ(l.latent_cache().rows[i].rows(), 16u);
    EXPECT_EQ(l.latent_cache().rows[i].cols(), 12u);
    EXPECT_EQ(d.dense_cache().keys[i].rows(), 16u);
  }
}

TEST(Engine, LatentRowsAreProjectedInputs) {
  const auto m = make_toy_model(testutil::small_config(1, 8, 2), 2);
  const auto c = uniform_rank(m, 5);
  Rng rng(3);
  const auto x = rng.gaussian(4, 8);
  InferenceEngine e(c);
  e.prefill(x);
  const auto normed = forward(m, x).layers[0].normed;
  EXPECT_LE(max_abs_diff(e.latent_cache().rows[0], matmul(normed, c.layers[0].w_down())), 1e-12);
}

TEST(Engine, Causality) {
  const auto run = testutil::run_pipeline("w4a4", 0.1875, 0, testutil::small_config(2, 8, 2, true));
  Rng rng(4);
  const auto x = rng.gaussian(6, 8);
  auto y = x;
  for (std::size_t c = 0; c < 8; ++c) y(4, c) *= -2.0, y(5, c) += 1.0;
  const auto a = latent_outputs(run.compressed, x), b = latent_outputs(run.compressed, y);
  EXPECT_EQ(a.block(0, 0, 4, 8), b.block(0, 0, 4, 8));
  const auto da = dense_outputs(run.model, x), db = dense_outputs(run.model, y);
  EXPECT_EQ(da.block(0, 0, 4, 8), db.block(0, 0, 4, 8));
}

TEST(Engine, Errors) {
  const auto m = make_toy_model(testutil::small_config(), 1);
  {
    InferenceEngine e(m);
    try {
      e.decode_step(DenseMatrix(1, 8));
      FAIL();
    } catch (const Error& err) {
      EXPECT_EQ(err.code(), "decode_before_prefill");
    }
    EXPECT_THROW(e.prefill(DenseMatrix(0, 8)), Error);
    EXPECT_THROW(e.prefill(DenseMatrix(2, 7)), Error);
  }
  {
    InferenceEngine e(m, 3);
    e.prefill(DenseMatrix(3, 8));
    try {
      e.decode_step(DenseMatrix(1, 8));
      FAIL();
    } catch (const Error& err) {
      EXPECT_EQ(err.code(), "cache_capacity");
    }
  }
  {
    InferenceEngine e(m);
    e.prefill(DenseMatrix(2, 8));
    EXPECT_THROW(e.prefill(DenseMatrix(2, 8)), Error);
    EXPECT_THROW(e.decode_step(DenseMatrix(2, 8)), Error);
  }
}

TEST(Evaluate, BaselineAgainstItself) {
  const auto m = make_toy_model(testutil::small_config(), 1);
  const auto calib = testutil::calib_for(m.config, 3, 5, 1);
  const auto rep = evaluate(m, calib);
  EXPECT_EQ(rep.output_mse, 0.0);
  EXPECT_EQ(rep.r1, 1.0);
  EXPECT_EQ(rep.r2, 1.0);
  EXPECT_EQ(rep.variant, "dense");
  EXPECT_EQ(rep.scheme, "fp");
  EXPECT_NEAR(rep.loss, loss_only(m, calib), 1e-12);
}

TEST(Evaluate, ThreeEighthsRankGivesR2) {
  const auto m = make_toy_model(ModelConfig{}, 1);
  const auto calib = testutil::calib_for(m.config, 2, 16, 1);
  const auto rep = evaluate(uniform_rank(m, 12), m, calib);
  EXPECT_EQ(rep.r2, 0.1875);
  EXPECT_EQ(rep.r1, 0.5);
  EXPECT_EQ(rep.cache_elements, (std::vector<std::uint64_t>(4, 192)));
  EXPECT_EQ(rep.cache_bytes, (std::vector<std::uint64_t>(4, 192 * 2)));  // 16-bit cache
}

TEST(Evaluate, W8A4Bookkeeping) {
  const auto run = testutil::run_pipeline("w8a4", 0.1875, 0, testutil::small_config(2, 16, 2));
  EXPECT_EQ(run.report.weight_bits, 8);
  EXPECT_EQ(run.report.activation_bits, 4);
  EXPECT_EQ(run.report.scheme, "w8a4");
  EXPECT_GT(run.report.output_mse, 0.0);
  for (std::size_t l = 0; l < 2; ++l)
    EXPECT_EQ(run.report.cache_bytes[l], run.report.cache_elements[l] * 4 / 8);
}

TEST(Evaluate, ConfigMismatch) {
  const auto a = make_toy_model(testutil::small_config(2), 1);
  const auto b = make_toy_model(testutil::small_config(3), 1);
  const auto calib = testutil::calib_for(a.config, 1, 3, 1);
  try {
    evaluate(uniform_rank(b, 4), a, calib);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "config_mismatch");
  }
}

TEST(Evaluate, NonFiniteNamesLayer) {
  const auto m = make_toy_model(testutil::small_config(2), 1);
  auto c = uniform_rank(m, 8);
  c.w_o[1](0, 0) = NAN;
  const auto calib = testutil::calib_for(m.config, 1, 3, 1);
  try {
    evaluate(c, m, calib);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumerical);
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}
