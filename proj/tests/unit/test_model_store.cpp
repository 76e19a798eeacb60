#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "property.hpp"
#include "qsvd/error.hpp"
#include "qsvd/model_store.hpp"
#include "qsvd/rng.hpp"
#include "test_util.hpp"

using namespace qsvd;
namespace fs = std::filesystem;

namespace {

std::string error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

void expect_same_bytes(const fs::path& a, const fs::path& b) {
  for (const char* f : {kManifestFile, kBlobFile, kMetaFile}) {
    if (!fs::exists(a / f) && !fs::exists(b / f)) continue;
    EXPECT_EQ(testutil::slurp(a / f), testutil::slurp(b / f)) << f;
  }
}

void edit_json(const fs::path& p, const std::function<void(ordered_json&)>& fn) {
  ordered_json j = read_json_file(p);
  fn(j);
  write_json_file(p, j);
}

// A small, valid manifest laid out back to back.
TensorManifest packed_manifest(Rng& rng, std::uint64_t* blob_bytes) {
  TensorManifest m;
  m.kind = "checkpoint";
  const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 5);
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    TensorEntry e;
    e.name = "t" + std::to_string(i);
    e.shape = {1 + static_cast<std::size_t>(rng.uniform() * 4), 1 + static_cast<std::size_t>(rng.uniform() * 4)};
    e.offset = offset;
    e.length = e.shape[0] * e.shape[1] * 4;
    offset += e.length;
    m.entries.push_back(e);
  }
  *blob_bytes = offset;
  return m;
}

struct Mutation {
  std::uint64_t seed = 0;
  int kind = 0;  // which field gets broken
};

const char* expected_code(int kind) {
  switch (kind) {
    case 0:
      return "shape_inconsistent";  // length off by 4
    case 1:
      return "out_of_bounds";  // offset pushed past the blob end
    case 2:
      return "overlap";  // entry starts inside its predecessor
    case 3:
      return "duplicate_name";
    case 4:
      return "unsupported_dtype";
    case 5:
      return "schema_version";
    default:
      return "shape_inconsistent";  // shape changed under a fixed length
  }
}

TensorManifest mutate(const Mutation& m, std::uint64_t* blob) {
  Rng rng(m.seed);
  TensorManifest man = packed_manifest(rng, blob);
  auto& last = man.entries.back();
  switch (m.kind) {
    case 0:
      last.length += 4;
      break;
    case 1:
      last.offset = *blob;
      break;
    case 2:
      if (man.entries.size() == 1) {
        TensorEntry copy = last;
        copy.name = "extra";
        man.entries.push_back(copy);
      } else {
        last.offset -= 4;
      }
      break;
    case 3: {
      TensorEntry copy = man.entries.front();
      copy.offset = *blob;
      *blob += copy.length;
      man.entries.push_back(copy);
      break;
    }
    case 4:
      last.dtype = "f16";
      break;
    case 5:
      man.format_version = 2;
      break;
    default:
      last.shape[0] += 1;
      break;
  }
  return man;
}

}  // namespace

TEST(Checkpoint, RoundTripBitEqualAndByteIdentical) {
  testutil::TempDir dir("ckpt");
  const auto m = make_toy_model(testutil::small_config(1, 8, 2, true), 3);
  save_checkpoint(dir / "a", m);
  const auto back = load_model(dir / "a");
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.embed, m.embed);
  EXPECT_EQ(back.head, m.head);
  EXPECT_EQ(back.layers[0].w_q, m.layers[0].w_q);
  EXPECT_EQ(back.layers[0].w_o, m.layers[0].w_o);
  save_checkpoint(dir / "b", back);
  expect_same_bytes(dir / "a", dir / "b");
  const auto ck = load_checkpoint(dir / "a");
  EXPECT_EQ(ck.tensors.size(), 6u);
  EXPECT_EQ(ck.tensors.at("layers.0.w_v").to_matrix(), m.layers[0].w_v);
}

TEST(Checkpoint, LengthDisagreesWithShape) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a", make_toy_model(testutil::small_config(1), 1));
  edit_json(dir / "a" / kManifestFile, [](ordered_json& j) { j["entries"][1]["length"] = 4; });
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "a"); }), "shape_inconsistent");
}

TEST(Checkpoint, TruncatedBlobNamesEntry) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a", make_toy_model(testutil::small_config(1), 1));
  const auto blob = dir / "a" / kBlobFile;
  fs::resize_file(blob, fs::file_size(blob) - 10);
  try {
    load_checkpoint(dir / "a");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    EXPECT_EQ(e.code(), "out_of_bounds");
    EXPECT_NE(std::string(e.what()).find("head"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ChecksumMismatch) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a", make_toy_model(testutil::small_config(1), 1));
  std::fstream f(dir / "a" / kBlobFile, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(17);
  f.put('\x5a');
  f.close();
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "a"); }), "checksum_mismatch");
}

TEST(Checkpoint, MissingFiles) {
  testutil::TempDir dir("ckpt");
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "nothing"); }), "missing_file");
  save_checkpoint(dir / "a", make_toy_model(testutil::small_config(1), 1));
  fs::remove(dir / "a" / kBlobFile);
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "a"); }), "missing_file");
}

TEST(Checkpoint, WrongKindAndBadConfig) {
  testutil::TempDir dir("ckpt");
  const auto cfg = testutil::small_config(1);
  save_calibration(dir / "c", testutil::calib_for(cfg, 1, 2, 1));
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "c"); }), "wrong_kind");
  save_checkpoint(dir / "a", make_toy_model(cfg, 1));
  edit_json(dir / "a" / kManifestFile, [](ordered_json& j) { j["config"]["head_dim"] = 3; });
  EXPECT_EQ(error_code([&] { load_checkpoint(dir / "a"); }), "invalid_config");
}

TEST(Manifest, HandMutations) {
  std::uint64_t blob = 0;
  Rng rng(1);
  auto m = packed_manifest(rng, &blob);
  EXPECT_NO_THROW(validate_manifest(m, blob));
  for (int kind = 0; kind <= 6; ++kind) {
    std::uint64_t b = 0;
    const auto bad = mutate({5, kind}, &b);
    EXPECT_EQ(error_code([&] { validate_manifest(bad, b); }), expected_code(kind)) << "kind " << kind;
  }
}

TEST(Manifest, MutatedManifestsAreRejected) {
  prop::Generator<Mutation> gen;
  gen.generate = [](Rng& rng) { return Mutation{rng.next_u64(), static_cast<int>(rng.uniform() * 7) % 7}; };
  const auto out = prop::check(
      gen,
      [](const Mutation& m) {
        std::uint64_t b = 0;
        const auto bad = mutate(m, &b);
        return error_code([&] { validate_manifest(bad, b); }) == expected_code(m.kind);
      },
      300, 11);
  EXPECT_TRUE(out.all_passed()) << "kind " << (out.counterexample ? out.counterexample->kind : -1);
  // valid manifests always pass
  const auto ok = prop::check(
      prop::Generator<Mutation>{[](Rng& rng) { return Mutation{rng.next_u64(), 0}; }},
      [](const Mutation& m) {
        Rng rng(m.seed);
        std::uint64_t b = 0;
        const auto man = packed_manifest(rng, &b);
        return error_code([&] { validate_manifest(man, b); }).empty();
      },
      100, 12);
  EXPECT_TRUE(ok.all_passed());
}

TEST(Manifest, JsonRoundTrip) {
  std::uint64_t blob = 0;
  Rng rng(3);
  const auto m = packed_manifest(rng, &blob);
  const auto j = manifest_to_json(m);
  EXPECT_EQ(manifest_to_json(manifest_from_json(j)).dump(), j.dump());
}

TEST(Calibration, DeterministicBytes) {
  testutil::TempDir dir("calib");
  const auto cfg = testutil::small_config(2, 8, 2);
  save_calibration(dir / "a", testutil::calib_for(cfg, 3, 5, 9, {3}));
  save_calibration(dir / "b", testutil::calib_for(cfg, 3, 5, 9, {3}));
  expect_same_bytes(dir / "a", dir / "b");
  const auto back = load_calibration(dir / "a");
  const auto again = testutil::calib_for(cfg, 3, 5, 9, {3});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.inputs[i], again.inputs[i]);
    EXPECT_EQ(back.targets[i], again.targets[i]);
  }
  save_calibration(dir / "c", back);
  expect_same_bytes(dir / "a", dir / "c");
}

TEST(Calibration, OutlierChannelStd) {
  const auto cfg = testutil::small_config(1, 8, 2);
  const auto calib = testutil::calib_for(cfg, 16, 16, 4, {3});
  std::vector<double> sum(8, 0), sq(8, 0);
  double n = 0;
  for (const auto& x : calib.inputs)
    for (std::size_t t = 0; t < x.rows(); ++t, ++n)
      for (std::size_t c = 0; c < 8; ++c) sum[c] += x(t, c), sq[c] += x(t, c) * x(t, c);
  std::vector<double> sd(8);
  for (std::size_t c = 0; c < 8; ++c) sd[c] = std::sqrt(sq[c] / n - std::pow(sum[c] / n, 2));
  double others = 0;
  for (std::size_t c = 0; c < 8; ++c)
    if (c != 3) others += sd[c] / 7;
  EXPECT_GE(sd[3] / others, 40.0);
  EXPECT_LE(sd[3] / others, 60.0);
}

TEST(Calibration, MinimalSetThroughPipeline) {
  testutil::TempDir dir("calib");
  const auto cfg = testutil::small_config(2, 8, 2);
  save_calibration(dir / "c", testutil::calib_for(cfg, 1, 1, 2));
  const auto calib = load_calibration(dir / "c");
  ASSERT_EQ(calib.size(), 1u);
  const auto m = make_toy_model(cfg, 2);
  auto factors = factorize_model(m, WhiteningTransform::Kind::kActivation, &calib);
  const auto table = score_identity_whitened(factors, calibration_gradients(m, calib));
  const auto alloc = allocate(table, 6);
  auto c = apply_allocation(full_rank_model(m, std::move(factors)), alloc);
  QuantizeOptions o;
  o.spec = quant_spec_for_scheme("w4a4");
  c = quantize_model(c, o, collect_layer_inputs(m, calib));
  const auto rep = evaluate(c, m, calib);
  EXPECT_TRUE(std::isfinite(rep.output_mse));
  EXPECT_EQ(rep.seq_len, 1u);
}

TEST(Calibration, Validation) {
  const auto cfg = testutil::small_config(1);
  SyntheticCalibrationOptions o;
  o.num_samples = 0;
  EXPECT_THROW(generate_synthetic_calibration(cfg, o), Error);
  o.num_samples = 1;
  o.outlier_channels = {8};
  EXPECT_THROW(generate_synthetic_calibration(cfg, o), Error);
}

TEST(Compressed, RoundTripTwoLayers) {
  testutil::TempDir dir("comp");
  const auto run = testutil::run_pipeline("fp", 0.25, 1, testutil::small_config(2, 8, 2));
  save_compressed(dir / "a", run.compressed);
  const auto back = load_compressed(dir / "a");
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_EQ(back.ranks(), run.compressed.ranks());
  EXPECT_EQ(back.allocation, run.compressed.allocation);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = back.layers[l];
    const auto& b = run.compressed.layers[l];
    EXPECT_EQ(a.beta(), b.beta());
    EXPECT_EQ(a.basis_down(), round_to_f32(b.basis_down()));
    EXPECT_EQ(a.basis_up(), round_to_f32(b.basis_up()));
    EXPECT_EQ(std::vector<std::size_t>(a.source_indices().begin(), a.source_indices().end()),
              std::vector<std::size_t>(b.source_indices().begin(), b.source_indices().end()));
  }
  save_compressed(dir / "b", back);
  expect_same_bytes(dir / "a", dir / "b");
  // and the reloaded copy equals the first load exactly
  const auto again = load_compressed(dir / "b");
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(again.layers[l].w_down(), back.layers[l].w_down());
    EXPECT_EQ(again.layers[l].w_up(), back.layers[l].w_up());
  }
}

TEST(Compressed, QuantizedRoundTripKeepsCodesScalesBeta) {
  testutil::TempDir dir("comp");
  const auto run = testutil::run_pipeline("w4a4", 0.25, 2, testutil::small_config(2, 8, 2));
  save_compressed(dir / "a", run.compressed);
  const auto back = load_compressed(dir / "a");
  ASSERT_TRUE(back.is_quantized());
  EXPECT_EQ(back.quant_spec, run.compressed.quant_spec);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = back.quantized[l];
    const auto& b = run.compressed.quantized[l];
    EXPECT_EQ(a.beta, b.beta);
    EXPECT_EQ(a.rotations.h1_spec, b.rotations.h1_spec);
    EXPECT_EQ(a.rotations.h2_spec, b.rotations.h2_spec);
    EXPECT_EQ(a.down, b.down);
    EXPECT_EQ(a.up_q, b.up_q);
    EXPECT_EQ(a.up_k, b.up_k);
    EXPECT_EQ(a.up_v, b.up_v);
  }
  save_compressed(dir / "b", back);
  expect_same_bytes(dir / "a", dir / "b");
}

TEST(Compressed, FullRankFlag) {
  testutil::TempDir dir("comp");
  const auto m = make_toy_model(testutil::small_config(2, 8, 2), 1);
  save_compressed(dir / "a", full_rank_model(m, factorize_model(m, WhiteningTransform::Kind::kNone, nullptr)));
  const auto meta = load_compressed_meta(dir / "a");
  EXPECT_TRUE(meta["layers"][0]["full_rank"].get<bool>());
  EXPECT_TRUE(load_compressed(dir / "a").layers[1].is_full_rank());
  edit_json(dir / "a" / kMetaFile, [](ordered_json& j) { j["layers"][1]["full_rank"] = false; });
  EXPECT_EQ(error_code([&] { load_compressed(dir / "a"); }), "shape_inconsistent");
}

TEST(Compressed, MissingBetaIsSchemaError) {
  testutil::TempDir dir("comp");
  const auto m = make_toy_model(testutil::small_config(2, 8, 2), 1);
  save_compressed(dir / "a", full_rank_model(m, factorize_model(m, WhiteningTransform::Kind::kNone, nullptr)));
  edit_json(dir / "a" / kMetaFile, [](ordered_json& j) { j["layers"][0].erase("beta"); });
  try {
    load_compressed(dir / "a");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    EXPECT_EQ(e.code(), "schema_version");
  }
}

TEST(Compressed, MissingScalesRejected) {
  testutil::TempDir dir("comp");
  const auto run = testutil::run_pipeline("w8a8", 0.25, 2, testutil::small_config(2, 8, 2));
  save_compressed(dir / "a", run.compressed);
  edit_json(dir / "a" / kMetaFile, [](ordered_json& j) { j["layers"][1]["scales"].erase("up_k"); });
  EXPECT_EQ(error_code([&] { load_compressed(dir / "a"); }), "schema_version");
}

TEST(Reports, JsonRoundTripsAreByteExact) {
  const auto run = testutil::run_pipeline("w8a4", 0.1875, 0, testutil::small_config(2, 8, 2));
  const auto m = run.model;
  const auto factors = factorize_model(m, WhiteningTransform::Kind::kNone, nullptr);
  const auto table = score_identity(factors, calibration_gradients(m, run.calib));
  const auto alloc = *run.compressed.allocation;
  const auto c = cost(Scheme::kPerMatrixSvd, 8, 16, alloc.per_layer_rank);
  const auto spec = *run.compressed.quant_spec;

  auto check = [](const ordered_json& j, auto parse) {
    const std::string text = j.dump(2);
    EXPECT_EQ(to_json(parse(ordered_json::parse(text))).dump(2), text);
  };
  check(to_json(table), importance_table_from_json);
  check(to_json(alloc), allocation_from_json);
  check(to_json(run.report), eval_report_from_json);
  check(to_json(c), cost_report_from_json);
  check(to_json(spec), quant_spec_from_json);
  EXPECT_EQ(importance_table_from_json(to_json(table)), table);
  EXPECT_EQ(allocation_from_json(to_json(alloc)), alloc);
}

TEST(Reports, AllocationValidation) {
  RankAllocation a;
  a.budget = 2;
  a.effective_budget = 2;
  a.per_layer_rank = {1, 1};
  a.retained = {{0, 0}, {1, 0}};
  auto j = to_json(a);
  j["per_layer_rank"] = {2, 1};
  EXPECT_THROW(allocation_from_json(j), Error);
}

TEST(Reports, ConfigHashIsStable) {
  ordered_json a = {{"seed", 1}, {"scheme", "w8a8"}};
  ordered_json b = {{"seed", 1}, {"scheme", "w8a8"}};
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b["seed"] = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
}
