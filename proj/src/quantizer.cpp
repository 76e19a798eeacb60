#include "qsvd/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "qsvd/error.hpp"
#include "qsvd/linalg.hpp"

namespace qsvd {

namespace {

void check_bits(int bits) {
  if (bits != 4 && bits != 8 && bits != 16) {
    throw usage_error("invalid_bits", "bit-width " + std::to_string(bits) + " not in {4, 8, 16}");
  }
}

double qmax(int bits) { return static_cast<double>((1 << (bits - 1)) - 1); }
// f32 on-disk format bit-exactly.
double group_scale(double max_abs, int bits, double clip_ratio) {
  const double raw = clip_ratio * max_abs / qmax(bits);
  return raw < kMinScale ? kMinScale : raw;
}

double quantize_code(double x, double scale, int bits) {
  const double q = qmax(bits);
  return std::clamp(std::round(x / scale), -q, q);  // std::round is half-away-from-zero
}

std::size_t group_count(const DenseMatrix& x, Granularity g) {
  switch (g) {
    case Granularity::kPerTensor:
      return 1;
    case Granularity::kPerToken:
      return x.rows();
    case Granularity::kPerChannel:
      return x.cols();
  }
  return 1;
}

std::size_t group_of(std::size_t r, std::size_t c, Granularity g) {
  switch (g) {
    case Granularity::kPerTensor:
      return 0;
    case Granularity::kPerToken:
      return r;
    case Granularity::kPerChannel:
      return c;
  }
  return 0;
}

}  // namespace

void QuantSpec::validate() const {
  check_bits(weight_bits);
  check_bits(activation_bits);
  if (clip_ratio_weights && !(*clip_ratio_weights > 0.0 && *clip_ratio_weights <= 1.0)) {
    throw usage_error("invalid_clip", "weight clip ratio outside (0, 1]");
  }
  if (!(clip_ratio_activations > 0.0 && clip_ratio_activations <= 1.0)) {
    throw usage_error("invalid_clip", "activation clip ratio outside (0, 1]");
  }
}

QuantSpec quant_spec_for_scheme(const std::string& scheme) {
  QuantSpec spec;
  if (scheme == "fp") {
    spec.weight_bits = 16;
    spec.activation_bits = 16;
  } else if (scheme == "w8a8") {
    spec.weight_bits = 8;
    spec.activation_bits = 8;
  } else if (scheme == "w8a4") {
    spec.weight_bits = 8;
    spec.activation_bits = 4;
  } else if (scheme == "w4a4") {
    spec.weight_bits = 4;
    spec.activation_bits = 4;
  } else {
    throw usage_error("invalid_scheme", "unknown scheme '" + scheme + "' (expected fp|w8a8|w8a4|w4a4)");
  }
  return spec;
}

std::string scheme_for_spec(const QuantSpec& spec) {
  if (spec.is_full_precision()) return "fp";
  return "w" + std::to_string(spec.weight_bits) + "a" + std::to_string(spec.activation_bits);
}

QuantizedTensor quantize_tensor(const DenseMatrix& x, int bits, Granularity granularity,
                                std::span<const double> clip_ratios) {
  check_bits(bits);
  if (!x.all_finite()) throw numerical_error("non_finite", "quantize_tensor: non-finite input " + x.shape_string());
  QuantizedTensor out;
  if (bits == 16) {
    out.dequantized = x;
    return out;
  }
  const std::size_t groups = group_count(x, granularity);
  if (clip_ratios.size() != 1 && clip_ratios.size() != groups) {
    throw usage_error("invalid_clip", "quantize_tensor: " + std::to_string(clip_ratios.size()) +
                                          " clip ratios for " + std::to_string(groups) + " groups");
  }
  std::vector<double> max_abs(groups, 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double& m = max_abs[group_of(r, c, granularity)];
      m = std::max(m, std::abs(x(r, c)));
    }
  out.scales.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const double clip = clip_ratios.size() == 1 ? clip_ratios[0] : clip_ratios[g];
    if (!(clip > 0.0 && clip <= 1.0)) throw usage_error("invalid_clip", "clip ratio outside (0, 1]");
    out.scales[g] = group_scale(max_abs[g], bits, clip);
  }
  out.codes = DenseMatrix(x.rows(), x.cols());
  out.dequantized = DenseMatrix(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double scale = out.scales[group_of(r, c, granularity)];
      const double code = quantize_code(x(r, c), scale, bits);
      out.codes(r, c) = code;
      out.dequantized(r, c) = code * scale;
    }
  return out;
}

QuantizedTensor quantize_tensor(const DenseMatrix& x, int bits, Granularity granularity, double clip_ratio) {
  const double ratios[] = {clip_ratio};
  return quantize_tensor(x, bits, granularity, ratios);
}

std::vector<double> clip_grid() {
  std::vector<double> grid;
  for (int step = 0; step <= 6; ++step) grid.push_back(static_cast<double>(100 - 5 * step) / 100.0);
  return grid;
}

double group_quant_error(std::span<const double> group, int bits, double clip_ratio) {
  double max_abs = 0.0;
  for (double v : group) max_abs = std::max(max_abs, std::abs(v));
  const double scale = group_scale(max_abs, bits, clip_ratio);
  double err = 0.0;
  for (double v : group) {
    const double d = v - quantize_code(v, scale, bits) * scale;
    err += d * d;
  }
  return err;
}

double search_weight_clip(std::span<const double> group, int bits) {
  check_bits(bits);
  if (group.empty()) throw usage_error("empty_group", "search_weight_clip: empty group");
  if (bits == 16) return 1.0;
  double best_ratio = 1.0;
  double best_err = INFINITY;
  for (double ratio : clip_grid()) {
    const double err = group_quant_error(group, bits, ratio);
    if (err < best_err) {
      best_err = err;
      best_ratio = ratio;
    }
  }
  return best_ratio;
}

QuantizedTensor quantize_weight(const DenseMatrix& w, const QuantSpec& spec) {
  if (spec.weight_bits == 16) return quantize_tensor(w, 16, Granularity::kPerChannel, 1.0);
  if (spec.clip_ratio_weights) {
    return quantize_tensor(w, spec.weight_bits, Granularity::kPerChannel, *spec.clip_ratio_weights);
  }
  std::vector<double> ratios(w.cols());
  std::vector<double> column(w.rows());
  for (std::size_t c = 0; c < w.cols(); ++c) {
    for (std::size_t r = 0; r < w.rows(); ++r) column[r] = w(r, c);
    ratios[c] = search_weight_clip(column, spec.weight_bits);
  }
  return quantize_tensor(w, spec.weight_bits, Granularity::kPerChannel, ratios);
}

DenseMatrix quantize_activation(const DenseMatrix& x, const QuantSpec& spec) {
  if (spec.activation_bits == 16) return x;
  return quantize_tensor(x, spec.activation_bits, Granularity::kPerToken, spec.clip_ratio_activations).dequantized;
}

const char* rotation_kind_name(RotationKind kind) {
  switch (kind) {
    case RotationKind::kIdentity:
      return "identity";
    case RotationKind::kHadamard:
      return "hadamard";
    case RotationKind::kRandomOrthogonal:
      return "random_orthogonal";
  }
  return "unknown";
}

RotationKind parse_rotation_kind(const std::string& name) {
  if (name == "identity") return RotationKind::kIdentity;
  if (name == "hadamard") return RotationKind::kHadamard;
  if (name == "random_orthogonal") return RotationKind::kRandomOrthogonal;
  throw format_error("invalid_rotation_kind", "unknown rotation kind '" + name + "'");
}

const char* rotation_mode_name(RotationMode mode) {
  switch (mode) {
    case RotationMode::kNone:
      return "none";
    case RotationMode::kHadamard:
      return "hadamard";
    case RotationMode::kRandom:
      return "random";
  }
  return "unknown";
}

RotationMode parse_rotation_mode(const std::string& name) {
  if (name == "none") return RotationMode::kNone;
  if (name == "hadamard") return RotationMode::kHadamard;
  if (name == "random") return RotationMode::kRandom;
  throw usage_error("invalid_rotation", "unknown rotation '" + name + "' (expected hadamard|random|none)");
}

DenseMatrix RotationSpec::materialize() const {
  switch (kind) {
    case RotationKind::kIdentity:
      return DenseMatrix::identity(dim);
    case RotationKind::kHadamard:
      return hadamard(dim);
    case RotationKind::kRandomOrthogonal:
      return random_orthogonal(dim, seed);
  }
  return {};
}

RotationPair RotationPair::from_specs(RotationSpec h1, RotationSpec h2) {
  RotationPair pair;
  pair.h1 = h1.materialize();
  pair.h2 = h2.materialize();
  pair.h1_spec = h1;
  pair.h2_spec = h2;
  return pair;
}

RotationPair build_rotations(std::size_t embed_dim, std::size_t rank, std::uint64_t seed, RotationMode mode) {
  if (embed_dim == 0 || rank == 0) throw usage_error("invalid_dimension", "build_rotations: dimensions must be >= 1");
  auto pick = [&](std::size_t dim, std::uint64_t s) {
    RotationSpec spec{RotationKind::kIdentity, dim, s};
    if (mode == RotationMode::kHadamard) {
      spec.kind = is_power_of_two(dim) ? RotationKind::kHadamard : RotationKind::kRandomOrthogonal;
    } else if (mode == RotationMode::kRandom) {
      spec.kind = RotationKind::kRandomOrthogonal;
    }
    return spec;
  };
  return RotationPair::from_specs(pick(embed_dim, seed), pick(rank, seed + 1));
}

QuantizedLayer quantize_layer(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                              double beta) {
  spec.validate();
  const std::size_t e = factors.embed_dim();
  const std::size_t r = factors.rank();
  if (rotations.h1.rows() != e || rotations.h1.cols() != e || rotations.h2.rows() != r || rotations.h2.cols() != r) {
    throw usage_error("shape_mismatch", "quantize_layer: rotations " + rotations.h1.shape_string() + "/" +
                                            rotations.h2.shape_string() + " do not fit E=" + std::to_string(e) +
                                            ", r=" + std::to_string(r));
  }
  QuantizedLayer layer{factors.with_beta(beta), rotations, spec, beta, {}, {}, {}, {}};
  const LayerFactors& f = layer.factors;
  layer.down = quantize_weight(matmul_nt(matmul(rotations.h1, f.w_down()), rotations.h2), spec);
  layer.up_q = quantize_weight(matmul(rotations.h2, f.w_up_q()), spec);
  layer.up_k = quantize_weight(matmul(rotations.h2, f.w_up_k()), spec);
  layer.up_v = quantize_weight(matmul(rotations.h2, f.w_up_v()), spec);
  return layer;
}

DenseMatrix project_latent(const QuantizedLayer& layer, const DenseMatrix& x) {
  const DenseMatrix rotated = quantize_activation(matmul_nt(x, layer.rotations.h1), layer.spec);
  return quantize_activation(matmul(rotated, layer.down.dequantized), layer.spec);
}

DenseMatrix expand_latent(const QuantizedLayer& layer, const DenseMatrix& latent) {
  const DenseMatrix parts[] = {matmul(latent, layer.up_q.dequantized), matmul(latent, layer.up_k.dequantized),
                               matmul(latent, layer.up_v.dequantized)};
  return hconcat(parts);
}

double beta_objective(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                      std::span<const DenseMatrix> calibration_inputs, double beta) {
  if (calibration_inputs.empty()) throw usage_error("empty_calibration", "beta_objective: empty calibration slice");
  const QuantizedLayer layer = quantize_layer(factors, rotations, spec, beta);
  double total = 0.0;
  for (const DenseMatrix& x : calibration_inputs) {
    const DenseMatrix reference = matmul(matmul(x, layer.factors.w_down()), layer.factors.w_up());
    const DenseMatrix diff = reference - expand_latent(layer, project_latent(layer, x));
    for (double d : diff.values()) total += d * d;
  }
  return total;
}

std::vector<double> beta_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(static_cast<double>(i) / 10.0);
  return grid;
}

BetaSearchResult optimize_beta(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                               std::span<const DenseMatrix> calibration_inputs) {
  if (calibration_inputs.empty()) throw usage_error("empty_calibration", "optimize_beta: empty calibration slice");
  BetaSearchResult result;
  result.grid = beta_grid();
  double best = INFINITY;
  for (double beta : result.grid) {
    const double obj = beta_objective(factors, rotations, spec, calibration_inputs, beta);
    result.objectives.push_back(obj);
    if (obj < best) {
      best = obj;
      result.beta = beta;
    }
  }
  return result;
}

}  // namespace qsvd
