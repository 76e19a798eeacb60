#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qsvd/factorizer.hpp"
#include "qsvd/matrix.hpp"

namespace qsvd {

inline constexpr double kActivationClipRatio = 0.9;
inline constexpr double kMinScale = 1e-12;

struct QuantSpec {
  int weight_bits = 16;
  int activation_bits = 16;
  // nullopt: per-channel linear search over the clip grid.
  std::optional<double> clip_ratio_weights;
  double clip_ratio_activations = kActivationClipRatio;

  bool is_full_precision() const { return weight_bits == 16 && activation_bits == 16; }
  void validate() const;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

// "fp", "w8a8", "w8a4", "w4a4"
QuantSpec quant_spec_for_scheme(const std::string& scheme);
std::string scheme_for_spec(const QuantSpec& spec);

enum class Granularity {
  kPerTensor,
  kPerToken,    // one scale per row
  kPerChannel,  // one scale per column (output channel under X·W)
};

struct QuantizedTensor {
  DenseMatrix dequantized;
  DenseMatrix codes;  // integers stored as doubles
  std::vector<double> scales;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Symmetric round-to-nearest fake quantization.
///   scale = clip·max|group| / (2^(bits-1) − 1)
///   code  = clamp(round_half_away(x / scale), ±(2^(bits-1) − 1))
/// bits = 16 passes x through unchanged (codes empty, scales empty).
/// clip_ratios holds one ratio per group, or a single ratio for all groups.
QuantizedTensor quantize_tensor(const DenseMatrix& x, int bits, Granularity granularity,
                                std::span<const double> clip_ratios);
QuantizedTensor quantize_tensor(const DenseMatrix& x, int bits, Granularity granularity, double clip_ratio);

// Squared-error minimizer over {1.00, 0.95, ..., 0.70}; ties keep the larger ratio.
double search_weight_clip(std::span<const double> group, int bits);
std::vector<double> clip_grid();
// Squared error of quantizing one group at a given clip ratio.
double group_quant_error(std::span<const double> group, int bits, double clip_ratio);

// Per-output-channel weight quantization, clip searched per channel unless
// spec.clip_ratio_weights fixes it.
QuantizedTensor quantize_weight(const DenseMatrix& w, const QuantSpec& spec);
// Per-token activation quantization at spec.clip_ratio_activations.
DenseMatrix quantize_activation(const DenseMatrix& x, const QuantSpec& spec);

enum class RotationKind { kIdentity, kHadamard, kRandomOrthogonal };
enum class RotationMode { kNone, kHadamard, kRandom };

const char* rotation_kind_name(RotationKind kind);
RotationKind parse_rotation_kind(const std::string& name);
const char* rotation_mode_name(RotationMode mode);
RotationMode parse_rotation_mode(const std::string& name);

// Seed-reproducible orthogonal matrix description.
struct RotationSpec {
  RotationKind kind = RotationKind::kIdentity;
  std::size_t dim = 0;
  std::uint64_t seed = 0;

  DenseMatrix materialize() const;
  friend bool operator==(const RotationSpec&, const RotationSpec&) = default;
};

struct RotationPair {
  RotationSpec h1_spec;
  RotationSpec h2_spec;
  DenseMatrix h1;  // E x E
  DenseMatrix h2;  // r x r

  static RotationPair from_specs(RotationSpec h1, RotationSpec h2);
};

// kHadamard uses Hadamard where the dimension is a power of two and a seeded
// random orthogonal matrix otherwise. H2 draws from seed + 1.
RotationPair build_rotations(std::size_t embed_dim, std::size_t rank, std::uint64_t seed, RotationMode mode);

/// One QKV projection in its deployable quantized form:
///   C  = Q_a( Q_a(X·H1ᵀ) · Q_w(H1·W_down·H2ᵀ) )      (cached, L x r)
///   Y' = C · Q_w(H2·W_up)                             (q | k | v)
struct QuantizedLayer {
  LayerFactors factors;  // split at beta
  RotationPair rotations;
  QuantSpec spec;
  double beta = kDefaultBeta;
  QuantizedTensor down;  // E x r
  QuantizedTensor up_q;  // r x E
  QuantizedTensor up_k;
  QuantizedTensor up_v;

  std::size_t rank() const { return factors.rank(); }
};

QuantizedLayer quantize_layer(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                              double beta);

// Latent rows for normalized layer inputs x (tokens x E).
DenseMatrix project_latent(const QuantizedLayer& layer, const DenseMatrix& x);
// [q | k | v] reconstructed from latent rows (tokens x 3E).
DenseMatrix expand_latent(const QuantizedLayer& layer, const DenseMatrix& latent);

// Σ_d ‖X_d·W_down·W_up − Y'_d‖² over calibration inputs at one β.
double beta_objective(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                      std::span<const DenseMatrix> calibration_inputs, double beta);

struct BetaSearchResult {
  double beta = 0.0;
  std::vector<double> grid;
  std::vector<double> objectives;
};

std::vector<double> beta_grid();

// Grid search over {0.0, 0.1, ..., 1.0}; ties keep the smaller β.
BetaSearchResult optimize_beta(const LayerFactors& factors, const RotationPair& rotations, const QuantSpec& spec,
                               std::span<const DenseMatrix> calibration_inputs);

}  // namespace qsvd
