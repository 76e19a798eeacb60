#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qsvd {

enum class Scheme { kDense, kPerMatrixSvd, kJointSvd };

const char* scheme_name(Scheme scheme);

struct LayerCost {
  std::uint64_t alpha = 0;  // parameters
  std::uint64_t eta = 0;    // cached elements
  std::uint64_t gamma = 0;  // QKV-generation products at length L
};

/// Closed-form accounting for one attention stack, single-head convention
/// with E the full model width:
///   dense       α = 3E²    η = 2LE   γ = 3LE²
///   joint SVD   α = 4rE    η = rL    γ = 4LrE
///   per-matrix  α = 6rE    η = 2rL   γ = 6LrE
/// r1 = α/α_dense (= γ/γ_dense), r2 = η/η_dense.
struct CostReport {
  Scheme scheme = Scheme::kDense;
  std::size_t embed_dim = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ranks;
  std::vector<LayerCost> per_layer;
  LayerCost total;
  double r1 = 0.0;
  double r2 = 0.0;
  double r1_from_gamma = 0.0;
};

LayerCost layer_cost(Scheme scheme, std::size_t embed_dim, std::size_t seq_len, std::size_t rank);

// ranks has one entry per layer; ignored (but still length-checked) for dense.
CostReport cost(Scheme scheme, std::size_t embed_dim, std::size_t seq_len, std::span<const std::size_t> ranks);

// k = round(target · 2E · num_layers); throws when k < num_layers.
std::size_t budget_for_ratio(double target_r2, std::size_t embed_dim, std::size_t num_layers);

}  // namespace qsvd
