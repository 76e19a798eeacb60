#pragma once

#include <span>
#include <string>
#include <vector>

#include "qsvd/factorizer.hpp"
#include "qsvd/transformer.hpp"

namespace qsvd {

enum class ScoreMethod { kDirect, kIdentity, kIdentityWhitened };

const char* score_method_name(ScoreMethod method);
ScoreMethod parse_score_method(const std::string& name);

struct ImportanceEntry {
  std::size_t layer = 0;
  std::size_t sv_index = 0;
  double sigma = 0.0;
  double score = 0.0;

  friend bool operator==(const ImportanceEntry&, const ImportanceEntry&) = default;
};

struct ImportanceTable {
  std::vector<ImportanceEntry> entries;  // layer-major, sv_index ascending
  std::size_t num_samples = 0;
  ScoreMethod method = ScoreMethod::kIdentity;
  std::size_t embed_dim = 0;
  std::vector<std::size_t> layer_ranks;  // full rank of each layer

  std::size_t num_layers() const { return layer_ranks.size(); }
  std::vector<double> layer_scores(std::size_t layer) const;

  friend bool operator==(const ImportanceTable&, const ImportanceTable&) = default;
};

// Î_σi = (1/N) Σ_n ⟨ΔW_σi, G⁽ⁿ⁾⟩_F² with ΔW_σi materialized as a full
// E x 3E matrix in the raw-weight domain (σ_i·S⁻¹u_i·v_iᵀ).
ImportanceTable score_direct(std::span<const LayerFactors> factors, std::span<const SampleGradients> gradients);

// Î_σi = (1/N) Σ_n σ_i²·(u_iᵀ G⁽ⁿ⁾ v_i)²; only the diagonal of UᵀGV is formed.
// Requires unwhitened factors.
ImportanceTable score_identity(std::span<const LayerFactors> factors, std::span<const SampleGradients> gradients);

// Whitened variant: Î_σi = (1/N) Σ_n σ_i²·(u_iᵀ S⁻ᵀ G⁽ⁿ⁾ v_i)², with U, Σ, V
// from SVD(S·W). S⁻ᵀ maps the raw-domain gradient into the whitened
// coordinates of the factorization (left side under the row-vector layout).
ImportanceTable score_identity_whitened(std::span<const LayerFactors> factors,
                                        std::span<const SampleGradients> gradients);

// Exact L(W) − L(W − fraction·ΔW_σi) for one component of one layer,
// by full re-evaluation of the calibration loss.
double oracle_loss_delta(const ToyModel& model, std::size_t layer, const LayerFactors& factors,
                         std::size_t sv_index, const CalibrationSet& calib, double fraction = 1.0);

struct RetainedComponent {
  std::size_t layer = 0;
  std::size_t sv_index = 0;

  friend auto operator<=>(const RetainedComponent&, const RetainedComponent&) = default;
};

struct RankAllocation {
  std::size_t budget = 0;            // requested k
  std::size_t effective_budget = 0;  // after capping at the table size
  std::vector<std::size_t> per_layer_rank;
  std::vector<RetainedComponent> retained;  // sorted by (layer, sv_index)
  // Layers that plain global top-k would have emptied; the rank-1 floor
  // kept their best component instead.
  std::vector<std::size_t> floor_bound_layers;

  std::vector<std::size_t> layer_indices(std::size_t layer) const;

  friend bool operator==(const RankAllocation&, const RankAllocation&) = default;
};

/// Global top-k selection. Order: score descending, then larger σ, lower
/// layer, lower sv_index. Each layer first keeps its best entry (the rank
/// floor, charged against k); remaining slots go to the global order.
/// Throws a usage error when k < num_layers.
RankAllocation allocate(const ImportanceTable& table, std::size_t budget);

}  // namespace qsvd
