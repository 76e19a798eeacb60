#include "qsvd/rank_allocator.hpp"

#include <algorithm>
#include <cmath>

#include "qsvd/error.hpp"
#include "qsvd/parallel.hpp"

namespace qsvd {

namespace {

const GradientRecord& gradient_for(std::span<const SampleGradients> gradients, std::size_t sample,
                                   std::size_t layer) {
  const auto& layers = gradients[sample].layers;
  if (layer >= layers.size() || layers[layer].layer_index != layer || layers[layer].g_wq.empty()) {
    throw usage_error("missing_gradient", "missing gradient record for (layer " + std::to_string(layer) +
                                              ", sample " + std::to_string(sample) + ")");
  }
  return layers[layer];
}

void check_inputs(std::span<const LayerFactors> factors, std::span<const SampleGradients> gradients) {
  if (factors.empty()) throw usage_error("empty_model", "scoring: no layers");
  if (gradients.empty()) throw usage_error("missing_gradient", "scoring: no gradient samples");
  for (std::size_t n = 0; n < gradients.size(); ++n)
    for (std::size_t l = 0; l < factors.size(); ++l) {
      const GradientRecord& g = gradient_for(gradients, n, l);
      const std::size_t e = factors[l].embed_dim();
      if (g.g_wq.rows() != e || g.g_wq.cols() != e) {
        throw usage_error("shape_mismatch", "gradient for layer " + std::to_string(l) + " has shape " +
                                                g.g_wq.shape_string());
      }
    }
}

ImportanceTable empty_table(std::span<const LayerFactors> factors, std::size_t samples, ScoreMethod method) {
  ImportanceTable table;
  table.num_samples = samples;
  table.method = method;
  table.embed_dim = factors.front().embed_dim();
  for (const auto& f : factors) table.layer_ranks.push_back(f.rank());
  return table;
}

// Per-sample, per-component first-order loss change ⟨ΔW_σi, G⟩ for one
// layer, computed as σ_i·(u_iᵀ G' v_i) where G' is the gradient mapped
// into the whitened coordinates.
std::vector<double> diagonal_terms(const LayerFactors& f, const DenseMatrix& g_whitened) {
  const DenseMatrix t = matmul_tn(f.basis_down(), g_whitened);  // r x 3E
  std::vector<double> out(f.rank());
  for (std::size_t i = 0; i < f.rank(); ++i) {
    double acc = 0.0;
    auto ti = t.row(i);
    auto vi = f.basis_up().row(i);
    for (std::size_t c = 0; c < ti.size(); ++c) acc += ti[c] * vi[c];
    out[i] = f.sigma()[i] * acc;
  }
  return out;
}

ImportanceTable score_via_diagonal(std::span<const LayerFactors> factors,
                                   std::span<const SampleGradients> gradients, ScoreMethod method,
                                   bool whitened) {
  check_inputs(factors, gradients);
  ImportanceTable table = empty_table(factors, gradients.size(), method);
  std::vector<std::vector<double>> per_layer(factors.size());
  parallel_for(factors.size(), [&](std::size_t l) {
    const LayerFactors& f = factors[l];
    std::vector<double> acc(f.rank(), 0.0);
    for (std::size_t n = 0; n < gradients.size(); ++n) {
      DenseMatrix g = gradient_for(gradients, n, l).concatenated();
      // Diagonal S, so S⁻ᵀ = S⁻¹.
      if (whitened) g = f.whitening().apply_inverse(g);
      const auto d = diagonal_terms(f, g);
      for (std::size_t i = 0; i < d.size(); ++i) acc[i] += d[i] * d[i];
    }
    for (double& v : acc) v /= static_cast<double>(gradients.size());
    per_layer[l] = std::move(acc);
  });
  for (std::size_t l = 0; l < factors.size(); ++l)
    for (std::size_t i = 0; i < per_layer[l].size(); ++i)
      table.entries.push_back({l, i, factors[l].sigma()[i], per_layer[l][i]});
  return table;
}

// Raw-domain rank-one component σ_i·S⁻¹u_i·v_iᵀ.
DenseMatrix component(const LayerFactors& f, std::size_t i) {
  const std::size_t e = f.embed_dim();
  DenseMatrix u = f.whitening().apply_inverse(f.basis_down().column(i));
  DenseMatrix out(e, 3 * e);
  auto vi = f.basis_up().row(i);
  for (std::size_t r = 0; r < e; ++r) {
    const double ur = f.sigma()[i] * u(r, 0);
    auto row = out.row(r);
    for (std::size_t c = 0; c < 3 * e; ++c) row[c] = ur * vi[c];
  }
  return out;
}

}  // namespace

const char* score_method_name(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::kDirect:
      return "direct";
    case ScoreMethod::kIdentity:
      return "identity";
    case ScoreMethod::kIdentityWhitened:
      return "identity_whitened";
  }
  return "unknown";
}

ScoreMethod parse_score_method(const std::string& name) {
  if (name == "direct") return ScoreMethod::kDirect;
  if (name == "identity") return ScoreMethod::kIdentity;
  if (name == "identity_whitened") return ScoreMethod::kIdentityWhitened;
  throw format_error("invalid_score_method", "unknown score method '" + name + "'");
}

std::vector<double> ImportanceTable::layer_scores(std::size_t layer) const {
  std::vector<double> out;
  for (const auto& e : entries)
    if (e.layer == layer) out.push_back(e.score);
  return out;
}

ImportanceTable score_direct(std::span<const LayerFactors> factors, std::span<const SampleGradients> gradients) {
  check_inputs(factors, gradients);
  ImportanceTable table = empty_table(factors, gradients.size(), ScoreMethod::kDirect);
  std::vector<std::vector<double>> per_layer(factors.size());
  parallel_for(factors.size(), [&](std::size_t l) {
    const LayerFactors& f = factors[l];
    std::vector<DenseMatrix> g(gradients.size());
    for (std::size_t n = 0; n < gradients.size(); ++n) g[n] = gradient_for(gradients, n, l).concatenated();
    std::vector<double> scores(f.rank(), 0.0);
    for (std::size_t i = 0; i < f.rank(); ++i) {
      const DenseMatrix delta = component(f, i);
      for (const DenseMatrix& gn : g) {
        const double d = frobenius_inner(delta, gn);
        scores[i] += d * d;
      }
      scores[i] /= static_cast<double>(gradients.size());
    }
    per_layer[l] = std::move(scores);
  });
  for (std::size_t l = 0; l < factors.size(); ++l)
    for (std::size_t i = 0; i < per_layer[l].size(); ++i)
      table.entries.push_back({l, i, factors[l].sigma()[i], per_layer[l][i]});
  return table;
}

ImportanceTable score_identity(std::span<const LayerFactors> factors, std::span<const SampleGradients> gradients) {
  for (const auto& f : factors) {
    if (f.whitening().kind != WhiteningTransform::Kind::kNone) {
      throw usage_error("whitened_factors", "score_identity: factors are whitened; use identity_whitened");
    }
  }
  return score_via_diagonal(factors, gradients, ScoreMethod::kIdentity, /*whitened=*/false);
}

ImportanceTable score_identity_whitened(std::span<const LayerFactors> factors,
                                        std::span<const SampleGradients> gradients) {
  for (const auto& f : factors) {
    for (double s : f.whitening().diag) {
      if (!(s != 0.0 && std::isfinite(s))) {
        throw numerical_error("singular_whitening", "score_identity_whitened: singular whitening matrix");
      }
    }
  }
  return score_via_diagonal(factors, gradients, ScoreMethod::kIdentityWhitened, /*whitened=*/true);
}

double oracle_loss_delta(const ToyModel& model, std::size_t layer, const LayerFactors& factors,
                         std::size_t sv_index, const CalibrationSet& calib, double fraction) {
  if (layer >= model.layers.size()) throw usage_error("invalid_layer", "oracle_loss_delta: layer out of range");
  if (sv_index >= factors.rank()) throw usage_error("invalid_rank", "oracle_loss_delta: sv_index out of range");
  const std::size_t e = model.config.embed_dim;
  DenseMatrix delta = component(factors, sv_index);
  delta *= fraction;

  ToyModel perturbed = model;
  AttentionLayerWeights& w = perturbed.layers[layer];
  w.w_q -= delta.block(0, 0, e, e);
  w.w_k -= delta.block(0, e, e, e);
  w.w_v -= delta.block(0, 2 * e, e, e);
  return loss_only(model, calib) - loss_only(perturbed, calib);
}

std::vector<std::size_t> RankAllocation::layer_indices(std::size_t layer) const {
  std::vector<std::size_t> out;
  for (const auto& c : retained)
    if (c.layer == layer) out.push_back(c.sv_index);
  return out;
}

RankAllocation allocate(const ImportanceTable& table, std::size_t budget) {
  const std::size_t layers = table.num_layers();
  if (budget < layers) {
    throw usage_error("infeasible_budget", "rank budget " + std::to_string(budget) + " is below the number of layers " +
                                               std::to_string(layers) + " (every layer keeps rank >= 1)");
  }
  for (const auto& e : table.entries) {
    if (!(e.score >= 0.0) || !std::isfinite(e.score)) {
      throw numerical_error("invalid_score", "allocate: score for (layer " + std::to_string(e.layer) + ", sv " +
                                                 std::to_string(e.sv_index) + ") is negative or non-finite");
    }
  }

  std::vector<const ImportanceEntry*> order;
  for (const auto& e : table.entries) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const ImportanceEntry* a, const ImportanceEntry* b) {
    if (a->score != b->score) return a->score > b->score;
    if (a->sigma != b->sigma) return a->sigma > b->sigma;
    if (a->layer != b->layer) return a->layer < b->layer;
    return a->sv_index < b->sv_index;
  });

  RankAllocation alloc;
  alloc.budget = budget;
  alloc.effective_budget = std::min(budget, order.size());
  alloc.per_layer_rank.assign(layers, 0);

  std::vector<bool> taken(order.size(), false);
  std::vector<bool> has_floor(layers, false);
  std::vector<bool> in_plain_top_k(layers, false);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t l = order[pos]->layer;
    if (pos < alloc.effective_budget) in_plain_top_k[l] = true;
    if (!has_floor[l]) {
      has_floor[l] = true;
      taken[pos] = true;
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (!has_floor[l]) throw format_error("incomplete_table", "importance table has no entries for layer " + std::to_string(l));
    if (!in_plain_top_k[l]) alloc.floor_bound_layers.push_back(l);
  }

  std::size_t remaining = alloc.effective_budget - layers;
  for (std::size_t pos = 0; pos < order.size() && remaining > 0; ++pos) {
    if (taken[pos]) continue;
    taken[pos] = true;
    --remaining;
  }
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (!taken[pos]) continue;
    alloc.retained.push_back({order[pos]->layer, order[pos]->sv_index});
    ++alloc.per_layer_rank[order[pos]->layer];
  }
  std::sort(alloc.retained.begin(), alloc.retained.end());
  return alloc;
}

}  // namespace qsvd
