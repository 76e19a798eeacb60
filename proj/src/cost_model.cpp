#include "qsvd/cost_model.hpp"

#include <cmath>

#include "qsvd/error.hpp"

namespace qsvd {

const char* scheme_name(Scheme scheme) {
  switch (scheme) {
    case Scheme::kDense:
      return "dense";
    case Scheme::kPerMatrixSvd:
      return "per-matrix-svd";
    case Scheme::kJointSvd:
      return "joint-svd";
  }
  return "unknown";
}

LayerCost layer_cost(Scheme scheme, std::size_t embed_dim, std::size_t seq_len, std::size_t rank) {
  const std::uint64_t e = embed_dim;
  const std::uint64_t l = seq_len;
  const std::uint64_t r = rank;
  switch (scheme) {
    case Scheme::kDense:
      return {3 * e * e, 2 * l * e, 3 * l * e * e};
    case Scheme::kJointSvd:
      return {4 * r * e, r * l, 4 * l * r * e};
    case Scheme::kPerMatrixSvd:
      return {6 * r * e, 2 * r * l, 6 * l * r * e};
  }
  return {};
}

CostReport cost(Scheme scheme, std::size_t embed_dim, std::size_t seq_len, std::span<const std::size_t> ranks) {
  if (embed_dim == 0 || seq_len == 0) throw usage_error("invalid_dimension", "cost: E and L must be >= 1");
  if (ranks.empty()) throw usage_error("invalid_rank", "cost: at least one layer rank is required");
  CostReport report;
  report.scheme = scheme;
  report.embed_dim = embed_dim;
  report.seq_len = seq_len;
  report.ranks.assign(ranks.begin(), ranks.end());

  LayerCost dense_total;
  for (std::size_t r : ranks) {
    if (scheme != Scheme::kDense && (r == 0 || r > embed_dim)) {
      throw usage_error("invalid_rank", "cost: rank " + std::to_string(r) + " outside [1, " +
                                            std::to_string(embed_dim) + "]");
    }
    const LayerCost c = layer_cost(scheme, embed_dim, seq_len, r);
    const LayerCost d = layer_cost(Scheme::kDense, embed_dim, seq_len, r);
    report.per_layer.push_back(c);
    report.total.alpha += c.alpha;
    report.total.eta += c.eta;
    report.total.gamma += c.gamma;
    dense_total.alpha += d.alpha;
    dense_total.eta += d.eta;
    dense_total.gamma += d.gamma;
  }
  report.r1 = static_cast<double>(report.total.alpha) / static_cast<double>(dense_total.alpha);
  report.r1_from_gamma = static_cast<double>(report.total.gamma) / static_cast<double>(dense_total.gamma);
  report.r2 = static_cast<double>(report.total.eta) / static_cast<double>(dense_total.eta);
  return report;
}

std::size_t budget_for_ratio(double target_r2, std::size_t embed_dim, std::size_t num_layers) {
  if (!(target_r2 > 0.0 && target_r2 <= 1.0)) {
    throw usage_error("invalid_ratio", "budget ratio " + std::to_string(target_r2) + " outside (0, 1]");
  }
  const double k = std::round(target_r2 * 2.0 * static_cast<double>(embed_dim) * static_cast<double>(num_layers));
  if (k < static_cast<double>(num_layers)) {
    throw usage_error("infeasible_budget", "budget ratio " + std::to_string(target_r2) + " gives k=" +
                                               std::to_string(static_cast<long long>(k)) + " < " +
                                               std::to_string(num_layers) + " layers");
  }
  return static_cast<std::size_t>(k);
}

}  // namespace qsvd
