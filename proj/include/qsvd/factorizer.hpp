#pragma once

#include <span>
#include <vector>

#include "qsvd/matrix.hpp"
#include "qsvd/transformer.hpp"

namespace qsvd {

inline constexpr double kDefaultBeta = 0.5;
inline constexpr double kWhiteningFloor = 1e-6;

// Diagonal input-side scaling S. The joint factorization is taken of
// S·[W_q W_k W_v] and S⁻¹ is folded back into the down-projection.
struct WhiteningTransform {
  enum class Kind { kNone, kActivation };

  Kind kind = Kind::kNone;
  std::vector<double> diag;
  // Channels whose statistic was zero and got floored.
  std::vector<std::size_t> floored_channels;

  std::size_t dim() const { return diag.size(); }
  DenseMatrix matrix() const { return DenseMatrix::diagonal(diag); }
  DenseMatrix inverse() const;
  // S·m and S⁻¹·m for m with dim() rows.
  DenseMatrix apply(const DenseMatrix& m) const { return scale_rows(m, diag); }
  DenseMatrix apply_inverse(const DenseMatrix& m) const;
};

const char* whitening_kind_name(WhiteningTransform::Kind kind);
WhiteningTransform::Kind parse_whitening_kind(const std::string& name);

WhiteningTransform no_whitening(std::size_t dim);

// S_jj = max over all calibration tokens of |X[:, j]|, floored at 1e-6.
WhiteningTransform compute_whitening(std::span<const DenseMatrix> layer_inputs);

struct QkvWeights {
  DenseMatrix w_q;
  DenseMatrix w_k;
  DenseMatrix w_v;

  DenseMatrix concatenated() const;
};

/// Jointly factorized Q/K/V projection of one attention layer.
///
/// Holds the orthonormal factors of SVD(S·[W_q W_k W_v]) restricted to the
/// retained components, and the deployable split
///   w_down = S⁻¹·U·Σ^β          (E x r)
///   w_up   = Σ^(1-β)·Vᵀ          (r x 3E, split into q/k/v blocks)
/// so that X·w_down·w_up reproduces the truncated projection on raw X.
class LayerFactors {
 public:
  LayerFactors(DenseMatrix basis_down, std::vector<double> sigma, DenseMatrix basis_up, double beta,
               WhiteningTransform whitening, std::vector<std::size_t> source_indices);

  // Rebuilds factors from a persisted deployable split.
  static LayerFactors from_split(const DenseMatrix& w_down, const DenseMatrix& w_up_concat,
                                 std::vector<double> sigma, double beta, WhiteningTransform whitening,
                                 std::vector<std::size_t> source_indices);

  std::size_t rank() const { return sigma_.size(); }
  std::size_t embed_dim() const { return basis_down_.rows(); }
  double beta() const { return beta_; }
  std::span<const double> sigma() const { return sigma_; }
  const WhiteningTransform& whitening() const { return whitening_; }
  // Positions of the retained components in the full-rank factorization.
  std::span<const std::size_t> source_indices() const { return source_indices_; }
  bool is_full_rank() const { return rank() == embed_dim(); }

  // Orthonormal factors in the whitened domain: U (E x r) and Vᵀ (r x 3E).
  const DenseMatrix& basis_down() const { return basis_down_; }
  const DenseMatrix& basis_up() const { return basis_up_; }

  const DenseMatrix& w_down() const { return w_down_; }
  const DenseMatrix& w_up() const { return w_up_; }
  DenseMatrix w_up_q() const { return w_up_.block(0, 0, rank(), embed_dim()); }
  DenseMatrix w_up_k() const { return w_up_.block(0, embed_dim(), rank(), embed_dim()); }
  DenseMatrix w_up_v() const { return w_up_.block(0, 2 * embed_dim(), rank(), embed_dim()); }

  // Same components, re-split with a different β.
  LayerFactors with_beta(double beta) const;
  // Keeps the listed components (positions into this object's ranking).
  LayerFactors select(std::span<const std::size_t> positions) const;

  // 4rE: one E x r down-projection plus three r x E up-projections.
  std::size_t parameter_count() const { return w_down_.size() + w_up_.size(); }

 private:
  DenseMatrix basis_down_;
  std::vector<double> sigma_;
  DenseMatrix basis_up_;
  double beta_;
  WhiteningTransform whitening_;
  std::vector<std::size_t> source_indices_;
  DenseMatrix w_down_;
  DenseMatrix w_up_;
};

// S·[W_q W_k W_v]
DenseMatrix whitened_concat(const AttentionLayerWeights& weights, const WhiteningTransform& whitening);

/// Full-rank joint factorization. Zero singular values are dropped, so the
/// rank is E for generic weights and lower for exactly rank-deficient ones.
LayerFactors factorize_layer(const AttentionLayerWeights& weights, const WhiteningTransform& whitening,
                             double beta = kDefaultBeta);

// Keeps the top-r components; 1 <= r <= rank.
LayerFactors truncate(const LayerFactors& factors, std::size_t r);

// w_down·w_up split into roles; already in the raw-input domain.
QkvWeights reconstruct_qkv(const LayerFactors& factors);

}  // namespace qsvd
