#include "qsvd/factorizer.hpp"

#include <algorithm>
#include <cmath>

#include "qsvd/error.hpp"
#include "qsvd/linalg.hpp"

namespace qsvd {

namespace {

void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw usage_error("beta_out_of_range", "beta " + std::to_string(beta) + " outside [0, 1]");
  }
}

std::vector<double> powers(std::span<const double> sigma, double exponent) {
  std::vector<double> out(sigma.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) out[i] = std::pow(sigma[i], exponent);
  return out;
}

}  // namespace

DenseMatrix WhiteningTransform::inverse() const {
  std::vector<double> inv(diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) inv[i] = 1.0 / diag[i];
  return DenseMatrix::diagonal(inv);
}

DenseMatrix WhiteningTransform::apply_inverse(const DenseMatrix& m) const {
  std::vector<double> inv(diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) inv[i] = 1.0 / diag[i];
  return scale_rows(m, inv);
}

const char* whitening_kind_name(WhiteningTransform::Kind kind) {
  return kind == WhiteningTransform::Kind::kActivation ? "activation" : "none";
}

WhiteningTransform::Kind parse_whitening_kind(const std::string& name) {
  if (name == "none") return WhiteningTransform::Kind::kNone;
  if (name == "activation") return WhiteningTransform::Kind::kActivation;
  throw usage_error("invalid_whitening", "unknown whitening kind '" + name + "' (expected none|activation)");
}

WhiteningTransform no_whitening(std::size_t dim) {
  WhiteningTransform w;
  w.kind = WhiteningTransform::Kind::kNone;
  w.diag.assign(dim, 1.0);
  return w;
}

WhiteningTransform compute_whitening(std::span<const DenseMatrix> layer_inputs) {
  if (layer_inputs.empty()) throw usage_error("empty_calibration", "compute_whitening: no calibration samples");
  const std::size_t dim = layer_inputs.front().cols();
  WhiteningTransform w;
  w.kind = WhiteningTransform::Kind::kActivation;
  w.diag.assign(dim, 0.0);
  for (const DenseMatrix& x : layer_inputs) {
    if (x.cols() != dim) throw usage_error("shape_mismatch", "compute_whitening: inconsistent widths");
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t j = 0; j < dim; ++j) w.diag[j] = std::max(w.diag[j], std::abs(x(t, j)));
  }
  for (std::size_t j = 0; j < dim; ++j) {
    if (w.diag[j] < kWhiteningFloor) {
      if (w.diag[j] == 0.0) w.floored_channels.push_back(j);
      w.diag[j] = kWhiteningFloor;
    }
  }
  return w;
}

DenseMatrix QkvWeights::concatenated() const {
  const DenseMatrix parts[] = {w_q, w_k, w_v};
  return hconcat(parts);
}

LayerFactors::LayerFactors(DenseMatrix basis_down, std::vector<double> sigma, DenseMatrix basis_up, double beta,
                           WhiteningTransform whitening, std::vector<std::size_t> source_indices)
    : basis_down_(std::move(basis_down)),
      sigma_(std::move(sigma)),
      basis_up_(std::move(basis_up)),
      beta_(beta),
      whitening_(std::move(whitening)),
      source_indices_(std::move(source_indices)) {
  check_beta(beta_);
  const std::size_t r = sigma_.size();
  const std::size_t e = basis_down_.rows();
  if (r == 0) throw usage_error("invalid_rank", "LayerFactors: rank 0 is not a valid factorization");
  if (basis_down_.cols() != r || basis_up_.rows() != r || basis_up_.cols() != 3 * e ||
      whitening_.dim() != e || source_indices_.size() != r) {
    throw usage_error("shape_mismatch", "LayerFactors: inconsistent shapes U " + basis_down_.shape_string() +
                                            " Vt " + basis_up_.shape_string() + " rank " + std::to_string(r));
  }
  for (std::size_t i = 0; i < r; ++i) {
    if (!(sigma_[i] > 0.0) || (i > 0 && sigma_[i] > sigma_[i - 1])) {
      throw usage_error("invalid_sigma", "LayerFactors: singular values must be positive and descending");
    }
  }
  w_down_ = whitening_.apply_inverse(scale_columns(basis_down_, powers(sigma_, beta_)));
  w_up_ = scale_rows(basis_up_, powers(sigma_, 1.0 - beta_));
}

LayerFactors LayerFactors::from_split(const DenseMatrix& w_down, const DenseMatrix& w_up_concat,
                                      std::vector<double> sigma, double beta, WhiteningTransform whitening,
                                      std::vector<std::size_t> source_indices) {
  check_beta(beta);
  if (w_down.cols() != sigma.size() || w_up_concat.rows() != sigma.size() || whitening.dim() != w_down.rows()) {
    throw format_error("shape_inconsistent", "factors: w_down " + w_down.shape_string() + ", w_up " +
                                                 w_up_concat.shape_string() + ", rank " +
                                                 std::to_string(sigma.size()));
  }
  DenseMatrix basis_down = scale_columns(whitening.apply(w_down), powers(sigma, -beta));
  DenseMatrix basis_up = scale_rows(w_up_concat, powers(sigma, beta - 1.0));
  return LayerFactors(std::move(basis_down), std::move(sigma), std::move(basis_up), beta, std::move(whitening),
                      std::move(source_indices));
}

LayerFactors LayerFactors::with_beta(double beta) const {
  return LayerFactors(basis_down_, sigma_, basis_up_, beta, whitening_, source_indices_);
}

LayerFactors LayerFactors::select(std::span<const std::size_t> positions) const {
  if (positions.empty()) throw usage_error("invalid_rank", "select: rank 0 is not allowed");
  std::vector<std::size_t> sorted(positions.begin(), positions.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() || sorted.back() >= rank()) {
    throw usage_error("invalid_rank", "select: positions must be distinct and < rank " + std::to_string(rank()));
  }
  const std::size_t e = embed_dim();
  DenseMatrix u(e, sorted.size());
  DenseMatrix vt(sorted.size(), 3 * e);
  std::vector<double> sigma;
  std::vector<std::size_t> source;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const std::size_t p = sorted[k];
    u.set_block(0, k, basis_down_.column(p));
    vt.set_block(k, 0, basis_up_.block(p, 0, 1, 3 * e));
    sigma.push_back(sigma_[p]);
    source.push_back(source_indices_[p]);
  }
  return LayerFactors(std::move(u), std::move(sigma), std::move(vt), beta_, whitening_, std::move(source));
}

DenseMatrix whitened_concat(const AttentionLayerWeights& weights, const WhiteningTransform& whitening) {
  const DenseMatrix parts[] = {weights.w_q, weights.w_k, weights.w_v};
  return whitening.apply(hconcat(parts));
}

LayerFactors factorize_layer(const AttentionLayerWeights& weights, const WhiteningTransform& whitening,
                             double beta) {
  check_beta(beta);
  const std::size_t e = weights.w_q.rows();
  for (const DenseMatrix* w : {&weights.w_q, &weights.w_k, &weights.w_v}) {
    if (w->rows() != e || w->cols() != e) {
      throw usage_error("shape_mismatch", "factorize_layer: projection " + w->shape_string() +
                                              " is not " + std::to_string(e) + "x" + std::to_string(e));
    }
    if (!w->all_finite()) throw numerical_error("non_finite", "factorize_layer: non-finite weights");
  }
  if (whitening.dim() != e) throw usage_error("shape_mismatch", "factorize_layer: whitening dimension mismatch");

  SvdResult s = svd(whitened_concat(weights, whitening));
  std::size_t keep = 0;
  while (keep < s.sigma.size() && s.sigma[keep] > 0.0) ++keep;
  if (keep == 0) throw numerical_error("zero_weights", "factorize_layer: all singular values are zero");

  std::vector<std::size_t> source(keep);
  for (std::size_t i = 0; i < keep; ++i) source[i] = i;
  s.sigma.resize(keep);
  return LayerFactors(s.u.block(0, 0, e, keep), std::move(s.sigma), s.vt.block(0, 0, keep, 3 * e), beta,
                      whitening, std::move(source));
}

LayerFactors truncate(const LayerFactors& factors, std::size_t r) {
  if (r == 0 || r > factors.rank()) {
    throw usage_error("invalid_rank", "truncate: rank " + std::to_string(r) + " outside [1, " +
                                          std::to_string(factors.rank()) + "]");
  }
  std::vector<std::size_t> positions(r);
  for (std::size_t i = 0; i < r; ++i) positions[i] = i;
  return factors.select(positions);
}

QkvWeights reconstruct_qkv(const LayerFactors& factors) {
  return {matmul(factors.w_down(), factors.w_up_q()), matmul(factors.w_down(), factors.w_up_k()),
          matmul(factors.w_down(), factors.w_up_v())};
}

}  // namespace qsvd
