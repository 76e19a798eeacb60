#pragma once

#include <cstdint>
#include <vector>

#include "qsvd/matrix.hpp"

namespace qsvd {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 4;
  std::size_t input_dim = 32;
  bool uses_rope = false;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Row-vector convention throughout: a layer computes X·W with W of shape
// (in x out), so the "input side" of a weight is its row index.
struct AttentionLayerWeights {
  DenseMatrix w_q;
  DenseMatrix w_k;
  DenseMatrix w_v;
  DenseMatrix w_o;
};

struct ToyModel {
  ModelConfig config;
  DenseMatrix embed;  // input_dim x E
  std::vector<AttentionLayerWeights> layers;
  DenseMatrix head;  // E x input_dim
};

// N sequences of L x input_dim inputs with matching L x input_dim targets.
struct CalibrationSet {
  std::vector<DenseMatrix> inputs;
  std::vector<DenseMatrix> targets;

  std::size_t size() const { return inputs.size(); }
  void validate(const ModelConfig& config) const;
};

struct GradientRecord {
  std::size_t layer_index = 0;
  std::size_t sample_index = 0;
  DenseMatrix g_wq;
  DenseMatrix g_wk;
  DenseMatrix g_wv;

  // [g_wq | g_wk | g_wv], the gradient of the concatenated E x 3E weight.
  DenseMatrix concatenated() const;
};

// Seeded toy model. Q/K/V weights share a decaying-spectrum column space so
// the joint factorization has a meaningful tail; every weight is rounded to
// binary32 so checkpoints round-trip exactly.
ToyModel make_toy_model(const ModelConfig& config, std::uint64_t seed);

// --- building blocks shared with the inference engine ---

inline constexpr double kRmsEpsilon = 1e-6;
inline constexpr double kRopeBase = 10000.0;

// Per-row RMS normalization without gain; inv_rms receives 1/rms per row.
DenseMatrix rms_norm(const DenseMatrix& x, std::vector<double>* inv_rms = nullptr);
DenseMatrix rms_norm_backward(const DenseMatrix& x, std::span<const double> inv_rms, const DenseMatrix& grad_out);

// Rotary embedding on each head's adjacent dimension pairs; row t sits at
// position first_position + t. inverse=true applies the transpose rotation.
void apply_rope(DenseMatrix& m, std::size_t head_dim, std::size_t first_position, bool inverse = false);

struct AttentionResult {
  DenseMatrix output;               // n x E
  std::vector<DenseMatrix> probs;   // per head, n x m
};

// Causal multi-head attention. Query row i sits at position
// first_query_position + i and attends key rows 0..that position.
AttentionResult causal_attention(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v,
                                 std::size_t num_heads, std::size_t first_query_position);

// --- forward / backward ---

struct LayerActivations {
  DenseMatrix input;   // residual stream entering the layer
  DenseMatrix normed;  // rms_norm(input), the Q/K/V projection input
  std::vector<double> inv_rms;
  DenseMatrix q;  // post-RoPE when enabled
  DenseMatrix k;
  DenseMatrix v;
  AttentionResult attention;
};

struct ForwardTrace {
  std::vector<LayerActivations> layers;
  DenseMatrix final_input;
  DenseMatrix final_normed;
  std::vector<double> final_inv_rms;
  DenseMatrix output;  // L x input_dim
};

ForwardTrace forward(const ToyModel& model, const DenseMatrix& input);

// Mean squared error over all L x input_dim entries.
double mse_loss(const DenseMatrix& output, const DenseMatrix& target);

struct SampleGradients {
  double loss = 0.0;
  std::vector<GradientRecord> layers;
};

/// Exact reverse-mode gradients of one sample's loss w.r.t. every layer's
/// W_q, W_k, W_v. Throws a numerical error naming the first layer whose
/// activations become non-finite.
SampleGradients loss_and_gradients(const ToyModel& model, const DenseMatrix& input, const DenseMatrix& target,
                                   std::size_t sample_index = 0);

// Per-sample records for the whole set, computed in parallel.
std::vector<SampleGradients> calibration_gradients(const ToyModel& model, const CalibrationSet& calib);

// Mean loss over the set.
double loss_only(const ToyModel& model, const CalibrationSet& calib);

}  // namespace qsvd
