#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qsvd/compressed_model.hpp"
#include "qsvd/transformer.hpp"

namespace qsvd {

// Per-layer K and V rows (post-RoPE keys), each L_seen x E.
struct DenseKvCache {
  std::vector<DenseMatrix> keys;
  std::vector<DenseMatrix> values;
};

// Per-layer latent rows C (L_seen x r); keys and values are rebuilt from
// these through the up-projections on every step.
struct LatentCache {
  std::vector<DenseMatrix> rows;
};

/// Single-sequence autoregressive engine over either the dense toy model or
/// a compressed one. The engine borrows the model; it must outlive the engine.
///
/// prefill() runs causal attention over a whole prompt and fills the cache;
/// decode_step() appends one token and attends with that token's query.
/// Softmax, normalization, W_o and the head always run in full precision.
class InferenceEngine {
 public:
  explicit InferenceEngine(const ToyModel& model, std::optional<std::size_t> max_length = std::nullopt);
  explicit InferenceEngine(const CompressedModel& model, std::optional<std::size_t> max_length = std::nullopt);

  // Returns the L x input_dim outputs for the prompt.
  DenseMatrix prefill(const DenseMatrix& inputs);
  // One 1 x input_dim token in, one 1 x input_dim output row out.
  DenseMatrix decode_step(const DenseMatrix& token);

  std::size_t tokens_seen() const { return seen_; }
  bool is_latent() const { return compressed_ != nullptr; }
  // Cached elements per layer: 2·E·L_seen (dense) or r·L_seen (latent).
  std::vector<std::uint64_t> cache_elements() const;

  const DenseKvCache& dense_cache() const { return dense_cache_; }
  const LatentCache& latent_cache() const { return latent_cache_; }

 private:
  DenseMatrix run(const DenseMatrix& inputs);

  const ToyModel* dense_ = nullptr;
  const CompressedModel* compressed_ = nullptr;
  ModelConfig config_;
  std::optional<std::size_t> max_length_;
  std::size_t seen_ = 0;
  DenseKvCache dense_cache_;
  LatentCache latent_cache_;
};

struct EvalReport {
  std::string variant;  // "dense" or "joint-svd"
  std::string scheme;   // fp | w8a8 | w8a4 | w4a4
  int weight_bits = 16;
  int activation_bits = 16;
  std::size_t num_samples = 0;
  std::size_t seq_len = 0;
  double loss = 0.0;
  double output_mse = 0.0;  // vs the dense full-precision baseline
  std::vector<std::size_t> ranks;
  std::vector<std::uint64_t> cache_elements;  // per layer, after one full sequence
  std::vector<std::uint64_t> cache_bytes;
  double r1 = 1.0;
  double r2 = 1.0;
};

// Whole-sequence prefill of every calibration sample through the dense model.
EvalReport evaluate(const ToyModel& baseline, const CalibrationSet& calib);
// Same through the compressed model; output_mse is measured against baseline.
EvalReport evaluate(const CompressedModel& variant, const ToyModel& baseline, const CalibrationSet& calib);

}  // namespace qsvd
