#pragma once

#include <optional>
#include <vector>

#include "qsvd/factorizer.hpp"
#include "qsvd/quantizer.hpp"
#include "qsvd/rank_allocator.hpp"
#include "qsvd/transformer.hpp"

namespace qsvd {

// A toy model whose Q/K/V projections are replaced by joint factors. The
// embedding, output projections and head are carried over unchanged.
struct CompressedModel {
  ModelConfig config;
  DenseMatrix embed;
  DenseMatrix head;
  std::vector<DenseMatrix> w_o;
  std::vector<LayerFactors> layers;
  // One entry per layer when the model has been through quantize_model.
  std::vector<QuantizedLayer> quantized;
  std::optional<QuantSpec> quant_spec;
  // Set once ranks come from an allocation rather than the full factorization.
  std::optional<RankAllocation> allocation;

  bool is_quantized() const { return !quantized.empty(); }
  std::vector<std::size_t> ranks() const;
};

// Normalized Q/K/V inputs of every layer for every calibration sample:
// result[layer][sample] is L x E.
std::vector<std::vector<DenseMatrix>> collect_layer_inputs(const ToyModel& model, const CalibrationSet& calib);

// Full-rank factors of every layer. Activation whitening needs calibration inputs.
std::vector<LayerFactors> factorize_model(const ToyModel& model, WhiteningTransform::Kind whitening,
                                          const CalibrationSet* calib, double beta = kDefaultBeta);

// Carries the non-QKV weights over and keeps only the full-rank factors.
CompressedModel full_rank_model(const ToyModel& model, std::vector<LayerFactors> factors);

// Keeps the allocated components of each layer.
CompressedModel apply_allocation(const CompressedModel& full, const RankAllocation& allocation);

struct QuantizeOptions {
  QuantSpec spec;
  RotationMode rotation = RotationMode::kHadamard;
  std::uint64_t seed = 0;
  // nullopt: per-layer grid search; otherwise the fixed β for every layer.
  std::optional<double> fixed_beta;
};

// Rotates, picks β per layer and fake-quantizes every layer. Layer l's
// rotations are seeded with seed + 2l (H1) and seed + 2l + 1 (H2).
CompressedModel quantize_model(const CompressedModel& model, const QuantizeOptions& options,
                               const std::vector<std::vector<DenseMatrix>>& layer_inputs);

}  // namespace qsvd
