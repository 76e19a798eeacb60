#include "qsvd/compressed_model.hpp"

#include <algorithm>

#include "qsvd/error.hpp"
#include "qsvd/parallel.hpp"

namespace qsvd {

std::vector<std::size_t> CompressedModel::ranks() const {
  std::vector<std::size_t> out;
  for (const auto& f : layers) out.push_back(f.rank());
  return out;
}

std::vector<std::vector<DenseMatrix>> collect_layer_inputs(const ToyModel& model, const CalibrationSet& calib) {
  calib.validate(model.config);
  std::vector<ForwardTrace> traces(calib.size());
  parallel_for(calib.size(), [&](std::size_t n) { traces[n] = forward(model, calib.inputs[n]); });
  std::vector<std::vector<DenseMatrix>> out(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    for (const auto& t : traces) out[l].push_back(t.layers[l].normed);
  return out;
}

std::vector<LayerFactors> factorize_model(const ToyModel& model, WhiteningTransform::Kind whitening,
                                          const CalibrationSet* calib, double beta) {
  const std::size_t e = model.config.embed_dim;
  std::vector<WhiteningTransform> transforms(model.layers.size(), no_whitening(e));
  if (whitening == WhiteningTransform::Kind::kActivation) {
    if (calib == nullptr) {
      throw usage_error("missing_calibration", "activation whitening requires a calibration set");
    }
    const auto inputs = collect_layer_inputs(model, *calib);
    for (std::size_t l = 0; l < inputs.size(); ++l) transforms[l] = compute_whitening(inputs[l]);
  }
  std::vector<std::optional<LayerFactors>> slots(model.layers.size());
  parallel_for(model.layers.size(),
               [&](std::size_t l) { slots[l] = factorize_layer(model.layers[l], transforms[l], beta); });
  std::vector<LayerFactors> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

CompressedModel full_rank_model(const ToyModel& model, std::vector<LayerFactors> factors) {
  if (factors.size() != model.layers.size()) {
    throw usage_error("shape_mismatch", "full_rank_model: " + std::to_string(factors.size()) + " factor sets for " +
                                            std::to_string(model.layers.size()) + " layers");
  }
  CompressedModel out;
  out.config = model.config;
  out.embed = model.embed;
  out.head = model.head;
  for (const auto& layer : model.layers) out.w_o.push_back(layer.w_o);
  out.layers = std::move(factors);
  return out;
}

CompressedModel apply_allocation(const CompressedModel& full, const RankAllocation& allocation) {
  if (full.allocation || full.is_quantized()) {
    throw usage_error("stage_mismatch", "apply_allocation: model is already compressed; start from full-rank factors");
  }
  if (allocation.per_layer_rank.size() != full.layers.size()) {
    throw usage_error("shape_mismatch", "allocation covers " + std::to_string(allocation.per_layer_rank.size()) +
                                            " layers, model has " + std::to_string(full.layers.size()));
  }
  CompressedModel out = full;
  for (std::size_t l = 0; l < full.layers.size(); ++l) {
    const LayerFactors& f = full.layers[l];
    std::vector<std::size_t> positions;
    for (std::size_t sv : allocation.layer_indices(l)) {
      auto src = f.source_indices();
      auto it = std::find(src.begin(), src.end(), sv);
      if (it == src.end()) {
        throw usage_error("stage_mismatch", "allocation keeps component " + std::to_string(sv) + " of layer " +
                                                std::to_string(l) + ", which the factors do not contain");
      }
      positions.push_back(static_cast<std::size_t>(it - src.begin()));
    }
    out.layers[l] = f.select(positions);
  }
  out.allocation = allocation;
  return out;
}

CompressedModel quantize_model(const CompressedModel& model, const QuantizeOptions& options,
                               const std::vector<std::vector<DenseMatrix>>& layer_inputs) {
  options.spec.validate();
  if (model.is_quantized()) throw usage_error("stage_mismatch", "quantize_model: model is already quantized");
  if (!options.fixed_beta && layer_inputs.size() != model.layers.size()) {
    throw usage_error("missing_calibration", "β search needs calibration inputs for every layer");
  }
  std::vector<std::optional<QuantizedLayer>> slots(model.layers.size());
  parallel_for(model.layers.size(), [&](std::size_t l) {
    const LayerFactors& f = model.layers[l];
    const RotationPair rot =
        build_rotations(f.embed_dim(), f.rank(), options.seed + 2 * static_cast<std::uint64_t>(l), options.rotation);
    const double beta =
        options.fixed_beta ? *options.fixed_beta : optimize_beta(f, rot, options.spec, layer_inputs[l]).beta;
    slots[l] = quantize_layer(f, rot, options.spec, beta);
  });
  CompressedModel out = model;
  out.quant_spec = options.spec;
  for (std::size_t l = 0; l < slots.size(); ++l) {
    out.layers[l] = slots[l]->factors;
    out.quantized.push_back(std::move(*slots[l]));
  }
  return out;
}

}  // namespace qsvd
