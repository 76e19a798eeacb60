#include "qsvd/latent_engine.hpp"

#include "qsvd/cost_model.hpp"
#include "qsvd/error.hpp"
#include "qsvd/parallel.hpp"

namespace qsvd {

namespace {

DenseMatrix append_rows(const DenseMatrix& cache, const DenseMatrix& rows) {
  if (cache.empty()) return rows;
  const DenseMatrix parts[] = {cache, rows};
  return vconcat(parts);
}

}  // namespace

InferenceEngine::InferenceEngine(const ToyModel& model, std::optional<std::size_t> max_length)
    : dense_(&model), config_(model.config), max_length_(max_length) {
  dense_cache_.keys.resize(model.layers.size());
  dense_cache_.values.resize(model.layers.size());
}

InferenceEngine::InferenceEngine(const CompressedModel& model, std::optional<std::size_t> max_length)
    : compressed_(&model), config_(model.config), max_length_(max_length) {
  if (model.is_quantized() && model.quantized.size() != model.layers.size()) {
    throw usage_error("shape_mismatch", "engine: quantized layer count does not match the model");
  }
  latent_cache_.rows.resize(model.layers.size());
}

DenseMatrix InferenceEngine::prefill(const DenseMatrix& inputs) {
  if (seen_ != 0) throw usage_error("already_prefilled", "prefill: engine already holds a sequence");
  if (inputs.rows() == 0) throw usage_error("empty_sequence", "prefill: sequence length must be >= 1");
  return run(inputs);
}

DenseMatrix InferenceEngine::decode_step(const DenseMatrix& token) {
  if (seen_ == 0) throw usage_error("decode_before_prefill", "decode_step: call prefill first");
  if (token.rows() != 1) throw usage_error("shape_mismatch", "decode_step: expected one token, got " + token.shape_string());
  return run(token);
}

DenseMatrix InferenceEngine::run(const DenseMatrix& inputs) {
  if (inputs.cols() != config_.input_dim) {
    throw usage_error("shape_mismatch", "engine: input " + inputs.shape_string() + " does not match input_dim " +
                                            std::to_string(config_.input_dim));
  }
  if (max_length_ && seen_ + inputs.rows() > *max_length_) {
    throw usage_error("cache_capacity", "engine: cache capacity " + std::to_string(*max_length_) + " exceeded");
  }
  const std::size_t first = seen_;
  const std::size_t hd = config_.head_dim();
  DenseMatrix h = matmul(inputs, dense_ ? dense_->embed : compressed_->embed);

  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const DenseMatrix normed = rms_norm(h);
    DenseMatrix q;
    DenseMatrix keys;
    DenseMatrix values;
    const DenseMatrix* w_o = nullptr;
    if (dense_) {
      const AttentionLayerWeights& w = dense_->layers[l];
      q = matmul(normed, w.w_q);
      DenseMatrix k = matmul(normed, w.w_k);
      if (config_.uses_rope) {
        apply_rope(q, hd, first);
        apply_rope(k, hd, first);
      }
      dense_cache_.keys[l] = append_rows(dense_cache_.keys[l], k);
      dense_cache_.values[l] = append_rows(dense_cache_.values[l], matmul(normed, w.w_v));
      keys = dense_cache_.keys[l];
      values = dense_cache_.values[l];
      w_o = &w.w_o;
    } else {
      DenseMatrix latent;
      if (compressed_->is_quantized()) {
        const QuantizedLayer& ql = compressed_->quantized[l];
        latent = project_latent(ql, normed);
        latent_cache_.rows[l] = append_rows(latent_cache_.rows[l], latent);
        q = matmul(latent, ql.up_q.dequantized);
        keys = matmul(latent_cache_.rows[l], ql.up_k.dequantized);
        values = matmul(latent_cache_.rows[l], ql.up_v.dequantized);
      } else {
        const LayerFactors& f = compressed_->layers[l];
        latent = matmul(normed, f.w_down());
        latent_cache_.rows[l] = append_rows(latent_cache_.rows[l], latent);
        q = matmul(latent, f.w_up_q());
        keys = matmul(latent_cache_.rows[l], f.w_up_k());
        values = matmul(latent_cache_.rows[l], f.w_up_v());
      }
      // Latents are stored pre-RoPE; keys are re-rotated on reconstruction.
      if (config_.uses_rope) {
        apply_rope(q, hd, first);
        apply_rope(keys, hd, 0);
      }
      w_o = &compressed_->w_o[l];
    }
    const AttentionResult attn = causal_attention(q, keys, values, config_.num_heads, first);
    h += matmul(attn.output, *w_o);
    if (!h.all_finite()) {
      throw numerical_error("non_finite", "engine: non-finite activations first appear at layer " + std::to_string(l));
    }
  }
  seen_ += inputs.rows();
  return matmul(rms_norm(h), dense_ ? dense_->head : compressed_->head);
}

std::vector<std::uint64_t> InferenceEngine::cache_elements() const {
  std::vector<std::uint64_t> out;
  if (dense_) {
    for (std::size_t l = 0; l < dense_cache_.keys.size(); ++l)
      out.push_back(dense_cache_.keys[l].size() + dense_cache_.values[l].size());
  } else {
    for (const auto& rows : latent_cache_.rows) out.push_back(rows.size());
  }
  return out;
}

namespace {

struct SampleRun {
  DenseMatrix output;
  std::vector<std::uint64_t> cache;
};

template <typename Model>
std::vector<SampleRun> run_all(const Model& model, const CalibrationSet& calib) {
  std::vector<SampleRun> runs(calib.size());
  parallel_for(calib.size(), [&](std::size_t n) {
    InferenceEngine engine(model);
    runs[n].output = engine.prefill(calib.inputs[n]);
    runs[n].cache = engine.cache_elements();
  });
  return runs;
}

EvalReport summarize(const std::vector<SampleRun>& runs, const std::vector<SampleRun>& baseline,
                     const CalibrationSet& calib, int bits_per_cached_element) {
  EvalReport report;
  report.num_samples = calib.size();
  report.seq_len = calib.inputs.front().rows();
  for (std::size_t n = 0; n < runs.size(); ++n) {
    report.loss += mse_loss(runs[n].output, calib.targets[n]);
    report.output_mse += mse_loss(runs[n].output, baseline[n].output);
  }
  report.loss /= static_cast<double>(runs.size());
  report.output_mse /= static_cast<double>(runs.size());
  report.cache_elements = runs.front().cache;
  for (std::uint64_t el : report.cache_elements) {
    report.cache_bytes.push_back(el * static_cast<std::uint64_t>(bits_per_cached_element) / 8);
  }
  return report;
}

}  // namespace

EvalReport evaluate(const ToyModel& baseline, const CalibrationSet& calib) {
  calib.validate(baseline.config);
  const auto runs = run_all(baseline, calib);
  EvalReport report = summarize(runs, runs, calib, 16);
  report.variant = "dense";
  report.scheme = "fp";
  report.ranks.assign(baseline.config.num_layers, baseline.config.embed_dim);
  report.r1 = 1.0;
  report.r2 = 1.0;
  return report;
}

EvalReport evaluate(const CompressedModel& variant, const ToyModel& baseline, const CalibrationSet& calib) {
  if (!(variant.config == baseline.config)) {
    throw usage_error("config_mismatch", "evaluate: variant and baseline model configs differ");
  }
  calib.validate(baseline.config);
  const QuantSpec spec = variant.quant_spec.value_or(QuantSpec{});
  const auto base_runs = run_all(baseline, calib);
  const auto runs = run_all(variant, calib);
  EvalReport report = summarize(runs, base_runs, calib, spec.activation_bits);
  report.variant = "joint-svd";
  report.scheme = scheme_for_spec(spec);
  report.weight_bits = spec.weight_bits;
  report.activation_bits = spec.activation_bits;
  report.ranks = variant.ranks();
  const CostReport c = cost(Scheme::kJointSvd, variant.config.embed_dim, report.seq_len, report.ranks);
  report.r1 = c.r1;
  report.r2 = c.r2;
  return report;
}

}  // namespace qsvd
