#include "qsvd/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "qsvd/error.hpp"
#include "qsvd/parallel.hpp"
#include "qsvd/rng.hpp"

namespace qsvd {

void ModelConfig::validate() const {
  if (num_layers == 0 || embed_dim == 0 || num_heads == 0 || input_dim == 0) {
    throw usage_error("invalid_config", "model config: all dimensions must be >= 1");
  }
  if (embed_dim % num_heads != 0) {
    throw usage_error("invalid_config", "model config: embed_dim " + std::to_string(embed_dim) +
                                            " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (uses_rope && head_dim() % 2 != 0) {
    throw usage_error("invalid_config", "model config: RoPE needs an even head_dim");
  }
}

void CalibrationSet::validate(const ModelConfig& config) const {
  if (inputs.empty()) throw usage_error("empty_calibration", "calibration set has no samples");
  if (targets.size() != inputs.size()) {
    throw format_error("shape_inconsistent", "calibration set: " + std::to_string(inputs.size()) +
                                                 " inputs but " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t len = inputs.front().rows();
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (inputs[n].rows() != len || inputs[n].cols() != config.input_dim || targets[n].rows() != len ||
        targets[n].cols() != config.input_dim) {
      throw usage_error("shape_mismatch", "calibration sample " + std::to_string(n) + " has shape " +
                                              inputs[n].shape_string() + "/" + targets[n].shape_string() +
                                              ", expected [" + std::to_string(len) + "x" +
                                              std::to_string(config.input_dim) + "]");
    }
  }
}

DenseMatrix GradientRecord::concatenated() const {
  const DenseMatrix parts[] = {g_wq, g_wk, g_wv};
  return hconcat(parts);
}

ToyModel make_toy_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t e = config.embed_dim;
  const double inv_sqrt_e = 1.0 / std::sqrt(static_cast<double>(e));

  ToyModel model;
  model.config = config;
  model.embed = config.input_dim == e
                    ? DenseMatrix::identity(e)
                    : rng.gaussian(config.input_dim, e, 1.0 / std::sqrt(static_cast<double>(config.input_dim)));

  std::vector<double> decay(e);
  for (std::size_t j = 0; j < e; ++j) decay[j] = std::exp(-4.0 * static_cast<double>(j) / static_cast<double>(e));

  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const DenseMatrix basis = scale_columns(rng.gaussian(e, e), decay);
    auto structured = [&] {
      DenseMatrix w = matmul(basis, rng.gaussian(e, e));
      w *= std::sqrt(static_cast<double>(e)) / w.frobenius_norm();
      w += rng.gaussian(e, e, 0.05 * inv_sqrt_e);
      return round_to_f32(std::move(w));
    };
    AttentionLayerWeights layer;
    layer.w_q = structured();
    layer.w_k = structured();
    layer.w_v = structured();
    layer.w_o = round_to_f32(rng.gaussian(e, e, inv_sqrt_e));
    model.layers.push_back(std::move(layer));
  }
  model.head = round_to_f32(rng.gaussian(e, config.input_dim, inv_sqrt_e));
  model.embed = round_to_f32(std::move(model.embed));
  return model;
}

DenseMatrix rms_norm(const DenseMatrix& x, std::vector<double>* inv_rms) {
  DenseMatrix out(x.rows(), x.cols());
  if (inv_rms) inv_rms->assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double ms = 0.0;
    for (double v : x.row(t)) ms += v * v;
    ms /= static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + kRmsEpsilon);
    auto in = x.row(t);
    auto o = out.row(t);
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] = in[c] * inv;
    if (inv_rms) (*inv_rms)[t] = inv;
  }
  return out;
}

DenseMatrix rms_norm_backward(const DenseMatrix& x, std::span<const double> inv_rms, const DenseMatrix& grad_out) {
  DenseMatrix grad(x.rows(), x.cols());
  const double width = static_cast<double>(x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto xr = x.row(t);
    auto gr = grad_out.row(t);
    double dot = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) dot += xr[c] * gr[c];
    const double inv = inv_rms[t];
    const double coeff = inv * inv * inv * dot / width;
    auto out = grad.row(t);
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] = inv * gr[c] - coeff * xr[c];
  }
  return grad;
}

void apply_rope(DenseMatrix& m, std::size_t head_dim, std::size_t first_position, bool inverse) {
  const std::size_t heads = m.cols() / head_dim;
  for (std::size_t t = 0; t < m.rows(); ++t) {
    const double pos = static_cast<double>(first_position + t);
    auto row = m.row(t);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i + 1 < head_dim; i += 2) {
        const double theta =
            pos * std::pow(kRopeBase, -static_cast<double>(i) / static_cast<double>(head_dim));
        const double c = std::cos(theta);
        const double s = inverse ? -std::sin(theta) : std::sin(theta);
        double& x = row[h * head_dim + i];
        double& y = row[h * head_dim + i + 1];
        const double x0 = x;
        const double y0 = y;
        x = x0 * c - y0 * s;
        y = x0 * s + y0 * c;
      }
    }
  }
}

AttentionResult causal_attention(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v,
                                 std::size_t num_heads, std::size_t first_query_position) {
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows() || q.cols() % num_heads != 0) {
    throw usage_error("shape_mismatch", "attention: q " + q.shape_string() + " k " + k.shape_string() + " v " +
                                            v.shape_string());
  }
  if (first_query_position + q.rows() > k.rows()) {
    throw usage_error("shape_mismatch", "attention: queries extend past the available keys");
  }
  const std::size_t hd = q.cols() / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttentionResult result;
  result.output = DenseMatrix(q.rows(), q.cols());
  for (std::size_t h = 0; h < num_heads; ++h) {
    DenseMatrix probs(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const std::size_t visible = first_query_position + i + 1;
      double max_logit = -INFINITY;
      for (std::size_t j = 0; j < visible; ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < hd; ++d) acc += q(i, h * hd + d) * k(j, h * hd + d);
        probs(i, j) = acc * scale;
        max_logit = std::max(max_logit, probs(i, j));
      }
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        probs(i, j) = std::exp(probs(i, j) - max_logit);
        total += probs(i, j);
      }
      for (std::size_t j = 0; j < visible; ++j) probs(i, j) /= total;
      for (std::size_t j = 0; j < visible; ++j) {
        const double p = probs(i, j);
        for (std::size_t d = 0; d < hd; ++d) result.output(i, h * hd + d) += p * v(j, h * hd + d);
      }
    }
    result.probs.push_back(std::move(probs));
  }
  return result;
}

ForwardTrace forward(const ToyModel& model, const DenseMatrix& input) {
  const ModelConfig& cfg = model.config;
  if (input.cols() != cfg.input_dim || input.rows() == 0) {
    throw usage_error("shape_mismatch", "forward: input " + input.shape_string() + " does not match input_dim " +
                                            std::to_string(cfg.input_dim));
  }
  ForwardTrace trace;
  DenseMatrix h = matmul(input, model.embed);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const AttentionLayerWeights& w = model.layers[l];
    LayerActivations act;
    act.input = h;
    act.normed = rms_norm(h, &act.inv_rms);
    act.q = matmul(act.normed, w.w_q);
    act.k = matmul(act.normed, w.w_k);
    act.v = matmul(act.normed, w.w_v);
    if (cfg.uses_rope) {
      apply_rope(act.q, cfg.head_dim(), 0);
      apply_rope(act.k, cfg.head_dim(), 0);
    }
    act.attention = causal_attention(act.q, act.k, act.v, cfg.num_heads, 0);
    h += matmul(act.attention.output, w.w_o);
    if (!h.all_finite()) {
      throw numerical_error("non_finite", "forward: non-finite activations first appear at layer " +
                                              std::to_string(l));
    }
    trace.layers.push_back(std::move(act));
  }
  trace.final_input = h;
  trace.final_normed = rms_norm(h, &trace.final_inv_rms);
  trace.output = matmul(trace.final_normed, model.head);
  if (!trace.output.all_finite()) {
    throw numerical_error("non_finite", "forward: non-finite values first appear in the output head");
  }
  return trace;
}

double mse_loss(const DenseMatrix& output, const DenseMatrix& target) {
  if (output.rows() != target.rows() || output.cols() != target.cols()) {
    throw usage_error("shape_mismatch", "mse_loss: " + output.shape_string() + " vs " + target.shape_string());
  }
  double acc = 0.0;
  auto o = output.values();
  auto t = target.values();
  for (std::size_t i = 0; i < o.size(); ++i) acc += (o[i] - t[i]) * (o[i] - t[i]);
  return acc / static_cast<double>(o.size());
}

SampleGradients loss_and_gradients(const ToyModel& model, const DenseMatrix& input, const DenseMatrix& target,
                                   std::size_t sample_index) {
  const ModelConfig& cfg = model.config;
  const ForwardTrace trace = forward(model, input);

  SampleGradients out;
  out.loss = mse_loss(trace.output, target);
  if (!std::isfinite(out.loss)) throw numerical_error("non_finite", "loss_and_gradients: non-finite loss");

  DenseMatrix d_out = trace.output - target;
  d_out *= 2.0 / static_cast<double>(d_out.size());
  DenseMatrix dh = rms_norm_backward(trace.final_input, trace.final_inv_rms, matmul_nt(d_out, model.head));

  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  out.layers.resize(model.layers.size());

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const AttentionLayerWeights& w = model.layers[li];
    const LayerActivations& act = trace.layers[li];
    const std::size_t len = act.q.rows();

    const DenseMatrix d_attn = matmul_nt(dh, w.w_o);
    DenseMatrix dq(len, cfg.embed_dim);
    DenseMatrix dk(len, cfg.embed_dim);
    DenseMatrix dv(len, cfg.embed_dim);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const DenseMatrix& p = act.attention.probs[h];
      for (std::size_t i = 0; i < len; ++i) {
        // dP(i,j) = dO_i · V_j over this head's slice.
        std::vector<double> dp(i + 1, 0.0);
        double row_dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (std::size_t d = 0; d < hd; ++d) acc += d_attn(i, h * hd + d) * act.v(j, h * hd + d);
          dp[j] = acc;
          row_dot += acc * p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = p(i, j);
          const double ds = pij * (dp[j] - row_dot) * scale;
          for (std::size_t d = 0; d < hd; ++d) {
            const std::size_t c = h * hd + d;
            dv(j, c) += pij * d_attn(i, c);
            dq(i, c) += ds * act.k(j, c);
            dk(j, c) += ds * act.q(i, c);
          }
        }
      }
    }
    if (cfg.uses_rope) {
      apply_rope(dq, hd, 0, /*inverse=*/true);
      apply_rope(dk, hd, 0, /*inverse=*/true);
    }

    GradientRecord& rec = out.layers[li];
    rec.layer_index = li;
    rec.sample_index = sample_index;
    rec.g_wq = matmul_tn(act.normed, dq);
    rec.g_wk = matmul_tn(act.normed, dk);
    rec.g_wv = matmul_tn(act.normed, dv);

    DenseMatrix dn = matmul_nt(dq, w.w_q);
    dn += matmul_nt(dk, w.w_k);
    dn += matmul_nt(dv, w.w_v);
    dh += rms_norm_backward(act.input, act.inv_rms, dn);
  }
  return out;
}

std::vector<SampleGradients> calibration_gradients(const ToyModel& model, const CalibrationSet& calib) {
  calib.validate(model.config);
  std::vector<SampleGradients> out(calib.size());
  parallel_for(calib.size(), [&](std::size_t n) {
    out[n] = loss_and_gradients(model, calib.inputs[n], calib.targets[n], n);
  });
  return out;
}

double loss_only(const ToyModel& model, const CalibrationSet& calib) {
  calib.validate(model.config);
  std::vector<double> losses(calib.size());
  parallel_for(calib.size(), [&](std::size_t n) {
    losses[n] = mse_loss(forward(model, calib.inputs[n]).output, calib.targets[n]);
  });
  double total = 0.0;
  for (double v : losses) total += v;
  return total / static_cast<double>(losses.size());
}

}  // namespace qsvd
