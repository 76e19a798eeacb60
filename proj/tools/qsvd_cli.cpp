// qsvd: command-line driver for the joint-SVD compression pipeline.
//
//   synth-model -> synth-calib -> factorize -> score -> allocate -> compress
//   -> quantize -> eval, plus `cost` for the closed-form accounting table.

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "qsvd/compressed_model.hpp"
#include "qsvd/cost_model.hpp"
#include "qsvd/error.hpp"
#include "qsvd/latent_engine.hpp"
#include "qsvd/model_store.hpp"
#include "qsvd/parallel.hpp"
#include "qsvd/pipeline_config.hpp"
#include "qsvd/rank_allocator.hpp"

namespace {

using qsvd::ordered_json;

struct Flags {
  std::string model, calib, out, config, factors, scores, alloc, in;
  std::uint64_t seed = 0;
  std::string budget, scheme, beta, whiten, rotation, method;
  std::size_t threads = 1;

  // synth-model / synth-calib / cost
  std::size_t layers = 4, embed = 32, heads = 4, input_dim = 0;
  bool rope = false;
  std::size_t samples = 16, seq_len = 16, rank = 0;
  std::string outliers = "3";
  double outlier_scale = 50.0;
};

struct Registered {
  CLI::Option* seed = nullptr;
  CLI::Option* budget = nullptr;
  CLI::Option* scheme = nullptr;
  CLI::Option* beta = nullptr;
  CLI::Option* whiten = nullptr;
  CLI::Option* rotation = nullptr;
  CLI::Option* threads = nullptr;
};

bool given(const CLI::Option* o) { return o != nullptr && o->count() > 0; }

// defaults < config file < flags
qsvd::PipelineConfig effective_config(const Flags& f, const Registered& r) {
  qsvd::PipelineConfig cfg;
  if (!f.config.empty()) cfg.merge_json(qsvd::read_json_file(f.config));
  if (given(r.seed)) cfg.seed = f.seed;
  if (given(r.budget)) cfg.budget = f.budget;
  if (given(r.scheme)) cfg.scheme = f.scheme;
  if (given(r.beta)) cfg.beta_mode = f.beta;
  if (given(r.whiten)) cfg.whitening = f.whiten;
  if (given(r.rotation)) cfg.rotation = f.rotation;
  if (given(r.threads)) cfg.threads = f.threads;
  cfg.validate();
  qsvd::set_thread_limit(static_cast<unsigned>(cfg.threads));
  return cfg;
}

void require(const std::string& value, const char* flag, const char* artifact) {
  if (value.empty()) {
    throw qsvd::usage_error("missing_artifact", std::string(flag) + " is required (" + artifact + ")");
  }
}

ordered_json stamp(ordered_json report, const qsvd::PipelineConfig& cfg) {
  report["pipeline"] = cfg.to_json();
  report["config_hash"] = qsvd::config_hash(cfg.to_json());
  return report;
}

void emit(const ordered_json& report, const std::string& out, bool always_print) {
  if (!out.empty()) qsvd::write_json_file(out, report);
  if (out.empty() || always_print) std::cout << report.dump(2) << "\n";
}

std::vector<std::size_t> parse_channels(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw qsvd::usage_error("invalid_channel", "--outliers: '" + item + "' is not a channel index");
    }
  }
  return out;
}

qsvd::CompressedModel load_stage(const std::string& dir, const char* flag) {
  require(dir, flag, "a compressed-model directory");
  return qsvd::load_compressed(dir);
}

int cmd_synth_model(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.out, "--out", "checkpoint directory to write");
  qsvd::ModelConfig mc;
  mc.num_layers = f.layers;
  mc.embed_dim = f.embed;
  mc.num_heads = f.heads;
  mc.input_dim = f.input_dim ? f.input_dim : f.embed;
  mc.uses_rope = f.rope;
  const qsvd::ToyModel model = qsvd::make_toy_model(mc, cfg.seed);
  qsvd::save_checkpoint(f.out, model);
  std::cout << stamp({{"checkpoint", f.out}, {"config", qsvd::config_to_json(mc)}}, cfg).dump(2) << "\n";
  return 0;
}

int cmd_synth_calib(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.model, "--model", "checkpoint that fixes input_dim");
  require(f.out, "--out", "calibration directory to write");
  const qsvd::Checkpoint ck = qsvd::load_checkpoint(f.model);
  qsvd::SyntheticCalibrationOptions opts;
  opts.num_samples = f.samples;
  opts.seq_len = f.seq_len;
  opts.seed = cfg.seed;
  opts.outlier_channels = parse_channels(f.outliers);
  opts.outlier_scale = f.outlier_scale;
  const auto calib = qsvd::generate_synthetic_calibration(ck.config, opts);
  qsvd::save_calibration(f.out, calib);
  std::cout << stamp({{"calibration", f.out}, {"num_samples", opts.num_samples}, {"seq_len", opts.seq_len}}, cfg).dump(2)
            << "\n";
  return 0;
}

int cmd_factorize(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.model, "--model", "checkpoint to factorize");
  require(f.out, "--out", "factor directory to write");
  const qsvd::ToyModel model = qsvd::load_model(f.model);
  std::optional<qsvd::CalibrationSet> calib;
  if (!f.calib.empty()) calib = qsvd::load_calibration(f.calib);
  const double beta = cfg.fixed_beta().value_or(qsvd::kDefaultBeta);
  auto factors = qsvd::factorize_model(model, cfg.whitening_kind(), calib ? &*calib : nullptr, beta);
  for (std::size_t l = 0; l < factors.size(); ++l) {
    const auto& floored = factors[l].whitening().floored_channels;
    if (floored.empty()) continue;
    ordered_json w;
    w["warning"] = {{"code", "whitening_floor"},
                    {"layer", l},
                    {"channels", floored},
                    {"message", "all-zero calibration channels floored at " + std::to_string(qsvd::kWhiteningFloor)}};
    std::cerr << w.dump() << "\n";
  }
  const auto full = qsvd::full_rank_model(model, std::move(factors));
  qsvd::save_compressed(f.out, full, cfg.to_json());
  std::cout << stamp({{"factors", f.out}, {"ranks", full.ranks()}}, cfg).dump(2) << "\n";
  return 0;
}

int cmd_score(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.model, "--model", "dense checkpoint for gradients");
  require(f.calib, "--calib", "calibration set for gradients");
  const auto factors = load_stage(f.factors, "--factors");
  if (factors.allocation || factors.is_quantized()) {
    throw qsvd::usage_error("stage_mismatch", "score needs the full-rank output of factorize, not an allocated model");
  }
  const qsvd::ToyModel model = qsvd::load_model(f.model);
  if (!(model.config == factors.config)) {
    throw qsvd::usage_error("config_mismatch", "--model and --factors describe different models");
  }
  const auto calib = qsvd::load_calibration(f.calib);
  const auto grads = qsvd::calibration_gradients(model, calib);
  const bool whitened = factors.layers.front().whitening().kind != qsvd::WhiteningTransform::Kind::kNone;
  qsvd::ScoreMethod method = whitened ? qsvd::ScoreMethod::kIdentityWhitened : qsvd::ScoreMethod::kIdentity;
  if (!f.method.empty()) method = qsvd::parse_score_method(f.method);
  qsvd::ImportanceTable table;
  switch (method) {
    case qsvd::ScoreMethod::kDirect:
      table = qsvd::score_direct(factors.layers, grads);
      break;
    case qsvd::ScoreMethod::kIdentity:
      table = qsvd::score_identity(factors.layers, grads);
      break;
    case qsvd::ScoreMethod::kIdentityWhitened:
      table = qsvd::score_identity_whitened(factors.layers, grads);
      break;
  }
  emit(stamp(qsvd::to_json(table), cfg), f.out, false);
  return 0;
}

int cmd_allocate(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.scores, "--scores", "importance table from score");
  const auto table = qsvd::importance_table_from_json(qsvd::read_json_file(f.scores));
  const std::size_t k = cfg.budget_count(table.embed_dim, table.num_layers());
  const auto alloc = qsvd::allocate(table, k);
  emit(stamp(qsvd::to_json(alloc), cfg), f.out, false);
  return 0;
}

int cmd_compress(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.alloc, "--alloc", "allocation from allocate");
  require(f.out, "--out", "compressed directory to write");
  const auto full = load_stage(f.factors, "--factors");
  const auto alloc = qsvd::allocation_from_json(qsvd::read_json_file(f.alloc));
  const auto compressed = qsvd::apply_allocation(full, alloc);
  qsvd::save_compressed(f.out, compressed, cfg.to_json());
  std::cout << stamp({{"compressed", f.out}, {"ranks", compressed.ranks()}}, cfg).dump(2) << "\n";
  return 0;
}

int cmd_quantize(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.out, "--out", "quantized directory to write");
  const auto compressed = load_stage(f.in, "--in");
  if (!compressed.allocation) {
    throw qsvd::usage_error("stage_mismatch",
                            "quantize needs an allocated model; missing artifact: allocation (run allocate and compress)");
  }
  if (compressed.is_quantized()) throw qsvd::usage_error("stage_mismatch", "--in is already quantized");
  qsvd::QuantizeOptions opts;
  opts.spec = cfg.quant_spec();
  opts.rotation = cfg.rotation_mode();
  opts.seed = cfg.seed;
  opts.fixed_beta = cfg.fixed_beta();
  std::vector<std::vector<qsvd::DenseMatrix>> inputs;
  if (!opts.fixed_beta) {
    require(f.model, "--model", "dense checkpoint for the β search");
    require(f.calib, "--calib", "calibration set for the β search");
    const qsvd::ToyModel model = qsvd::load_model(f.model);
    if (!(model.config == compressed.config)) {
      throw qsvd::usage_error("config_mismatch", "--model and --in describe different models");
    }
    inputs = qsvd::collect_layer_inputs(model, qsvd::load_calibration(f.calib));
  }
  const auto quantized = qsvd::quantize_model(compressed, opts, inputs);
  qsvd::save_compressed(f.out, quantized, cfg.to_json());
  std::vector<double> betas;
  for (const auto& l : quantized.layers) betas.push_back(l.beta());
  std::cout << stamp({{"quantized", f.out}, {"scheme", cfg.scheme}, {"betas", betas}}, cfg).dump(2) << "\n";
  return 0;
}

int cmd_eval(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  require(f.model, "--model", "dense baseline checkpoint");
  require(f.calib, "--calib", "evaluation inputs");
  const qsvd::ToyModel model = qsvd::load_model(f.model);
  const auto calib = qsvd::load_calibration(f.calib);
  qsvd::EvalReport report;
  if (f.in.empty()) {
    report = qsvd::evaluate(model, calib);
  } else {
    report = qsvd::evaluate(qsvd::load_compressed(f.in), model, calib);
  }
  emit(stamp(qsvd::to_json(report), cfg), f.out, true);
  return 0;
}

int cmd_cost(const Flags& f, const Registered& r) {
  const auto cfg = effective_config(f, r);
  std::size_t e = f.embed;
  std::size_t nl = f.layers;
  std::vector<std::size_t> ranks;
  if (!f.in.empty()) {
    const auto m = qsvd::load_compressed(f.in);
    e = m.config.embed_dim;
    nl = m.config.num_layers;
    ranks = m.ranks();
  } else {
    if (!f.model.empty()) {
      const auto ck = qsvd::load_checkpoint(f.model);
      e = ck.config.embed_dim;
      nl = ck.config.num_layers;
    }
    if (f.rank > 0) {
      ranks.assign(nl, f.rank);
    } else {
      // spread the budget evenly; earlier layers take the remainder
      const std::size_t k = std::min(cfg.budget_count(e, nl), e * nl);
      for (std::size_t l = 0; l < nl; ++l) ranks.push_back(k / nl + (l < k % nl ? 1 : 0));
    }
  }
  ordered_json reports = ordered_json::array();
  std::vector<qsvd::CostReport> rows;
  for (auto s : {qsvd::Scheme::kDense, qsvd::Scheme::kPerMatrixSvd, qsvd::Scheme::kJointSvd}) {
    rows.push_back(qsvd::cost(s, e, f.seq_len, ranks));
    reports.push_back(qsvd::to_json(rows.back()));
  }
  std::ostringstream table;
  table << std::left << std::setw(16) << "scheme" << std::right << std::setw(14) << "alpha" << std::setw(12) << "eta"
        << std::setw(16) << "gamma" << std::setw(10) << "R1" << std::setw(10) << "R2" << "\n";
  for (const auto& c : rows) {
    table << std::left << std::setw(16) << qsvd::scheme_name(c.scheme) << std::right << std::setw(14) << c.total.alpha
          << std::setw(12) << c.total.eta << std::setw(16) << c.total.gamma << std::fixed << std::setprecision(4)
          << std::setw(10) << c.r1 << std::setw(10) << c.r2 << "\n";
    table.unsetf(std::ios::fixed);
  }
  std::cout << table.str();
  ordered_json out;
  out["embed_dim"] = e;
  out["num_layers"] = nl;
  out["seq_len"] = f.seq_len;
  out["reports"] = reports;
  out = stamp(out, cfg);
  if (!f.out.empty()) qsvd::write_json_file(f.out, out);
  return 0;
}

void print_error(const std::string& kind, const std::string& code, const std::string& message) {
  ordered_json j;
  j["error"] = {{"kind", kind}, {"code", code}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qsvd: joint QKV SVD compression, rank allocation and quantization for a toy transformer"};
  app.require_subcommand(1);
  Flags f;
  std::map<const CLI::App*, Registered> regs;

  auto common = [&](CLI::App* sub) {
    Registered& reg = regs[sub];
    sub->add_option("--config", f.config, "JSON config file (flags override it)");
    reg.seed = sub->add_option("--seed", f.seed, "global seed");
    reg.threads = sub->add_option("--threads", f.threads, "worker cap for every stage");
    reg.budget = sub->add_option("--budget", f.budget, "count:<k> or ratio:<R2>");
    reg.scheme = sub->add_option("--scheme", f.scheme, "fp | w8a8 | w8a4 | w4a4");
    reg.beta = sub->add_option("--beta", f.beta, "fixed:<v> or search");
    reg.whiten = sub->add_option("--whiten", f.whiten, "none | activation");
    reg.rotation = sub->add_option("--rotation", f.rotation, "hadamard | random | none");
    sub->add_option("--model", f.model, "dense checkpoint directory");
    sub->add_option("--calib", f.calib, "calibration directory");
    sub->add_option("--out", f.out, "output directory or JSON file");
  };

  std::function<int()> run;
  auto bind = [&](CLI::App* sub, int (*fn)(const Flags&, const Registered&)) {
    sub->callback([&, sub, fn] { run = [&, sub, fn] { return fn(f, regs.at(sub)); }; });
  };

  auto* synth_model = app.add_subcommand("synth-model", "write a seeded toy checkpoint");
  common(synth_model);
  synth_model->add_option("--layers", f.layers, "attention layers");
  synth_model->add_option("--embed", f.embed, "embedding width E");
  synth_model->add_option("--heads", f.heads, "attention heads");
  synth_model->add_option("--input-dim", f.input_dim, "input/output width (default E)");
  synth_model->add_flag("--rope", f.rope, "enable rotary position embedding");
  bind(synth_model, cmd_synth_model);

  auto* synth_calib = app.add_subcommand("synth-calib", "write a seeded calibration set with outlier channels");
  common(synth_calib);
  synth_calib->add_option("--samples", f.samples, "number of sequences N");
  synth_calib->add_option("--seq-len", f.seq_len, "tokens per sequence L");
  synth_calib->add_option("--outliers", f.outliers, "comma-separated outlier channels");
  synth_calib->add_option("--outlier-scale", f.outlier_scale, "outlier channel multiplier");
  bind(synth_calib, cmd_synth_calib);

  auto* factorize = app.add_subcommand("factorize", "full-rank joint QKV factorization");
  common(factorize);
  bind(factorize, cmd_factorize);

  auto* score = app.add_subcommand("score", "importance scores for every singular value");
  common(score);
  score->add_option("--factors", f.factors, "output of factorize");
  score->add_option("--method", f.method, "direct | identity | identity_whitened (default from factors)");
  bind(score, cmd_score);

  auto* allocate = app.add_subcommand("allocate", "global top-k rank allocation");
  common(allocate);
  allocate->add_option("--scores", f.scores, "output of score");
  bind(allocate, cmd_allocate);

  auto* compress = app.add_subcommand("compress", "apply an allocation to full-rank factors");
  common(compress);
  compress->add_option("--factors", f.factors, "output of factorize");
  compress->add_option("--alloc", f.alloc, "output of allocate");
  bind(compress, cmd_compress);

  auto* quantize = app.add_subcommand("quantize", "rotate, pick beta and fake-quantize a compressed model");
  common(quantize);
  quantize->add_option("--in", f.in, "output of compress");
  bind(quantize, cmd_quantize);

  auto* eval = app.add_subcommand("eval", "loss, output MSE vs dense and cache accounting");
  common(eval);
  eval->add_option("--in", f.in, "compressed or quantized model (omit for the dense baseline)");
  bind(eval, cmd_eval);

  auto* cost = app.add_subcommand("cost", "closed-form parameter, cache and FLOP comparison");
  common(cost);
  cost->add_option("--in", f.in, "compressed model supplying per-layer ranks");
  cost->add_option("--embed", f.embed, "embedding width E");
  cost->add_option("--layers", f.layers, "attention layers");
  cost->add_option("--seq-len", f.seq_len, "sequence length L");
  cost->add_option("--rank", f.rank, "uniform rank r (overrides --budget)");
  bind(cost, cmd_cost);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", "bad_arguments", e.what());
    return qsvd::exit_code(qsvd::ErrorKind::kUsage);
  }

  try {
    return run();
  } catch (const qsvd::Error& e) {
    print_error(qsvd::kind_name(e.kind()), e.code(), e.what());
    return qsvd::exit_code(e.kind());
  } catch (const std::exception& e) {
    print_error("internal", "unexpected", e.what());
    return 1;
  }
}
