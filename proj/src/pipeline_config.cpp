#include "qsvd/pipeline_config.hpp"

#include <charconv>
#include <cmath>

#include "qsvd/cost_model.hpp"
#include "qsvd/error.hpp"

namespace qsvd {

namespace {

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

double parse_real(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v)) {
    throw usage_error("invalid_config", what + ": '" + text + "' is not a number");
  }
  return v;
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty()) {
    throw usage_error("invalid_config", what + ": '" + text + "' is not a non-negative integer");
  }
  return v;
}

}  // namespace

void PipelineConfig::validate() const {
  whitening_kind();
  fixed_beta();
  quant_spec();
  rotation_mode();
  if (starts_with(budget, "count:")) {
    if (parse_count(budget.substr(6), "budget") == 0) throw usage_error("invalid_config", "budget: count must be >= 1");
  } else if (starts_with(budget, "ratio:")) {
    const double r = parse_real(budget.substr(6), "budget");
    if (!(r > 0.0 && r <= 1.0)) throw usage_error("invalid_config", "budget: ratio must be in (0, 1]");
  } else {
    throw usage_error("invalid_config", "budget: expected count:<k> or ratio:<R2>, got '" + budget + "'");
  }
  if (threads == 0) throw usage_error("invalid_config", "threads must be >= 1");
}

WhiteningTransform::Kind PipelineConfig::whitening_kind() const {
  if (whitening == "none") return WhiteningTransform::Kind::kNone;
  if (whitening == "activation") return WhiteningTransform::Kind::kActivation;
  throw usage_error("invalid_config", "whitening: expected none or activation, got '" + whitening + "'");
}

std::optional<double> PipelineConfig::fixed_beta() const {
  if (beta_mode == "search") return std::nullopt;
  if (starts_with(beta_mode, "fixed:")) {
    const double b = parse_real(beta_mode.substr(6), "beta");
    if (!(b >= 0.0 && b <= 1.0)) throw usage_error("invalid_config", "beta: fixed value must be in [0, 1]");
    return b;
  }
  throw usage_error("invalid_config", "beta: expected fixed:<v> or search, got '" + beta_mode + "'");
}

QuantSpec PipelineConfig::quant_spec() const {
  try {
    return quant_spec_for_scheme(scheme);
  } catch (const Error& e) {
    throw usage_error("invalid_config", std::string("scheme: ") + e.what());
  }
}

RotationMode PipelineConfig::rotation_mode() const {
  try {
    return parse_rotation_mode(rotation);
  } catch (const Error& e) {
    throw usage_error("invalid_config", std::string("rotation: ") + e.what());
  }
}

std::size_t PipelineConfig::budget_count(std::size_t embed_dim, std::size_t num_layers) const {
  validate();
  if (starts_with(budget, "count:")) return parse_count(budget.substr(6), "budget");
  return budget_for_ratio(parse_real(budget.substr(6), "budget"), embed_dim, num_layers);
}

nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["whitening"] = whitening;
  j["beta_mode"] = beta_mode;
  j["scheme"] = scheme;
  j["budget"] = budget;
  j["rotation"] = rotation;
  j["threads"] = threads;
  return j;
}

void PipelineConfig::merge_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw usage_error("invalid_config", "config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed") {
        seed = value.get<std::uint64_t>();
      } else if (key == "whitening") {
        whitening = value.get<std::string>();
      } else if (key == "beta_mode") {
        beta_mode = value.get<std::string>();
      } else if (key == "scheme") {
        scheme = value.get<std::string>();
      } else if (key == "budget") {
        budget = value.get<std::string>();
      } else if (key == "rotation") {
        rotation = value.get<std::string>();
      } else if (key == "threads") {
        threads = value.get<std::size_t>();
      } else {
        throw usage_error("unknown_config_key", "config: unknown key '" + key + "'");
      }
    } catch (const nlohmann::json::exception&) {
      throw usage_error("invalid_config", "config: key '" + key + "' has the wrong type");
    }
  }
}

}  // namespace qsvd
