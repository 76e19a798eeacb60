#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "qsvd/factorizer.hpp"
#include "qsvd/quantizer.hpp"

namespace qsvd {

// Effective settings of one CLI run. Every stage echoes the whole struct
// into its output so a report can be traced back to the run that made it.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string whitening = "none";   // none | activation
  std::string beta_mode = "search";  // fixed:<v> | search
  std::string scheme = "fp";         // fp | w8a8 | w8a4 | w4a4
  std::string budget = "ratio:0.1875";  // count:<k> | ratio:<R2>
  std::string rotation = "hadamard";    // hadamard | random | none
  std::size_t threads = 1;

  // Throws usage errors for out-of-domain values.
  void validate() const;

  WhiteningTransform::Kind whitening_kind() const;
  // nullopt for "search".
  std::optional<double> fixed_beta() const;
  QuantSpec quant_spec() const;
  RotationMode rotation_mode() const;
  // Resolves count:/ratio: into a rank count for the given model shape.
  std::size_t budget_count(std::size_t embed_dim, std::size_t num_layers) const;

  nlohmann::ordered_json to_json() const;
  // Overlays the keys present in j; unknown keys are rejected.
  void merge_json(const nlohmann::ordered_json& j);
};

}  // namespace qsvd
