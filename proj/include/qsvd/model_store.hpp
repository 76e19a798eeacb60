#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsvd/compressed_model.hpp"
#include "qsvd/cost_model.hpp"
#include "qsvd/latent_engine.hpp"
#include "qsvd/rank_allocator.hpp"
#include "qsvd/transformer.hpp"

namespace qsvd {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";
inline constexpr const char* kMetaFile = "qsvd_meta.json";

// Values are held as doubles but are always exactly representable in binary32.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t element_count() const;
  static Tensor from_matrix(const DenseMatrix& m);
  static Tensor from_vector(const std::vector<double>& v);
  DenseMatrix to_matrix() const;  // rank-2 only
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Insertion order is the on-disk order.
using TensorList = std::vector<std::pair<std::string, Tensor>>;
using TensorMap = std::map<std::string, Tensor>;

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::string dtype = "f32";
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc32 = 0;
};

struct TensorManifest {
  int format_version = kFormatVersion;
  std::string kind;  // "checkpoint" | "calibration" | "compressed"
  ordered_json config;
  std::vector<TensorEntry> entries;
};

ordered_json manifest_to_json(const TensorManifest& manifest);
TensorManifest manifest_from_json(const ordered_json& j);

// Structural checks against the blob size: version, dtype, unique names,
// length == product(shape)·4, every range inside the blob, no overlaps.
void validate_manifest(const TensorManifest& manifest, std::uint64_t blob_bytes);

// Raw container: manifest.json + tensors.bin. Overwrites existing files.
void write_container(const std::filesystem::path& dir, const std::string& kind, const ordered_json& config,
                     const TensorList& tensors);
struct Container {
  TensorManifest manifest;
  TensorMap tensors;
};
Container read_container(const std::filesystem::path& dir);

// --- checkpoints ---

ordered_json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const ordered_json& j);

void save_checkpoint(const std::filesystem::path& dir, const ToyModel& model);
struct Checkpoint {
  ModelConfig config;
  TensorMap tensors;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);
ToyModel model_from_checkpoint(const Checkpoint& checkpoint);
ToyModel load_model(const std::filesystem::path& dir);

// --- calibration sets ---

struct SyntheticCalibrationOptions {
  std::size_t num_samples = 16;
  std::size_t seq_len = 16;
  std::uint64_t seed = 0;
  std::vector<std::size_t> outlier_channels;
  double outlier_scale = 50.0;
};

// Unit Gaussian inputs with the listed channels scaled; Gaussian targets.
// Deterministic per seed; values rounded to binary32.
CalibrationSet generate_synthetic_calibration(const ModelConfig& config, const SyntheticCalibrationOptions& options);

void save_calibration(const std::filesystem::path& dir, const CalibrationSet& calib);
CalibrationSet load_calibration(const std::filesystem::path& dir);

// --- compressed models ---

// Stores the orthonormal factors, σ, whitening and quantization codes per
// layer as binary32, and qsvd_meta.json with the per-layer rank, β, retained
// indices, rotation seeds and quantization scales (binary64 JSON numbers).
// extra_meta, when an object, is merged in as "pipeline" (effective config).
void save_compressed(const std::filesystem::path& dir, const CompressedModel& model,
                     const ordered_json& extra_meta = ordered_json());
CompressedModel load_compressed(const std::filesystem::path& dir);
ordered_json load_compressed_meta(const std::filesystem::path& dir);

// --- JSON reports (fixed key order) ---

ordered_json to_json(const ImportanceTable& table);
ImportanceTable importance_table_from_json(const ordered_json& j);
ordered_json to_json(const RankAllocation& allocation);
RankAllocation allocation_from_json(const ordered_json& j);
ordered_json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const ordered_json& j);
ordered_json to_json(const CostReport& report);
CostReport cost_report_from_json(const ordered_json& j);
ordered_json to_json(const QuantSpec& spec);
QuantSpec quant_spec_from_json(const ordered_json& j);

// FNV-1a 64 of the compact dump, as 16 hex digits.
std::string config_hash(const ordered_json& config);

std::string read_text_file(const std::filesystem::path& path);
ordered_json read_json_file(const std::filesystem::path& path);
// Pretty-printed with a trailing newline.
void write_json_file(const std::filesystem::path& path, const ordered_json& j);

}  // namespace qsvd
