#include "qsvd/model_store.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "qsvd/error.hpp"
#include "qsvd/rng.hpp"

namespace fs = std::filesystem;

namespace qsvd {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

void put_f32(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xffu));
}

double get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::uint32_t checksum(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; chunk to stay portable for large blobs
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("missing_file", "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error("io_error", "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw format_error("io_error", "short write to " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw format_error("io_error", "cannot create directory " + dir.string() + ": " + ec.message());
}

// Field access for persisted JSON; absent or mistyped fields are schema errors.
const ordered_json& field(const ordered_json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw format_error("schema_version", where + ": missing field '" + key + "'");
  }
  return j.at(key);
}

template <typename T>
T get(const ordered_json& j, const char* key, const std::string& where) {
  const ordered_json& v = field(j, key, where);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw format_error("schema_version", where + ": field '" + key + "' has the wrong type");
  }
}

const Tensor& need(const TensorMap& tensors, const std::string& name, const std::vector<std::size_t>& shape) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw format_error("missing_tensor", "tensor '" + name + "' is absent");
  if (it->second.shape != shape) {
    throw format_error("shape_inconsistent", "tensor '" + name + "' has shape " + shape_text(it->second.shape) +
                                                 ", expected " + shape_text(shape));
  }
  return it->second;
}

}  // namespace

// --- tensors ---

std::size_t Tensor::element_count() const { return product(shape); }

Tensor Tensor::from_matrix(const DenseMatrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.values.assign(m.values().begin(), m.values().end());
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  Tensor t;
  t.shape = {v.size()};
  t.values = v;
  return t;
}

DenseMatrix Tensor::to_matrix() const {
  if (shape.size() != 2) throw format_error("shape_inconsistent", "expected a rank-2 tensor, got " + shape_text(shape));
  return DenseMatrix(shape[0], shape[1], values);
}

// --- manifest ---

ordered_json manifest_to_json(const TensorManifest& manifest) {
  ordered_json j;
  j["format_version"] = manifest.format_version;
  j["kind"] = manifest.kind;
  j["config"] = manifest.config;
  j["entries"] = ordered_json::array();
  for (const auto& e : manifest.entries) {
    ordered_json je;
    je["name"] = e.name;
    je["shape"] = e.shape;
    je["dtype"] = e.dtype;
    je["offset"] = e.offset;
    je["length"] = e.length;
    je["crc32"] = e.crc32;
    j["entries"].push_back(je);
  }
  return j;
}

TensorManifest manifest_from_json(const ordered_json& j) {
  TensorManifest m;
  m.format_version = get<int>(j, "format_version", "manifest");
  if (m.format_version != kFormatVersion) {
    throw format_error("schema_version", "manifest: unsupported format_version " + std::to_string(m.format_version));
  }
  m.kind = get<std::string>(j, "kind", "manifest");
  m.config = j.contains("config") ? j.at("config") : ordered_json::object();
  const ordered_json& entries = field(j, "entries", "manifest");
  if (!entries.is_array()) throw format_error("schema_version", "manifest: 'entries' must be an array");
  for (const auto& je : entries) {
    TensorEntry e;
    const std::string where = "manifest entry";
    e.name = get<std::string>(je, "name", where);
    e.shape = get<std::vector<std::size_t>>(je, "shape", where + " '" + e.name + "'");
    e.dtype = get<std::string>(je, "dtype", where + " '" + e.name + "'");
    e.offset = get<std::uint64_t>(je, "offset", where + " '" + e.name + "'");
    e.length = get<std::uint64_t>(je, "length", where + " '" + e.name + "'");
    e.crc32 = get<std::uint32_t>(je, "crc32", where + " '" + e.name + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

void validate_manifest(const TensorManifest& manifest, std::uint64_t blob_bytes) {
  if (manifest.format_version != kFormatVersion) {
    throw format_error("schema_version", "manifest: unsupported format_version " +
                                             std::to_string(manifest.format_version));
  }
  std::set<std::string> names;
  for (const auto& e : manifest.entries) {
    if (!names.insert(e.name).second) throw format_error("duplicate_name", "manifest: duplicate entry '" + e.name + "'");
    if (e.dtype != "f32") {
      throw format_error("unsupported_dtype", "manifest: entry '" + e.name + "' has dtype '" + e.dtype + "'");
    }
    if (e.length != static_cast<std::uint64_t>(product(e.shape)) * 4) {
      throw format_error("shape_inconsistent", "manifest: entry '" + e.name + "' declares length " +
                                                   std::to_string(e.length) + " for shape " + shape_text(e.shape));
    }
    if (e.offset > blob_bytes || e.length > blob_bytes - e.offset) {
      throw format_error("out_of_bounds", "manifest: entry '" + e.name + "' [" + std::to_string(e.offset) + ", +" +
                                              std::to_string(e.length) + ") exceeds " + std::to_string(blob_bytes) +
                                              "-byte tensors.bin");
    }
  }
  std::vector<const TensorEntry*> sorted;
  for (const auto& e : manifest.entries) {
    if (e.length > 0) sorted.push_back(&e);
  }
  std::sort(sorted.begin(), sorted.end(), [](const TensorEntry* a, const TensorEntry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1]->offset + sorted[i - 1]->length > sorted[i]->offset) {
      throw format_error("overlap", "manifest: entries '" + sorted[i - 1]->name + "' and '" + sorted[i]->name +
                                        "' overlap");
    }
  }
}

void write_container(const fs::path& dir, const std::string& kind, const ordered_json& config,
                     const TensorList& tensors) {
  ensure_dir(dir);
  TensorManifest manifest;
  manifest.kind = kind;
  manifest.config = config;
  std::vector<unsigned char> blob;
  for (const auto& [name, t] : tensors) {
    if (t.values.size() != t.element_count()) {
      throw usage_error("shape_mismatch", "tensor '" + name + "': " + std::to_string(t.values.size()) +
                                              " values for shape " + shape_text(t.shape));
    }
    TensorEntry e;
    e.name = name;
    e.shape = t.shape;
    e.offset = blob.size();
    for (double v : t.values) put_f32(blob, v);
    e.length = blob.size() - e.offset;
    e.crc32 = checksum(blob.data() + e.offset, e.length);
    manifest.entries.push_back(std::move(e));
  }
  validate_manifest(manifest, blob.size());
  write_bytes(dir / kBlobFile, blob.data(), blob.size());
  write_json_file(dir / kManifestFile, manifest_to_json(manifest));
}

Container read_container(const fs::path& dir) {
  if (!fs::exists(dir / kManifestFile)) {
    throw format_error("missing_file", "missing " + (dir / kManifestFile).string());
  }
  if (!fs::exists(dir / kBlobFile)) throw format_error("missing_file", "missing " + (dir / kBlobFile).string());
  Container c;
  c.manifest = manifest_from_json(read_json_file(dir / kManifestFile));
  const std::vector<unsigned char> blob = read_bytes(dir / kBlobFile);
  validate_manifest(c.manifest, blob.size());
  for (const auto& e : c.manifest.entries) {
    const unsigned char* p = blob.data() + e.offset;
    if (checksum(p, e.length) != e.crc32) {
      throw format_error("checksum_mismatch", "tensor '" + e.name + "' fails its crc32 check in " +
                                                  (dir / kBlobFile).string());
    }
    Tensor t;
    t.shape = e.shape;
    t.values.resize(product(e.shape));
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = get_f32(p + 4 * i);
    c.tensors.emplace(e.name, std::move(t));
  }
  return c;
}

// --- checkpoints ---

ordered_json config_to_json(const ModelConfig& config) {
  ordered_json j;
  j["num_layers"] = config.num_layers;
  j["embed_dim"] = config.embed_dim;
  j["num_heads"] = config.num_heads;
  j["head_dim"] = config.num_heads ? config.head_dim() : 0;
  j["uses_rope"] = config.uses_rope;
  j["input_dim"] = config.input_dim;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.num_layers = get<std::size_t>(j, "num_layers", "config");
  c.embed_dim = get<std::size_t>(j, "embed_dim", "config");
  c.num_heads = get<std::size_t>(j, "num_heads", "config");
  c.uses_rope = get<bool>(j, "uses_rope", "config");
  c.input_dim = get<std::size_t>(j, "input_dim", "config");
  try {
    c.validate();
  } catch (const Error& e) {
    throw format_error("invalid_config", std::string("config: ") + e.what());
  }
  if (j.contains("head_dim") && get<std::size_t>(j, "head_dim", "config") != c.head_dim()) {
    throw format_error("invalid_config", "config: head_dim disagrees with embed_dim / num_heads");
  }
  return c;
}

void save_checkpoint(const fs::path& dir, const ToyModel& model) {
  TensorList tensors;
  tensors.emplace_back("embed", Tensor::from_matrix(model.embed));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    tensors.emplace_back(p + "w_q", Tensor::from_matrix(model.layers[l].w_q));
    tensors.emplace_back(p + "w_k", Tensor::from_matrix(model.layers[l].w_k));
    tensors.emplace_back(p + "w_v", Tensor::from_matrix(model.layers[l].w_v));
    tensors.emplace_back(p + "w_o", Tensor::from_matrix(model.layers[l].w_o));
  }
  tensors.emplace_back("head", Tensor::from_matrix(model.head));
  write_container(dir, "checkpoint", config_to_json(model.config), tensors);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Container c = read_container(dir);
  if (c.manifest.kind != "checkpoint") {
    throw format_error("wrong_kind", dir.string() + " holds a '" + c.manifest.kind + "' container, not a checkpoint");
  }
  return Checkpoint{config_from_json(c.manifest.config), std::move(c.tensors)};
}

ToyModel model_from_checkpoint(const Checkpoint& checkpoint) {
  const ModelConfig& cfg = checkpoint.config;
  const std::size_t e = cfg.embed_dim;
  ToyModel m;
  m.config = cfg;
  m.embed = need(checkpoint.tensors, "embed", {cfg.input_dim, e}).to_matrix();
  m.head = need(checkpoint.tensors, "head", {e, cfg.input_dim}).to_matrix();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    AttentionLayerWeights w;
    w.w_q = need(checkpoint.tensors, p + "w_q", {e, e}).to_matrix();
    w.w_k = need(checkpoint.tensors, p + "w_k", {e, e}).to_matrix();
    w.w_v = need(checkpoint.tensors, p + "w_v", {e, e}).to_matrix();
    w.w_o = need(checkpoint.tensors, p + "w_o", {e, e}).to_matrix();
    m.layers.push_back(std::move(w));
  }
  return m;
}

ToyModel load_model(const fs::path& dir) { return model_from_checkpoint(load_checkpoint(dir)); }

// --- calibration ---

CalibrationSet generate_synthetic_calibration(const ModelConfig& config, const SyntheticCalibrationOptions& options) {
  if (options.num_samples == 0 || options.seq_len == 0) {
    throw usage_error("invalid_calibration", "synthetic calibration needs N >= 1 and L >= 1");
  }
  for (std::size_t ch : options.outlier_channels) {
    if (ch >= config.input_dim) {
      throw usage_error("invalid_channel", "outlier channel " + std::to_string(ch) + " >= input_dim " +
                                               std::to_string(config.input_dim));
    }
  }
  Rng input_rng(options.seed);
  Rng target_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  CalibrationSet calib;
  for (std::size_t n = 0; n < options.num_samples; ++n) {
    DenseMatrix x = input_rng.gaussian(options.seq_len, config.input_dim, 1.0);
    for (std::size_t ch : options.outlier_channels)
      for (std::size_t t = 0; t < x.rows(); ++t) x(t, ch) *= options.outlier_scale;
    calib.inputs.push_back(round_to_f32(x));
    calib.targets.push_back(round_to_f32(target_rng.gaussian(options.seq_len, config.input_dim, 1.0)));
  }
  return calib;
}

void save_calibration(const fs::path& dir, const CalibrationSet& calib) {
  if (calib.size() == 0) throw usage_error("invalid_calibration", "calibration set is empty");
  const std::size_t n = calib.size();
  const std::size_t l = calib.inputs.front().rows();
  const std::size_t d = calib.inputs.front().cols();
  Tensor inputs;
  Tensor targets;
  inputs.shape = targets.shape = {n, l, d};
  for (std::size_t i = 0; i < n; ++i) {
    if (calib.inputs[i].rows() != l || calib.inputs[i].cols() != d || calib.targets[i].rows() != l ||
        calib.targets[i].cols() != d) {
      throw usage_error("shape_mismatch", "calibration sample " + std::to_string(i) + " does not share L x D");
    }
    inputs.values.insert(inputs.values.end(), calib.inputs[i].values().begin(), calib.inputs[i].values().end());
    targets.values.insert(targets.values.end(), calib.targets[i].values().begin(), calib.targets[i].values().end());
  }
  ordered_json cfg;
  cfg["num_samples"] = n;
  cfg["seq_len"] = l;
  cfg["input_dim"] = d;
  write_container(dir, "calibration", cfg, {{"inputs", std::move(inputs)}, {"targets", std::move(targets)}});
}

CalibrationSet load_calibration(const fs::path& dir) {
  Container c = read_container(dir);
  if (c.manifest.kind != "calibration") {
    throw format_error("wrong_kind", dir.string() + " holds a '" + c.manifest.kind + "' container, not calibration");
  }
  auto it = c.tensors.find("inputs");
  if (it == c.tensors.end() || it->second.shape.size() != 3) {
    throw format_error("shape_inconsistent", "calibration: 'inputs' must be a [N,L,D] tensor");
  }
  const auto shape = it->second.shape;
  if (shape[0] == 0 || shape[1] == 0) throw format_error("shape_inconsistent", "calibration: N and L must be >= 1");
  const Tensor& inputs = it->second;
  const Tensor& targets = need(c.tensors, "targets", shape);
  CalibrationSet calib;
  const std::size_t per = shape[1] * shape[2];
  for (std::size_t i = 0; i < shape[0]; ++i) {
    auto slice = [&](const Tensor& t) {
      return DenseMatrix(shape[1], shape[2],
                         std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(i * per),
                                             t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    };
    calib.inputs.push_back(slice(inputs));
    calib.targets.push_back(slice(targets));
  }
  return calib;
}

// --- compressed models ---

namespace {

ordered_json rotation_spec_json(const RotationSpec& s) {
  ordered_json j;
  j["kind"] = rotation_kind_name(s.kind);
  j["dim"] = s.dim;
  j["seed"] = s.seed;
  return j;
}

RotationSpec rotation_spec_from(const ordered_json& j, const std::string& where) {
  RotationSpec s;
  try {
    s.kind = parse_rotation_kind(get<std::string>(j, "kind", where));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFormat) throw;
    throw format_error("schema_version", where + ": " + e.what());
  }
  s.dim = get<std::size_t>(j, "dim", where);
  s.seed = get<std::uint64_t>(j, "seed", where);
  return s;
}

// Codes are small integers and go into the f32 blob. Scales are binary64 and
// would not survive f32, so they live in the metadata as JSON numbers.
void add_quantized(TensorList& tensors, ordered_json& scales, const std::string& prefix, const std::string& role,
                   const QuantizedTensor& q) {
  if (q.codes.empty()) return;
  tensors.emplace_back(prefix + role + ".codes", Tensor::from_matrix(q.codes));
  scales[role] = q.scales;
}

void load_quantized(const TensorMap& tensors, const ordered_json& jl, const std::string& where,
                    const std::string& prefix, const std::string& role, QuantizedTensor& q) {
  if (q.codes.empty()) return;  // pass-through widths carry no codes
  const DenseMatrix codes = need(tensors, prefix + role + ".codes", {q.codes.rows(), q.codes.cols()}).to_matrix();
  const auto scales = get<std::vector<double>>(field(jl, "scales", where), role.c_str(), where + " scales");
  if (scales.size() != q.scales.size()) {
    throw format_error("shape_inconsistent", where + ": " + role + " has " + std::to_string(scales.size()) +
                                                 " scales, expected " + std::to_string(q.scales.size()));
  }
  q.codes = codes;
  q.scales = scales;
  for (std::size_t r = 0; r < codes.rows(); ++r)
    for (std::size_t c = 0; c < codes.cols(); ++c) q.dequantized(r, c) = codes(r, c) * scales[c];
}

}  // namespace

ordered_json to_json(const QuantSpec& spec) {
  ordered_json j;
  j["scheme"] = scheme_for_spec(spec);
  j["weight_bits"] = spec.weight_bits;
  j["activation_bits"] = spec.activation_bits;
  if (spec.clip_ratio_weights) {
    j["clip_ratio_weights"] = *spec.clip_ratio_weights;
  } else {
    j["clip_ratio_weights"] = "search";
  }
  j["clip_ratio_activations"] = spec.clip_ratio_activations;
  return j;
}

QuantSpec quant_spec_from_json(const ordered_json& j) {
  QuantSpec s;
  s.weight_bits = get<int>(j, "weight_bits", "quant_spec");
  s.activation_bits = get<int>(j, "activation_bits", "quant_spec");
  const ordered_json& clip = field(j, "clip_ratio_weights", "quant_spec");
  if (clip.is_number()) s.clip_ratio_weights = clip.get<double>();
  s.clip_ratio_activations = get<double>(j, "clip_ratio_activations", "quant_spec");
  try {
    s.validate();
  } catch (const Error& e) {
    throw format_error("invalid_quant_spec", std::string("quant_spec: ") + e.what());
  }
  return s;
}

void save_compressed(const fs::path& dir, const CompressedModel& model, const ordered_json& extra_meta) {
  const std::size_t e = model.config.embed_dim;
  if (model.layers.size() != model.config.num_layers || model.w_o.size() != model.config.num_layers) {
    throw usage_error("shape_mismatch", "save_compressed: layer count does not match the config");
  }
  TensorList tensors;
  tensors.emplace_back("embed", Tensor::from_matrix(model.embed));
  tensors.emplace_back("head", Tensor::from_matrix(model.head));
  ordered_json layers = ordered_json::array();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerFactors& f = model.layers[l];
    if (f.embed_dim() != e) throw usage_error("shape_mismatch", "save_compressed: layer " + std::to_string(l) + " width");
    const std::string p = "layers." + std::to_string(l) + ".";
    tensors.emplace_back(p + "w_o", Tensor::from_matrix(model.w_o[l]));
    tensors.emplace_back(p + "u", Tensor::from_matrix(f.basis_down()));
    tensors.emplace_back(p + "sigma", Tensor::from_vector(std::vector<double>(f.sigma().begin(), f.sigma().end())));
    tensors.emplace_back(p + "vt", Tensor::from_matrix(f.basis_up()));
    tensors.emplace_back(p + "whitening", Tensor::from_vector(f.whitening().diag));

    ordered_json jl;
    jl["index"] = l;
    jl["rank"] = f.rank();
    jl["beta"] = f.beta();
    jl["full_rank"] = f.is_full_rank();
    jl["retained_indices"] = std::vector<std::size_t>(f.source_indices().begin(), f.source_indices().end());
    jl["whitening"] = whitening_kind_name(f.whitening().kind);
    jl["floored_channels"] = f.whitening().floored_channels;
    if (model.is_quantized()) {
      const QuantizedLayer& q = model.quantized[l];
      ordered_json scales = ordered_json::object();
      add_quantized(tensors, scales, p, "down", q.down);
      add_quantized(tensors, scales, p, "up_q", q.up_q);
      add_quantized(tensors, scales, p, "up_k", q.up_k);
      add_quantized(tensors, scales, p, "up_v", q.up_v);
      jl["rotation"] = {{"h1", rotation_spec_json(q.rotations.h1_spec)},
                        {"h2", rotation_spec_json(q.rotations.h2_spec)}};
      jl["scales"] = scales;
    } else {
      jl["rotation"] = nullptr;
      jl["scales"] = nullptr;
    }
    layers.push_back(jl);
  }
  write_container(dir, "compressed", config_to_json(model.config), tensors);

  ordered_json meta;
  meta["format_version"] = kFormatVersion;
  meta["config"] = config_to_json(model.config);
  meta["budget"] = model.allocation ? ordered_json(model.allocation->budget) : ordered_json(nullptr);
  meta["allocation"] = model.allocation ? to_json(*model.allocation) : ordered_json(nullptr);
  meta["quant_spec"] = model.quant_spec ? to_json(*model.quant_spec) : ordered_json(nullptr);
  meta["layers"] = layers;
  if (extra_meta.is_object()) meta["pipeline"] = extra_meta;
  ordered_json hashed;
  hashed["config"] = meta["config"];
  if (extra_meta.is_object()) hashed["pipeline"] = extra_meta;
  meta["config_hash"] = config_hash(hashed);
  write_json_file(dir / kMetaFile, meta);
}

ordered_json load_compressed_meta(const fs::path& dir) {
  if (!fs::exists(dir / kMetaFile)) throw format_error("missing_file", "missing " + (dir / kMetaFile).string());
  ordered_json meta = read_json_file(dir / kMetaFile);
  const int version = get<int>(meta, "format_version", "qsvd_meta");
  if (version != kFormatVersion) {
    throw format_error("schema_version", "qsvd_meta: unsupported format_version " + std::to_string(version));
  }
  return meta;
}

CompressedModel load_compressed(const fs::path& dir) {
  const ordered_json meta = load_compressed_meta(dir);
  Container c = read_container(dir);
  if (c.manifest.kind != "compressed") {
    throw format_error("wrong_kind", dir.string() + " holds a '" + c.manifest.kind + "' container, not a compressed model");
  }
  CompressedModel m;
  m.config = config_from_json(field(meta, "config", "qsvd_meta"));
  const std::size_t e = m.config.embed_dim;
  m.embed = need(c.tensors, "embed", {m.config.input_dim, e}).to_matrix();
  m.head = need(c.tensors, "head", {e, m.config.input_dim}).to_matrix();
  const ordered_json& qs = field(meta, "quant_spec", "qsvd_meta");
  if (!qs.is_null()) m.quant_spec = quant_spec_from_json(qs);
  const ordered_json& alloc = field(meta, "allocation", "qsvd_meta");
  if (!alloc.is_null()) m.allocation = allocation_from_json(alloc);

  const ordered_json& layers = field(meta, "layers", "qsvd_meta");
  if (!layers.is_array() || layers.size() != m.config.num_layers) {
    throw format_error("schema_version", "qsvd_meta: 'layers' must list every layer");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ordered_json& jl = layers[l];
    const std::string where = "qsvd_meta layer " + std::to_string(l);
    const auto r = get<std::size_t>(jl, "rank", where);
    const auto beta = get<double>(jl, "beta", where);
    const auto retained = get<std::vector<std::size_t>>(jl, "retained_indices", where);
    const std::string p = "layers." + std::to_string(l) + ".";
    WhiteningTransform w;
    try {
      w.kind = parse_whitening_kind(get<std::string>(jl, "whitening", where));
    } catch (const Error& err) {
      if (err.kind() == ErrorKind::kFormat) throw;
      throw format_error("schema_version", where + ": " + err.what());
    }
    w.diag = need(c.tensors, p + "whitening", {e}).values;
    w.floored_channels = get<std::vector<std::size_t>>(jl, "floored_channels", where);
    m.w_o.push_back(need(c.tensors, p + "w_o", {e, e}).to_matrix());
    try {
      m.layers.emplace_back(need(c.tensors, p + "u", {e, r}).to_matrix(), need(c.tensors, p + "sigma", {r}).values,
                            need(c.tensors, p + "vt", {r, 3 * e}).to_matrix(), beta, std::move(w), retained);
    } catch (const Error& err) {
      if (err.kind() == ErrorKind::kFormat) throw;
      throw format_error("shape_inconsistent", where + ": " + err.what());
    }
    if (get<bool>(jl, "full_rank", where) != m.layers.back().is_full_rank()) {
      throw format_error("shape_inconsistent", where + ": full_rank flag disagrees with the stored rank");
    }
  }
  if (m.quant_spec) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string where = "qsvd_meta layer " + std::to_string(l);
      const ordered_json& rot = field(layers[l], "rotation", where);
      const RotationPair pair = RotationPair::from_specs(rotation_spec_from(field(rot, "h1", where), where + " h1"),
                                                         rotation_spec_from(field(rot, "h2", where), where + " h2"));
      QuantizedLayer q = quantize_layer(m.layers[l], pair, *m.quant_spec, m.layers[l].beta());
      const std::string p = "layers." + std::to_string(l) + ".";
      for (auto [role, t] : {std::pair{"down", &q.down}, {"up_q", &q.up_q}, {"up_k", &q.up_k}, {"up_v", &q.up_v}})
        load_quantized(c.tensors, layers[l], where, p, role, *t);
      m.quantized.push_back(std::move(q));
    }
  }
  return m;
}

// --- reports ---

ordered_json to_json(const ImportanceTable& table) {
  ordered_json j;
  j["method"] = score_method_name(table.method);
  j["num_samples"] = table.num_samples;
  j["embed_dim"] = table.embed_dim;
  j["layer_ranks"] = table.layer_ranks;
  j["entries"] = ordered_json::array();
  for (const auto& e : table.entries) {
    j["entries"].push_back({{"layer", e.layer}, {"sv_index", e.sv_index}, {"sigma", e.sigma}, {"score", e.score}});
  }
  return j;
}

ImportanceTable importance_table_from_json(const ordered_json& j) {
  ImportanceTable t;
  try {
    t.method = parse_score_method(get<std::string>(j, "method", "scores"));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFormat) throw;
    throw format_error("schema_version", std::string("scores: ") + e.what());
  }
  t.num_samples = get<std::size_t>(j, "num_samples", "scores");
  t.embed_dim = get<std::size_t>(j, "embed_dim", "scores");
  t.layer_ranks = get<std::vector<std::size_t>>(j, "layer_ranks", "scores");
  for (const auto& je : field(j, "entries", "scores")) {
    ImportanceEntry e;
    e.layer = get<std::size_t>(je, "layer", "scores entry");
    e.sv_index = get<std::size_t>(je, "sv_index", "scores entry");
    e.sigma = get<double>(je, "sigma", "scores entry");
    e.score = get<double>(je, "score", "scores entry");
    if (e.layer >= t.layer_ranks.size() || e.sv_index >= t.layer_ranks[e.layer]) {
      throw format_error("shape_inconsistent", "scores: entry (" + std::to_string(e.layer) + ", " +
                                                   std::to_string(e.sv_index) + ") is outside the layer ranks");
    }
    t.entries.push_back(e);
  }
  return t;
}

ordered_json to_json(const RankAllocation& a) {
  ordered_json j;
  j["budget"] = a.budget;
  j["effective_budget"] = a.effective_budget;
  j["per_layer_rank"] = a.per_layer_rank;
  j["floor_bound_layers"] = a.floor_bound_layers;
  j["retained"] = ordered_json::array();
  for (const auto& r : a.retained) j["retained"].push_back({r.layer, r.sv_index});
  return j;
}

RankAllocation allocation_from_json(const ordered_json& j) {
  RankAllocation a;
  a.budget = get<std::size_t>(j, "budget", "allocation");
  a.effective_budget = get<std::size_t>(j, "effective_budget", "allocation");
  a.per_layer_rank = get<std::vector<std::size_t>>(j, "per_layer_rank", "allocation");
  a.floor_bound_layers = get<std::vector<std::size_t>>(j, "floor_bound_layers", "allocation");
  for (const auto& jr : field(j, "retained", "allocation")) {
    if (!jr.is_array() || jr.size() != 2) throw format_error("schema_version", "allocation: retained pairs are [layer, sv]");
    a.retained.push_back({jr[0].get<std::size_t>(), jr[1].get<std::size_t>()});
  }
  std::vector<std::size_t> counts(a.per_layer_rank.size(), 0);
  for (const auto& r : a.retained) {
    if (r.layer >= counts.size()) throw format_error("shape_inconsistent", "allocation: retained layer out of range");
    ++counts[r.layer];
  }
  if (counts != a.per_layer_rank || !std::is_sorted(a.retained.begin(), a.retained.end())) {
    throw format_error("shape_inconsistent", "allocation: retained set disagrees with per_layer_rank");
  }
  return a;
}

ordered_json to_json(const EvalReport& r) {
  ordered_json j;
  j["variant"] = r.variant;
  j["scheme"] = r.scheme;
  j["weight_bits"] = r.weight_bits;
  j["activation_bits"] = r.activation_bits;
  j["num_samples"] = r.num_samples;
  j["seq_len"] = r.seq_len;
  j["loss"] = r.loss;
  j["output_mse"] = r.output_mse;
  j["ranks"] = r.ranks;
  j["cache_elements"] = r.cache_elements;
  j["cache_bytes"] = r.cache_bytes;
  j["r1"] = r.r1;
  j["r2"] = r.r2;
  return j;
}

EvalReport eval_report_from_json(const ordered_json& j) {
  EvalReport r;
  r.variant = get<std::string>(j, "variant", "eval");
  r.scheme = get<std::string>(j, "scheme", "eval");
  r.weight_bits = get<int>(j, "weight_bits", "eval");
  r.activation_bits = get<int>(j, "activation_bits", "eval");
  r.num_samples = get<std::size_t>(j, "num_samples", "eval");
  r.seq_len = get<std::size_t>(j, "seq_len", "eval");
  r.loss = get<double>(j, "loss", "eval");
  r.output_mse = get<double>(j, "output_mse", "eval");
  r.ranks = get<std::vector<std::size_t>>(j, "ranks", "eval");
  r.cache_elements = get<std::vector<std::uint64_t>>(j, "cache_elements", "eval");
  r.cache_bytes = get<std::vector<std::uint64_t>>(j, "cache_bytes", "eval");
  r.r1 = get<double>(j, "r1", "eval");
  r.r2 = get<double>(j, "r2", "eval");
  return r;
}

namespace {

ordered_json cost_json(const LayerCost& c) { return {{"alpha", c.alpha}, {"eta", c.eta}, {"gamma", c.gamma}}; }

LayerCost cost_from(const ordered_json& j) {
  return {get<std::uint64_t>(j, "alpha", "cost"), get<std::uint64_t>(j, "eta", "cost"),
          get<std::uint64_t>(j, "gamma", "cost")};
}

}  // namespace

ordered_json to_json(const CostReport& r) {
  ordered_json j;
  j["scheme"] = scheme_name(r.scheme);
  j["embed_dim"] = r.embed_dim;
  j["seq_len"] = r.seq_len;
  j["ranks"] = r.ranks;
  j["per_layer"] = ordered_json::array();
  for (const auto& c : r.per_layer) j["per_layer"].push_back(cost_json(c));
  j["total"] = cost_json(r.total);
  j["r1"] = r.r1;
  j["r2"] = r.r2;
  j["r1_from_gamma"] = r.r1_from_gamma;
  return j;
}

CostReport cost_report_from_json(const ordered_json& j) {
  CostReport r;
  const auto name = get<std::string>(j, "scheme", "cost");
  bool known = false;
  for (Scheme s : {Scheme::kDense, Scheme::kPerMatrixSvd, Scheme::kJointSvd}) {
    if (name == scheme_name(s)) {
      r.scheme = s;
      known = true;
    }
  }
  if (!known) throw format_error("schema_version", "cost: unknown scheme '" + name + "'");
  r.embed_dim = get<std::size_t>(j, "embed_dim", "cost");
  r.seq_len = get<std::size_t>(j, "seq_len", "cost");
  r.ranks = get<std::vector<std::size_t>>(j, "ranks", "cost");
  for (const auto& c : field(j, "per_layer", "cost")) r.per_layer.push_back(cost_from(c));
  r.total = cost_from(field(j, "total", "cost"));
  r.r1 = get<double>(j, "r1", "cost");
  r.r2 = get<double>(j, "r2", "cost");
  r.r1_from_gamma = get<double>(j, "r1_from_gamma", "cost");
  return r;
}

std::string config_hash(const ordered_json& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

std::string read_text_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

ordered_json read_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw format_error("json_parse", path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  const std::string text = j.dump(2) + "\n";
  write_bytes(path, text.data(), text.size());
}

}  // namespace qsvd
