// NMFW weight files:
//   "NMFW" | u16 version | u16 n_config | n_config x (u8 len, key, u64 value)
//   | u32 n_tensors | n_tensors x (u16 len, name, u8 rank, rank x u32 dim, float32 payload)
//   | u32 crc32 of every preceding byte
// All integers little-endian. A "<path>.cfg" sidecar echoes the config as key=value text.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "nemf/error.hpp"
#include "nemf/field_model.hpp"

namespace nemf {

namespace {

constexpr char kMagic[] = "NMFW";

using ConfigMap = std::vector<std::pair<std::string, std::uint64_t>>;

ConfigMap config_entries(const FieldConfig& f, const EmbedderConfig& e, const ExtractorConfig& x) {
  return {
      {"pe_octaves", f.encoder.octaves},
      {"channels", f.channels},
      {"hidden", f.hidden},
      {"blocks", f.blocks},
      {"grid_src_rows", e.src_rows},
      {"grid_src_cols", e.src_cols},
      {"grid_tgt_rows", e.tgt_rows},
      {"grid_tgt_cols", e.tgt_cols},
      {"conv_channels", e.conv_channels},
      {"heads", e.heads},
      {"ffn_hidden", e.ffn_hidden},
      {"descriptor_dim", x.descriptor_dim},
      {"patch_size", x.patch_size},
      {"projection_seed", x.projection_seed},
      {"boundary_wrap", x.boundary == BoundaryMode::kWrap ? 1u : 0u},
  };
}

ModelConfig config_from_entries(const std::map<std::string, std::uint64_t>& m, const std::string& name) {
  auto get = [&](const char* key) -> std::uint64_t {
    auto it = m.find(key);
    if (it == m.end()) throw Error(ErrorCode::kCorrupt, name + ": config block lacks '" + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.field.encoder.octaves = get("pe_octaves");
  c.field.channels = get("channels");
  c.field.hidden = get("hidden");
  c.field.blocks = get("blocks");
  c.embedder.src_rows = get("grid_src_rows");
  c.embedder.src_cols = get("grid_src_cols");
  c.embedder.tgt_rows = get("grid_tgt_rows");
  c.embedder.tgt_cols = get("grid_tgt_cols");
  c.embedder.channels = c.field.channels;
  c.embedder.conv_channels = get("conv_channels");
  c.embedder.heads = get("heads");
  c.embedder.ffn_hidden = get("ffn_hidden");
  c.extractor.grid_rows = c.embedder.src_rows;
  c.extractor.grid_cols = c.embedder.src_cols;
  c.extractor.descriptor_dim = get("descriptor_dim");
  c.extractor.patch_size = get("patch_size");
  c.extractor.projection_seed = get("projection_seed");
  c.extractor.boundary = get("boundary_wrap") ? BoundaryMode::kWrap : BoundaryMode::kClamp;
  return c;
}

std::vector<std::pair<std::string, Shape>> full_layout(const ModelConfig& c) {
  auto out = FieldModel::layout(c.field);
  auto emb = EmbedderParams::layout(c.embedder);
  out.insert(out.end(), emb.begin(), emb.end());
  return out;
}

std::string sidecar_text(const ConfigMap& entries, std::size_t field_params, std::size_t embed_params) {
  std::ostringstream os;
  os << "# nemf weight file configuration\n";
  os << "format_version=" << kWeightFormatVersion << "\n";
  for (const auto& [k, v] : entries) os << k << "=" << v << "\n";
  os << "field_parameters=" << field_params << "\n";
  os << "embedder_parameters=" << embed_params << "\n";
  return os.str();
}

}  // namespace

void save_model(const std::filesystem::path& path, const FieldModel& field, const EmbedderParams& embedder,
                const ExtractorConfig& extractor) {
  if (field.config.channels != embedder.config.channels) {
    throw Error(ErrorCode::kShape, "save_model: field and embedder disagree on the channel count");
  }
  const ConfigMap entries = config_entries(field.config, embedder.config, extractor);
  io::ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u16(kWeightFormatVersion);
  w.u16(static_cast<std::uint16_t>(entries.size()));
  for (const auto& [key, value] : entries) {
    w.u8(static_cast<std::uint8_t>(key.size()));
    w.bytes(key);
    w.u32(static_cast<std::uint32_t>(value & 0xffffffffu));
    w.u32(static_cast<std::uint32_t>(value >> 32));
  }
  auto tensors = field.parameters();
  for (auto& t : embedder.parameters()) tensors.push_back(t);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(tensor.rank()));
    for (auto d : tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) w.f32(static_cast<float>(v));
  }
  auto& buf = w.buffer();
  const uLong crc = crc32(0L, buf.data(), static_cast<uInt>(buf.size()));
  w.u32(static_cast<std::uint32_t>(crc));
  io::write_file(path, buf);

  std::ofstream side(path.string() + ".cfg");
  if (!side) throw Error(ErrorCode::kIo, "cannot write " + path.string() + ".cfg");
  side << sidecar_text(entries, field.parameter_count(), embedder.parameter_count());
}

ModelBundle load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  const auto bytes = io::read_file(path);
  const std::string name = path.string();
  if (bytes.size() < 4 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != kMagic) {
    throw Error(ErrorCode::kBadMagic, name + ": not an NMFW weight file");
  }
  if (bytes.size() < 6 + 4) throw Error(ErrorCode::kCorrupt, name + ": file truncated");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kWeightFormatVersion) {
    throw Error(ErrorCode::kUnsupportedVersion,
                name + ": unsupported weight format version " + std::to_string(version));
  }
  const std::size_t body = bytes.size() - 4;
  const uLong crc = crc32(0L, bytes.data(), static_cast<uInt>(body));
  io::ByteReader tail(bytes.data() + body, 4, name);
  if (tail.u32() != static_cast<std::uint32_t>(crc)) {
    throw Error(ErrorCode::kCorrupt, name + ": checksum mismatch (file truncated or damaged)");
  }

  io::ByteReader r(bytes.data(), body, name);
  r.bytes(4);
  r.u16();
  std::map<std::string, std::uint64_t> entries;
  const std::uint16_t n_config = r.u16();
  for (std::uint16_t i = 0; i < n_config; ++i) {
    const std::string key = r.bytes(r.u8());
    const std::uint64_t lo = r.u32();
    const std::uint64_t hi = r.u32();
    entries[key] = lo | (hi << 32);
  }
  const ModelConfig stored = config_from_entries(entries, name);
  const auto stored_layout = full_layout(stored);
  const auto check_layout = expected ? full_layout(*expected) : stored_layout;

  const std::uint32_t n_tensors = r.u32();
  if (n_tensors != check_layout.size()) {
    std::ostringstream os;
    os << name << ": file holds " << n_tensors << " tensors, configuration expects " << check_layout.size();
    throw Error(ErrorCode::kShapeMismatch, os.str());
  }
  std::vector<std::vector<double>> payloads;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string tname = r.bytes(r.u16());
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const auto& [want_name, want_shape] = check_layout[i];
    if (tname != want_name || shape != want_shape) {
      std::ostringstream os;
      os << name << ": tensor '" << tname << "' has shape " << shape_str(shape) << " but '" << want_name
         << "' expects " << shape_str(want_shape);
      throw Error(ErrorCode::kShapeMismatch, os.str());
    }
    if (shape != stored_layout[i].second) {
      throw Error(ErrorCode::kCorrupt, name + ": tensor '" + tname + "' disagrees with the stored config");
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      v = r.f32();
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, name + ": non-finite weight in '" + tname + "'");
    }
    payloads.push_back(std::move(values));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorrupt, name + ": trailing bytes after tensor table");

  ModelBundle bundle;
  bundle.field = FieldModel::initialize(stored.field, 0);
  bundle.embedder = EmbedderParams::initialize(stored.embedder, 0);
  bundle.extractor = stored.extractor;
  auto params = bundle.field.parameters();
  for (auto& t : bundle.embedder.parameters()) params.push_back(t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_values();
    std::copy(payloads[i].begin(), payloads[i].end(), dst.begin());
  }
  return bundle;
}

std::string describe_model(const ModelBundle& b) {
  return sidecar_text(config_entries(b.field.config, b.embedder.config, b.extractor), b.field.parameter_count(),
                      b.embedder.parameter_count());
}

}  // namespace nemf
