#include "nemf/config.hpp"

#include <cctype>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "nemf/error.hpp"

namespace nemf {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> kDefaults = {
      // run
      {"seed", "1"},
      {"threads", "1"},
      // model
      {"pe_octaves", "10"},
      {"channels", "16"},
      {"hidden", "256"},
      {"blocks", "3"},
      {"grid_rows", "16"},
      {"grid_cols", "16"},
      {"conv_channels", "4"},
      {"heads", "4"},
      {"ffn_hidden", "32"},
      {"descriptor_dim", "32"},
      {"patch_size", "8"},
      {"boundary", "clamp"},
      // training
      {"steps", "500"},
      {"learning_rate", "3e-5"},
      {"weight_decay", "0.01"},
      {"tau", "0.07"},
      {"samples", "50"},
      {"lambda_f", "1"},
      {"lambda_c", "1"},
      {"tau_softargmax", "0.02"},
      {"bidirectional", "true"},
      {"classification_form", "softmax"},
      {"checkpoint_every", "0"},
      // inference
      {"strategy", "patchmatch"},
      {"rounds", "10"},
      {"step_size", "3e-4"},
      {"coordinate_steps", "10"},
      {"random_candidates", "4"},
      {"neighborhood", "8"},
      {"batch_size", "4096"},
      {"coordinate_optimization", "true"},
      {"keypoints_only", "false"},
      {"lattice", "0"},
      // data
      {"synthetic_rows", "32"},
      {"synthetic_cols", "32"},
      {"synthetic_keypoints", "10"},
      {"warp", "translation"},
      {"max_shift", "4"},
      // evaluation and export
      {"pck_normalization", "bbox"},
      {"smoothing_radius", "0"},
  };
  return kDefaults;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorCode::kConfig, "config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config::Config() : values_(defaults()) {}

void Config::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw Error(ErrorCode::kConfig, "unknown config key '" + key + "'");
  values_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::kConfig, "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot read config file " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      apply_override(t);
    } catch (const Error& e) {
      throw Error(ErrorCode::kConfig, path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::kConfig, "unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t Config::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

double Config::get_double(const std::string& key) const {
  const std::string& v = get(key);
  if (v.empty() || std::isspace(static_cast<unsigned char>(v[0]))) bad_value(key, v, "a number");
  // strtod rather than stod: subnormal values such as 1e-310 are legal inputs.
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || (errno == ERANGE && std::isinf(out))) bad_value(key, v, "a number");
  return out;
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::string Config::dump() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
  return os.str();
}

void Config::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "# effective configuration\n" << dump();
}

ModelConfig Config::model() const {
  ModelConfig m;
  m.field.encoder.octaves = get_size("pe_octaves");
  m.field.channels = get_size("channels");
  m.field.hidden = get_size("hidden");
  m.field.blocks = get_size("blocks");
  m.embedder.src_rows = m.embedder.tgt_rows = get_size("grid_rows");
  m.embedder.src_cols = m.embedder.tgt_cols = get_size("grid_cols");
  m.embedder.channels = m.field.channels;
  m.embedder.conv_channels = get_size("conv_channels");
  m.embedder.heads = get_size("heads");
  m.embedder.ffn_hidden = get_size("ffn_hidden");
  m.extractor.grid_rows = m.embedder.src_rows;
  m.extractor.grid_cols = m.embedder.src_cols;
  m.extractor.descriptor_dim = get_size("descriptor_dim");
  m.extractor.patch_size = get_size("patch_size");
  const std::string& boundary = get("boundary");
  if (boundary == "clamp") {
    m.extractor.boundary = BoundaryMode::kClamp;
  } else if (boundary == "wrap") {
    m.extractor.boundary = BoundaryMode::kWrap;
  } else {
    bad_value("boundary", boundary, "clamp or wrap");
  }
  if (m.field.hidden == 0 || m.field.channels == 0 || m.embedder.src_rows == 0 || m.embedder.src_cols == 0) {
    throw Error(ErrorCode::kConfig, "model sizes must be positive");
  }
  if (m.field.channels % m.embedder.heads != 0) {
    throw Error(ErrorCode::kConfig, "channels must be a multiple of heads");
  }
  return m;
}

LossConfig Config::loss() const {
  LossConfig l;
  l.lambda_f = get_double("lambda_f");
  l.lambda_c = get_double("lambda_c");
  l.tau = get_double("tau");
  l.samples = get_size("samples");
  l.learning_rate = get_double("learning_rate");
  l.weight_decay = get_double("weight_decay");
  l.steps = get_size("steps");
  l.seed = get_u64("seed");
  l.bidirectional = get_bool("bidirectional");
  l.tau_softargmax = get_double("tau_softargmax");
  const std::string& form = get("classification_form");
  if (form == "softmax") {
    l.form = ClassificationForm::kSoftmax;
  } else if (form == "literal") {
    l.form = ClassificationForm::kLiteral;
  } else {
    bad_value("classification_form", form, "softmax or literal");
  }
  l.checkpoint_every = get_size("checkpoint_every");
  validate(l);
  return l;
}

InferenceConfig Config::inference() const {
  InferenceConfig c;
  c.rounds = get_size("rounds");
  c.step_size = get_double("step_size");
  c.coordinate_steps = get_size("coordinate_steps");
  c.random_candidates = get_size("random_candidates");
  const std::size_t n = get_size("neighborhood");
  if (n == 4) {
    c.neighborhood = Neighborhood::kFour;
  } else if (n == 8) {
    c.neighborhood = Neighborhood::kEight;
  } else {
    bad_value("neighborhood", get("neighborhood"), "4 or 8");
  }
  c.batch_size = get_size("batch_size");
  c.coordinate_optimization = get_bool("coordinate_optimization");
  c.keypoints_only = get_bool("keypoints_only");
  c.seed = get_u64("seed");
  validate(c);
  return c;
}

SyntheticConfig Config::synthetic() const {
  SyntheticConfig s;
  s.rows = get_size("synthetic_rows");
  s.cols = get_size("synthetic_cols");
  s.keypoints = get_size("synthetic_keypoints");
  s.max_shift = get_double("max_shift");
  if (s.rows < kMinImageExtent || s.cols < kMinImageExtent) {
    throw Error(ErrorCode::kConfig, "synthetic images must be at least 16 pixels on a side");
  }
  return s;
}

PckNormalization Config::pck_normalization() const {
  const std::string& v = get("pck_normalization");
  if (v == "bbox") return PckNormalization::kBoundingBox;
  if (v == "img") return PckNormalization::kImage;
  bad_value("pck_normalization", v, "bbox or img");
}

}  // namespace nemf
