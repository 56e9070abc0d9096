#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "nemf/eval_data.hpp"
#include "nemf/field_model.hpp"
#include "nemf/inference.hpp"
#include "nemf/training.hpp"

namespace nemf {

// Flat key=value configuration over a fixed key set. Unknown keys and
// unparsable values raise ErrorCode::kConfig.
class Config {
 public:
  Config();  // every key at its default

  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply_override(const std::string& assignment);
  // One assignment per line; blank lines and '#' comments are skipped.
  void load_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Every key, sorted, one "key=value" per line.
  std::string dump() const;
  void write(const std::filesystem::path& path) const;

  ModelConfig model() const;
  LossConfig loss() const;
  InferenceConfig inference() const;
  SyntheticConfig synthetic() const;
  PckNormalization pck_normalization() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace nemf
