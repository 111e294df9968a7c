#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dualprompt/evalbench.hpp"
#include "dualprompt/pretrain.hpp"

namespace dualprompt {

/// Raised for anything wrong with a run configuration. The message names the
/// offending `section.key`.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { synthetic, jodie };
enum class Command { synth, pretrain, tune_eval, ablate };

const char* to_string(Command command);

struct RunConfig {
  DataSource source = DataSource::synthetic;
  std::filesystem::path data_path;      // JODIE csv, jodie source only
  std::filesystem::path node_features;  // optional `node,f0..` sidecar
  std::size_t d_x = 16;                 // node feature width when the source has none

  SynthConfig synth;
  PretrainConfig pretrain;  // also carries the encoder dimensions
  PromptConfig prompt;
  ProtocolConfig protocol;

  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;  // defaults to <out_dir>/checkpoint.json
  bool write_embeddings = true;

  /// Global seed. A section seed set in the file wins over it.
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> synth_seed, pretrain_seed, protocol_seed;

  /// Sets the global seed and re-derives the section seeds.
  void set_seed(std::uint64_t value);

  std::filesystem::path checkpoint_path() const;

  /// Full validation; file references are checked for the given command.
  /// Throws ConfigError.
  void validate(Command command) const;

  nlohmann::json to_json() const;
};

/// Parses an INI/TOML-style key = value file with [sections]. Unknown
/// sections or keys are errors. Relative paths resolve against the config
/// file's directory.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});

}  // namespace dualprompt
