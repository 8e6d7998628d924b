#pragma once

// Run configuration shared by the command-line stages. Files are TOML or JSON
// with the same structure.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "dport/pipeline.hpp"
#include "dport/synth.hpp"

namespace dport {

inline constexpr const char* kSeedEnvVar = "DPORT_SEED";

struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path model_dir = "models";
  std::filesystem::path report_dir = "reports";
  std::uint64_t seed = 0;

  SynthSpec gp = default_gp_spec();
  SynthSpec sp = default_sp_spec();
  GenericTextSpec generic;
  double test_fraction = 0.2;

  VocabOptions vocab;
  LMConfig lm;
  FinetuneConfig finetune;
  ClassifierConfig classifier;

  std::string sweep = "50:90:1";
  std::size_t bootstrap_resamples = 0;
  double alpha = 0.1;
  EerMode eer_mode = EerMode::per_subgroup;
  bool plots = true;

  /// Copies the global seed into every stage under independent streams.
  void propagate_seed();
  void validate() const;
  nlohmann::json to_json() const;
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

/// Parses a TOML document into JSON (tables become objects).
nlohmann::json parse_toml(const std::string& text, const std::string& source_name);

/// Reads TOML (default) or JSON (".json" extension) into JSON.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Builds a RunConfig from its JSON form. `seed` is required; relative paths are
/// resolved against `base_dir`. Missing required fields raise a ConfigError
/// naming the field.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                               std::optional<std::uint64_t> default_seed = std::nullopt);

RunConfig load_run_config(const std::filesystem::path& path,
                          std::optional<std::uint64_t> default_seed = std::nullopt);

/// Seed from DPORT_SEED, if set and numeric.
std::optional<std::uint64_t> seed_from_env();

}  // namespace dport
