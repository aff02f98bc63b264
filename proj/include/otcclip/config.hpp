#pragma once

#include <stdexcept>
#include <string>

#include "otcclip/poison.hpp"
#include "otcclip/training.hpp"

namespace otcclip {

/// Raised for schema violations and inconsistent settings (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an upstream artifact is absent (CLI exit code 3).
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalSection {
  std::size_t audit_pool_size = 512;
  std::uint64_t seed = 0;  // 0 = derive from the top-level seed
};

/// Single JSON config driving the whole pipeline. Unknown keys are rejected;
/// every module default is overridable. Section seeds left at 0 derive from
/// the top-level seed, which the --seed flag overrides.
struct ExperimentConfig {
  ModelDims dims;
  double tau = 0.1;
  WorldSpec world;
  PoisonSpec poison;
  TrainConfig train;
  EvalSection eval;
  std::string output_dir = "runs";
  std::uint64_t seed = 1;

  /// Re-derives section seeds from the top-level seed and validates
  /// cross-section consistency.
  void resolve();
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON of the fully resolved config.
std::string config_canonical_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace otcclip
