#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "megatron/dataset.hpp"
#include "megatron/poison.hpp"
#include "megatron/trigger.hpp"
#include "megatron/vit.hpp"

namespace megatron::config {

inline constexpr int kSchemaVersion = 1;

enum class AttackerPool { Identical, Disjoint };

struct DatasetSpec {
  std::string format = "synthetic";  // synthetic | cifar10-binary | image-dir
  std::string path;
  std::vector<int> classes{0, 1};
  int train_size = 2000;
  int test_size = 400;
  data::SyntheticSpec synthetic;
  AttackerPool attacker_pool = AttackerPool::Identical;
};

struct ModelStage {
  vit::ModelConfig model;
  vit::TrainConfig train;
};

struct EvaluationSpec {
  int sub_trigger_index = 0;
  /// Test-time placement; defaults to the training-time trigger location.
  std::optional<PixelPoint> location;
  /// Whole-token (dx, dy) offsets.
  std::vector<std::pair<int, int>> shifts{{0, 0}, {1, 0}, {2, 0}};
};

struct DefenseSpec {
  bool enabled = true;
  double drop_rate = 0.25;
  bool shuffle = false;
};

/// One complete experiment. Stage seeds are not configured directly; they
/// are derived from `seed` by resolve_seeds().
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  int source_label = 0;
  int target_label = 1;
  ModelStage surrogate;
  ModelStage victim;
  trigger::TriggerConfig trigger;
  poison::PoisonConfig poison;
  EvaluationSpec evaluation;
  DefenseSpec defense;

  std::optional<int> source() const {
    return poison.mode == poison::Mode::OneToOne ? std::optional<int>(source_label) : std::nullopt;
  }
  PixelPoint eval_location() const { return evaluation.location.value_or(trigger.location); }
  std::uint64_t data_seed() const;
  std::uint64_t defense_seed() const;
};

/// Set every stage seed from the global seed.
void resolve_seeds(ExperimentConfig& cfg);

/// Cross-field checks; throws ConfigError.
void validate(const ExperimentConfig& cfg);

/// Environment lookup used for ${VAR} interpolation and MEGATRON_DATA_DIR.
using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
EnvLookup process_env();

/// Strict parse: unknown keys fail with their dotted path. String values
/// are interpolated first. Missing keys take defaults.
ExperimentConfig parse(const nlohmann::json& doc, const EnvLookup& env = process_env());
ExperimentConfig load(const std::string& path, const EnvLookup& env = process_env());

/// Fully materialised document (every default written out).
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Replace ${NAME} in a string; unknown variables are a ConfigError.
std::string interpolate(const std::string& text, const EnvLookup& env);

}  // namespace megatron::config
