#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "megatron/config.hpp"
#include "megatron/errors.hpp"
#include "megatron/io.hpp"
#include "megatron/metrics.hpp"
#include "megatron/poison.hpp"
#include "megatron/trigger.hpp"
#include "megatron/vit.hpp"

namespace megatron::harness {

namespace fs = std::filesystem;

/// Error raised by a pipeline stage; `what()` is prefixed with the stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Load (or generate) the train/test splits named by the dataset spec.
DataSplits load_data(const config::ExperimentConfig& cfg);

/// The attacker's clean pool: the full training set, or a seeded half of
/// it when the attacker pool is disjoint.
Dataset attacker_pool(const config::ExperimentConfig& cfg, const Dataset& train);

vit::Model train_surrogate(const config::ExperimentConfig& cfg, const Dataset& attacker_data,
                           const vit::EpochObserver& observer = {});

trigger::Trigger gen_trigger(const config::ExperimentConfig& cfg, const vit::Model& surrogate,
                             const Dataset& attacker_data);

std::vector<trigger::SubTrigger> sub_triggers(const config::ExperimentConfig& cfg,
                                              const trigger::Trigger& t);

poison::PoisonedDataset craft_poisons(const config::ExperimentConfig& cfg,
                                      const vit::Model& surrogate, const trigger::Trigger& t,
                                      const Dataset& train, int jobs = 1);

/// The benign trainer. It sees a dataset and its own configuration only.
vit::Model train_victim(const config::ModelStage& stage, const Dataset& training_set,
                        const vit::EpochObserver& observer = {});

/// SASR with the sub-trigger displaced by whole-token offsets.
std::vector<metrics::ShiftResult> shift_evaluation(const metrics::Predictor& victim,
                                                   const Dataset& source_set,
                                                   const trigger::SubTrigger& sub,
                                                   PixelPoint base_location,
                                                   const std::vector<std::pair<int, int>>& shifts,
                                                   int patch_size, int target_label);

/// Zero round(drop_rate * n) random patch regions and, when `shuffle`,
/// permute the surviving patches among their positions.
Image patch_defense_probe(const Image& image, int patch_size, double drop_rate, bool shuffle,
                          std::uint64_t seed);

struct EvaluationInputs {
  const vit::Model* victim = nullptr;
  const vit::Model* baseline = nullptr;
  const vit::Model* surrogate = nullptr;  // optional, attacker-side diagnostics
  const trigger::Trigger* trigger = nullptr;
  const Dataset* clean_train = nullptr;
  const poison::PoisonedDataset* poisoned = nullptr;
  const Dataset* test = nullptr;
};

metrics::AttackReport evaluate(const config::ExperimentConfig& cfg, const EvaluationInputs& in);

/// In-memory end-to-end run: surrogate, trigger, poisons, victim and clean
/// baseline, evaluation.
metrics::AttackReport run_experiment(const config::ExperimentConfig& cfg, int jobs = 1,
                                     io::StageLog* log = nullptr);

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// Layout of a run directory.
struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path surrogate() const { return root / "surrogate.ckpt"; }
  fs::path trigger_stem() const { return root / "trigger"; }
  fs::path trigger_png() const { return root / "trigger.png"; }
  fs::path trigger_meta() const { return root / "trigger.json"; }
  fs::path scores_txt() const { return root / "trigger_scores.txt"; }
  fs::path scores_png() const { return root / "trigger_scores.png"; }
  fs::path poisoned_dir() const { return root / "poisoned"; }
  fs::path poisoned_manifest() const { return root / "poisoned" / "manifest.jsonl"; }
  fs::path victim() const { return root / "victim.ckpt"; }
  fs::path baseline() const { return root / "baseline.ckpt"; }
  fs::path report() const { return root / "report.json"; }
  fs::path stage_manifest(const std::string& stage) const { return root / "stages" / (stage + ".json"); }
  fs::path log(const std::string& stage) const { return root / "logs" / (stage + ".log"); }
};

struct StageOptions {
  fs::path out;
  int jobs = 1;
  bool force = false;
  bool echo = true;  // mirror stage logs to stderr
};

/// Stage drivers over a run directory. Every stage checks the hashes its
/// upstream stages recorded, writes its artifacts, and records its inputs'
/// and outputs' hashes in stages/<name>.json. Missing or corrupt inputs
/// raise ArtifactError, existing outputs without `force` OverwriteError.
fs::path stage_train_surrogate(const config::ExperimentConfig& cfg, const StageOptions& opt);
fs::path stage_gen_trigger(const config::ExperimentConfig& cfg, const StageOptions& opt);
fs::path stage_poison(const config::ExperimentConfig& cfg, const StageOptions& opt);
fs::path stage_train_victim(const config::ExperimentConfig& cfg, const StageOptions& opt);
fs::path stage_evaluate(const config::ExperimentConfig& cfg, const StageOptions& opt);

/// Every stage in order into an empty (or forced) directory.
fs::path run_all(const config::ExperimentConfig& cfg, const StageOptions& opt);

}  // namespace megatron::harness
