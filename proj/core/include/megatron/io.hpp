#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "megatron/image.hpp"
#include "megatron/poison.hpp"
#include "megatron/rollout.hpp"
#include "megatron/trigger.hpp"
#include "megatron/vit.hpp"

namespace megatron::io {

namespace fs = std::filesystem;

/// 8-bit PNG, grey for one channel and RGB for three. Values are rounded to
/// the nearest level, so images on the 8-bit grid round-trip exactly.
void write_png(const fs::path& path, const Image& image);
Image read_png(const fs::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: magic, format version, config as JSON, then every
/// tensor by name with its shape and raw little-endian doubles.
void save_checkpoint(const fs::path& path, const vit::Model& model);
vit::Model load_checkpoint(const fs::path& path);

nlohmann::json model_config_to_json(const vit::ModelConfig& c);
vit::ModelConfig model_config_from_json(const nlohmann::json& j);

std::string sha256_hex(std::string_view bytes);
/// Throws ArtifactError naming the file when it cannot be read.
std::string sha256_file(const fs::path& path);

std::string read_text(const fs::path& path);
/// Write via a temporary file and rename.
void write_text(const fs::path& path, std::string_view text);
/// Indented JSON with sorted keys and a trailing newline.
void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

/// Score grid (patch tokens only) as a whitespace-separated text matrix.
void write_score_grid(const fs::path& path, const rollout::ImportanceScores& scores);
/// Min-max normalised grey heatmap, each token drawn as a `cell` pixel square.
void write_score_heatmap(const fs::path& path, const rollout::ImportanceScores& scores,
                         int cell = 8);

/// Trigger artifact: `<stem>.png` pattern plus `<stem>.json` sidecar.
struct TriggerArtifact {
  trigger::Trigger trigger;
  nlohmann::json meta;  // location, gamma, K, phi_a, phi_d, final_loss, seed, ...
};
void save_trigger(const fs::path& stem, const trigger::Trigger& t, const nlohmann::json& meta);
TriggerArtifact load_trigger(const fs::path& stem);

/// Dataset directory: images/<index>.png plus manifest.jsonl with one line
/// per sample in order (id, file, label, is_poisoned, record fields).
void save_dataset_dir(const fs::path& dir, const Dataset& samples,
                      const std::vector<std::size_t>& positions = {},
                      const std::vector<poison::PoisonRecord>& records = {});

struct LoadedDataset {
  Dataset samples;
  std::vector<std::size_t> positions;
  std::vector<poison::PoisonRecord> records;
};
LoadedDataset load_dataset_dir(const fs::path& dir);

/// Append-only stage log with wall-clock offsets.
class StageLog {
 public:
  StageLog() = default;
  StageLog(const fs::path& path, bool echo);
  void line(const std::string& text);

 private:
  std::ofstream out_;
  bool echo_ = false;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace megatron::io
