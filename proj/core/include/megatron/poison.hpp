#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "megatron/image.hpp"
#include "megatron/trigger.hpp"
#include "megatron/vit.hpp"

namespace megatron::poison {

enum class Mode { OneToOne, AnyToOne };

struct PoisonConfig {
  double epsilon = 16.0 / 255.0;
  int steps = 100;
  double lr = 2.0;
  double tau = 0.0;
  /// Fraction of the training set replaced; `poison_count` overrides it.
  double poison_rate = 0.1;
  std::optional<int> poison_count;
  int k = 8;
  Mode mode = Mode::OneToOne;
  /// Snap poisoned pixels to the 8-bit grid so lossless PNG is bit-exact.
  bool quantize = true;
  std::uint64_t seed = 0;
  /// Worker threads for per-sample crafting; results do not depend on it.
  int jobs = 1;

  void validate() const;
  /// Q for a training set of `n` samples.
  int resolve_count(std::size_t n) const;
};

struct PoisonRecord {
  ImageSample poisoned;
  std::string target_origin;
  std::string patched_source_id;
  int sub_trigger_index = 0;
  /// Squared L2 feature distances ||f(x_p) - f(x_a)||^2.
  double initial_feature_dist = 0.0;
  double final_feature_dist = 0.0;
  double linf_used = 0.0;
  int steps_used = 0;
};

/// Clamp x into [center - eps, center + eps] intersected with [0,1].
Image project_linf(const Image& x, const Image& center, double epsilon);

/// Squared L2 distance between surrogate class-token features.
double feature_distance(const vit::Model& surrogate, const Image& a, const vit::Vector& f_target);

/// Projected gradient descent from x_t towards the features of x_a. The best
/// iterate is kept, so final_feature_dist <= initial_feature_dist.
PoisonRecord poison_sample(const vit::Model& surrogate, const ImageSample& x_t,
                           const ImageSample& x_a, const PoisonConfig& cfg,
                           int sub_trigger_index = 0);

struct PoisonedDataset {
  Dataset samples;                     // same order and ids as the clean set
  std::vector<std::size_t> positions;  // sample index of each record
  std::vector<PoisonRecord> records;
};

/// Replace Q target-label samples with poisons. Poison j pairs the j-th
/// drawn target with the j-th drawn source patched by sub-trigger j % K.
PoisonedDataset build_poisoned_dataset(const Dataset& clean, const vit::Model& surrogate,
                                       const std::vector<trigger::SubTrigger>& subs,
                                       PixelPoint location, std::optional<int> source_label,
                                       int target_label, const PoisonConfig& cfg);

}  // namespace megatron::poison
