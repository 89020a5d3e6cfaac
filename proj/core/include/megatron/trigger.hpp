#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "megatron/image.hpp"
#include "megatron/rollout.hpp"
#include "megatron/vit.hpp"

namespace megatron::trigger {

enum class InitMode { Uniform, Zeros };
enum class PcgradMode { Standard, Literal };

struct TriggerConfig {
  int width = 8;
  int height = 8;
  PixelPoint location{12, 12};
  double gamma = 1.0;
  double lr = 1.0;
  int max_iters = 1000;
  double tau = 0.0;
  InitMode init_mode = InitMode::Uniform;
  int diffusion_radius = 0;
  PcgradMode pcgrad_mode = PcgradMode::Standard;
  rollout::ScoreNormalization score_normalization = rollout::ScoreNormalization::None;
  bool clamp_rollout = false;
  /// Blend coefficients of the masked sub-triggers.
  double phi_a = 0.5;
  double phi_d = 0.1;
  std::uint64_t seed = 0;

  PixelRect rect() const noexcept { return {location.x, location.y, width, height}; }
  /// Throws InputError when the invariants fail for images of `config`.
  void validate(const vit::ModelConfig& config) const;
};

struct LossPoint {
  double latent = 0.0;
  double diffusion = 0.0;
  double combined = 0.0;
};

struct Trigger {
  Image pattern;  // channels x height x width, values in [0,1]
  PixelPoint location;
  std::optional<double> final_loss;
  int iterations_used = 0;
  std::vector<LossPoint> history;
};

struct SubTrigger {
  Image pattern;  // channels x height x width
  Image mask;     // 1 x height x width, entries 0 or 1
  int index = 0;
  double phi_a = 0.0;
  double phi_d = 0.0;
};

/// Squared Frobenius distance between two attention matrices.
double latent_loss(const vit::Matrix& attn_patched, const vit::Matrix& attn_target);

/// Gradient combination for L_alpha and (already weighted) L_beta.
/// Non-conflicting pairs (cos >= 0, or either gradient zero) are summed.
std::vector<double> pcgrad(std::span<const double> g_alpha, std::span<const double> g_beta,
                           PcgradMode mode);
Image pcgrad(const Image& g_alpha, const Image& g_beta, PcgradMode mode);

/// The initial pattern for a config (seeded, on the 8-bit grid).
Image initial_pattern(const TriggerConfig& cfg, int channels);

/// Optimise a trigger against the surrogate. Source samples are those with
/// `source_label`, or every non-target label when it is absent.
Trigger generate_trigger(const vit::Model& surrogate, const Dataset& dataset,
                         std::optional<int> source_label, int target_label,
                         const TriggerConfig& cfg);

/// K disjoint binary masks covering a width x height trigger: contiguous
/// bands of floor(N/K) pixels in raster order, remainder in the last band.
std::vector<Image> split_masks(int width, int height, int k);

/// T_i = phi_a * M_i (.) T + phi_d * (M_T - M_i) (.) T.
SubTrigger make_sub_trigger(const Image& pattern, const Image& mask, double phi_a, double phi_d,
                            int index = 0);

/// All K sub-triggers of a pattern.
std::vector<SubTrigger> make_sub_triggers(const Image& pattern, int k, double phi_a,
                                          double phi_d);

/// clip01(image + pattern) over the rect at `location`; other pixels kept.
Image patch_pixels(const Image& image, const Image& pattern, PixelPoint location);
ImageSample patch_image(const ImageSample& sample, const SubTrigger& sub, PixelPoint location);

}  // namespace megatron::trigger
