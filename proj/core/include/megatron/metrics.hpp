#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "megatron/image.hpp"
#include "megatron/trigger.hpp"
#include "megatron/vit.hpp"

namespace megatron::metrics {

/// Batched argmax classifier. Any model (or test double) plugs in here.
using Predictor = std::function<std::vector<int>(std::span<const Image* const>)>;

/// The predictor holds its own copy of the model.
Predictor predictor_for(const vit::Model& model);

/// Fraction of samples whose prediction equals their label.
double cda(const Predictor& model, const Dataset& clean_set);

/// Fraction of patched source samples predicted as `target_label`.
double sasr(const Predictor& model, const Dataset& source_set, const trigger::SubTrigger& sub,
            PixelPoint location, int target_label);

/// Fraction of unpatched source samples still predicted as their own label.
double scda(const Predictor& model, const Dataset& source_set);

/// Fraction of images predicted as `label`.
double rate_of(const Predictor& model, std::span<const Image* const> images, int label);

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap.
double psnr(const Image& a, const Image& b, double peak = 1.0);

struct SsimConfig {
  int window = 8;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;

  double c3() const noexcept { return c2 / 2.0; }
  void validate() const;
};

/// Mean over every window position and channel of l^alpha c^beta s^gamma,
/// with population moments. Negative structure terms keep their sign.
double ssim(const Image& a, const Image& b, const SsimConfig& cfg = {});

/// Mean absolute difference.
double l1_distance(const Image& a, const Image& b);

/// External perceptual metric. Returning nullopt or throwing marks the
/// metric unavailable for that pair.
using PerceptualProvider = std::function<std::optional<double>(const Image&, const Image&)>;

std::optional<double> lpips(const Image& a, const Image& b, const PerceptualProvider& provider);

struct ShiftResult {
  int dx = 0;  // tokens
  int dy = 0;
  double sasr = 0.0;
  friend bool operator==(const ShiftResult&, const ShiftResult&) = default;
};

struct DefenseResult {
  double drop_rate = 0.0;
  bool shuffle = false;
  double cda = 0.0;
  double sasr = 0.0;
  double baseline_sasr = 0.0;
  friend bool operator==(const DefenseResult&, const DefenseResult&) = default;
};

struct AttackReport {
  int schema_version = 1;
  double cda = 0.0;
  double sasr = 0.0;
  double scda = 0.0;
  double baseline_cda = 0.0;
  double baseline_sasr = 0.0;
  double baseline_scda = 0.0;
  /// Surrogate accuracy and SASR, recorded for diagnosis.
  double surrogate_cda = 0.0;
  double surrogate_sasr = 0.0;
  std::vector<double> sasr_per_sub_trigger;
  std::vector<double> baseline_sasr_per_sub_trigger;
  int sub_trigger_index = 0;
  int poison_count = 0;
  double psnr_mean = 0.0;
  double psnr_min = 0.0;
  double ssim_mean = 0.0;
  double l1_mean = 0.0;
  double linf_max = 0.0;
  std::optional<double> lpips_mean;
  std::vector<ShiftResult> shifts;
  std::optional<DefenseResult> defense;
  double trigger_final_loss = 0.0;
  int trigger_iterations = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;

  friend bool operator==(const AttackReport&, const AttackReport&) = default;
};

nlohmann::json to_json(const AttackReport& r);
AttackReport report_from_json(const nlohmann::json& j);

/// Every numeric field pair within `tol`; config and counts compared exactly.
bool reports_close(const AttackReport& a, const AttackReport& b, double tol,
                   std::string* first_difference = nullptr);

}  // namespace megatron::metrics
