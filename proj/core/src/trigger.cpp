#include "megatron/trigger.hpp"

#include <cmath>
#include <numeric>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"

namespace megatron::trigger {
namespace {

using vit::Matrix;

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

// Pixel gradient restricted to the trigger rect, zeroed where the patch
// clipped (the clamp passes gradient only on the closed interval [0,1]).
Image trigger_gradient(const Image& pixel_grad, const Image& source, const Image& pattern,
                       PixelPoint loc) {
  Image g(pattern.channels(), pattern.height(), pattern.width());
  for (int c = 0; c < pattern.channels(); ++c)
    for (int y = 0; y < pattern.height(); ++y)
      for (int x = 0; x < pattern.width(); ++x) {
        const double v = source.at(c, loc.y + y, loc.x + x) + pattern.at(c, y, x);
        if (v >= 0.0 && v <= 1.0) g.at(c, y, x) = pixel_grad.at(c, loc.y + y, loc.x + x);
      }
  return g;
}

}  // namespace

void TriggerConfig::validate(const vit::ModelConfig& config) const {
  if (!(gamma >= 0.0)) throw InputError("TriggerConfig: gamma must be >= 0");
  if (max_iters < 0) throw InputError("TriggerConfig: max_iters must be >= 0");
  if (!(lr > 0.0)) throw InputError("TriggerConfig: lr must be > 0");
  if (diffusion_radius < 0) throw InputError("TriggerConfig: diffusion_radius must be >= 0");
  if (width <= 0 || height <= 0 || !rect_inside(rect(), config.image_size, config.image_size)) {
    throw InputError("TriggerConfig: trigger rect lies outside the image");
  }
  if (phi_a < 0.0 || phi_a > 1.0 || phi_d < 0.0 || phi_d > 1.0) {
    throw InputError("TriggerConfig: transparencies must lie in [0,1]");
  }
}

double latent_loss(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("latent_loss: attention shapes differ");
  }
  return (a - b).squaredNorm();
}

std::vector<double> pcgrad(std::span<const double> ga, std::span<const double> gb,
                           PcgradMode mode) {
  if (ga.size() != gb.size()) throw DimensionError("pcgrad: gradient sizes differ");
  std::vector<double> out(ga.size());
  const double ab = dot(ga, gb);
  const double bb = dot(gb, gb);
  const double aa = dot(ga, ga);
  if (ab >= 0.0 || aa == 0.0 || bb == 0.0) {
    for (std::size_t i = 0; i < ga.size(); ++i) out[i] = ga[i] + gb[i];
    return out;
  }
  const double coef = ab / bb;
  const double sign = mode == PcgradMode::Standard ? -1.0 : 1.0;
  for (std::size_t i = 0; i < ga.size(); ++i) out[i] = ga[i] + sign * coef * gb[i];
  return out;
}

Image pcgrad(const Image& ga, const Image& gb, PcgradMode mode) {
  require_same_shape(ga, gb, "pcgrad");
  Image out(ga.channels(), ga.height(), ga.width());
  out.raw() = pcgrad(ga.values(), gb.values(), mode);
  return out;
}

Image initial_pattern(const TriggerConfig& cfg, int channels) {
  Image t(channels, cfg.height, cfg.width);
  if (cfg.init_mode == InitMode::Uniform) {
    Rng rng(derive_seed(cfg.seed, 0x696e6974));
    for (double& v : t.raw()) v = u8_to_unit(static_cast<int>(rng.index(256)));
  }
  return t;
}

Trigger generate_trigger(const vit::Model& surrogate, const Dataset& dataset,
                         std::optional<int> source_label, int target_label,
                         const TriggerConfig& cfg) {
  const vit::ModelConfig& mc = surrogate.config;
  cfg.validate(mc);
  if (mc.n_layers < 1) throw UnsupportedError("generate_trigger: surrogate has no layers");
  std::vector<const ImageSample*> sources, targets;
  for (const auto& s : dataset) {
    if (s.label == target_label) {
      targets.push_back(&s);
    } else if (!source_label || s.label == *source_label) {
      sources.push_back(&s);
    }
  }
  if (sources.empty()) throw InputError("generate_trigger: no source-label samples");
  if (targets.empty()) throw InputError("generate_trigger: no target-label samples");

  const rollout::DiffusionArea area =
      rollout::diffusion_area(cfg.rect(), mc, cfg.diffusion_radius);
  const rollout::RolloutOptions ropt{cfg.clamp_rollout};
  const int T = mc.tokens();
  const int H = mc.n_heads;
  const std::size_t last = static_cast<std::size_t>(mc.n_layers - 1);
  const vit::Vector d_scores = rollout::diffusion_loss_grad(T, area);

  Trigger trig;
  trig.location = cfg.location;
  trig.pattern = initial_pattern(cfg, mc.channels);
  Rng rng(derive_seed(cfg.seed, 0x70616972));

  for (int it = 0; it < cfg.max_iters; ++it) {
    const ImageSample& xs = *sources[rng.index(sources.size())];
    const ImageSample& xt = *targets[rng.index(targets.size())];

    const Matrix a_target = vit::forward_one(surrogate, xt.pixels).stack(mc, 0).mean_attention(last);
    const Image xc = patch_pixels(xs.pixels, trig.pattern, cfg.location);
    const vit::ForwardCache cache = vit::forward_one(surrogate, xc);

    // Gradient factor of the rollout: d y_target / d A_l, held constant.
    vit::Upstream up_y;
    up_y.d_logits = Matrix::Zero(1, mc.n_classes);
    up_y.d_logits(0, target_label) = 1.0;
    vit::AttentionStack stack = cache.stack(mc, 0);
    stack.attn_grad = vit::backward(surrogate, cache, up_y, {.attention = true}).attention;

    const Matrix a_patched = stack.mean_attention(last);
    const double l_alpha = latent_loss(a_patched, a_target);
    vit::Upstream up_a;
    up_a.d_attn.resize(mc.n_layers);
    up_a.d_attn[last].assign(H, 2.0 * (a_patched - a_target) / static_cast<double>(H));
    const Image grad_alpha = trigger_gradient(
        vit::backward(surrogate, cache, up_a, {.inputs = true}).inputs.front(), xs.pixels,
        trig.pattern, cfg.location);

    const Matrix rolled = rollout::grad_attention_rollout(stack, ropt);
    const vit::Vector raw = rolled.row(0).transpose();
    rollout::ImportanceScores scores;
    scores.scores = rollout::normalize_scores(raw, cfg.score_normalization);
    const double l_beta = rollout::diffusion_loss(scores, area);

    const double combined = l_alpha + cfg.gamma * l_beta;
    if (!std::isfinite(combined)) {
      throw OptimizationError("generate_trigger: non-finite loss at iteration " +
                              std::to_string(it));
    }
    trig.history.push_back({l_alpha, l_beta, combined});
    trig.final_loss = combined;
    if (combined <= cfg.tau) break;

    Image grad_beta(grad_alpha.channels(), grad_alpha.height(), grad_alpha.width());
    if (cfg.gamma > 0.0) {
      const vit::Vector d_row0 =
          rollout::normalize_scores_vjp(raw, d_scores, cfg.score_normalization);
      vit::Upstream up_b;
      up_b.d_attn = rollout::rollout_row0_vjp(stack, d_row0, ropt);
      grad_beta = trigger_gradient(
          vit::backward(surrogate, cache, up_b, {.inputs = true}).inputs.front(), xs.pixels,
          trig.pattern, cfg.location);
      for (double& v : grad_beta.raw()) v *= cfg.gamma;
    }
    const Image delta = pcgrad(grad_alpha, grad_beta, cfg.pcgrad_mode);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      double& t = trig.pattern.raw()[i];
      t = std::clamp(t - cfg.lr * delta.raw()[i], 0.0, 1.0);
    }
    ++trig.iterations_used;
  }
  trig.pattern = quantize_u8(std::move(trig.pattern));
  return trig;
}

std::vector<Image> split_masks(int width, int height, int k) {
  if (width <= 0 || height <= 0) throw InputError("split_masks: empty trigger");
  const int n = width * height;
  if (k < 1 || k > n) {
    throw InputError("split_masks: K=" + std::to_string(k) + " must lie in [1, " +
                     std::to_string(n) + "]");
  }
  const int band = n / k;
  std::vector<Image> masks(k, Image(1, height, width));
  for (int i = 0; i < n; ++i) {
    const int m = std::min(i / band, k - 1);
    masks[m].raw()[i] = 1.0;
  }
  return masks;
}

SubTrigger make_sub_trigger(const Image& pattern, const Image& mask, double phi_a, double phi_d,
                            int index) {
  if (phi_a < 0.0 || phi_a > 1.0 || phi_d < 0.0 || phi_d > 1.0) {
    throw InputError("make_sub_trigger: transparencies must lie in [0,1]");
  }
  if (mask.channels() != 1 || mask.height() != pattern.height() ||
      mask.width() != pattern.width()) {
    throw DimensionError("make_sub_trigger: mask " + mask.shape_string() +
                         " does not match trigger " + pattern.shape_string());
  }
  for (double m : mask.raw())
    if (m != 0.0 && m != 1.0) throw InputError("make_sub_trigger: mask is not binary");
  SubTrigger s;
  s.index = index;
  s.phi_a = phi_a;
  s.phi_d = phi_d;
  s.mask = mask;
  s.pattern = Image(pattern.channels(), pattern.height(), pattern.width());
  for (int c = 0; c < pattern.channels(); ++c)
    for (int y = 0; y < pattern.height(); ++y)
      for (int x = 0; x < pattern.width(); ++x) {
        const double m = mask.at(0, y, x);
        const double t = pattern.at(c, y, x);
        s.pattern.at(c, y, x) = phi_a * m * t + phi_d * (1.0 - m) * t;
      }
  return s;
}

std::vector<SubTrigger> make_sub_triggers(const Image& pattern, int k, double phi_a,
                                          double phi_d) {
  const std::vector<Image> masks = split_masks(pattern.width(), pattern.height(), k);
  std::vector<SubTrigger> out;
  for (int i = 0; i < k; ++i) out.push_back(make_sub_trigger(pattern, masks[i], phi_a, phi_d, i));
  return out;
}

Image patch_pixels(const Image& image, const Image& pattern, PixelPoint loc) {
  if (pattern.channels() != image.channels()) {
    throw DimensionError("patch_image: channel count of trigger and image differ");
  }
  const PixelRect rect{loc.x, loc.y, pattern.width(), pattern.height()};
  if (!rect_inside(rect, image.height(), image.width())) {
    throw InputError("patch_image: trigger at (" + std::to_string(loc.x) + "," +
                     std::to_string(loc.y) + ") falls outside the image");
  }
  Image out = image;
  for (int c = 0; c < pattern.channels(); ++c)
    for (int y = 0; y < pattern.height(); ++y)
      for (int x = 0; x < pattern.width(); ++x) {
        double& v = out.at(c, loc.y + y, loc.x + x);
        v = std::clamp(v + pattern.at(c, y, x), 0.0, 1.0);
      }
  return out;
}

ImageSample patch_image(const ImageSample& sample, const SubTrigger& sub, PixelPoint location) {
  return {patch_pixels(sample.pixels, sub.pattern, location), sample.label, sample.id};
}

}  // namespace megatron::trigger
