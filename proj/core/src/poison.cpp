#include "megatron/poison.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"

namespace megatron::poison {
namespace {

vit::Vector features(const vit::Model& m, const Image& x) {
  return vit::forward_one(m, x).features.row(0).transpose();
}

// Snap each pixel to the nearest 8-bit level inside its band; pixels whose
// band holds no level keep the band centre.
Image quantize_in_band(const Image& x, const Image& center, double eps) {
  Image out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::max(0.0, center.raw()[i] - eps);
    const double hi = std::min(1.0, center.raw()[i] + eps);
    const double v = x.raw()[i];
    double q = std::round(v * 255.0) / 255.0;
    if (q > hi) q = std::floor(v * 255.0) / 255.0;
    if (q < lo) q = std::ceil(v * 255.0) / 255.0;
    out.raw()[i] = (q >= lo && q <= hi) ? q : center.raw()[i];
  }
  return out;
}

}  // namespace

void PoisonConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw InputError("PoisonConfig: epsilon must lie in [0,1]");
  if (steps < 0) throw InputError("PoisonConfig: steps must be >= 0");
  if (!(lr > 0.0)) throw InputError("PoisonConfig: lr must be > 0");
  if (k < 1) throw InputError("PoisonConfig: K must be >= 1");
  if (poison_count && *poison_count < 0) throw InputError("PoisonConfig: poison_count must be >= 0");
  if (!(poison_rate >= 0.0 && poison_rate <= 1.0)) {
    throw InputError("PoisonConfig: poison_rate must lie in [0,1]");
  }
  if (jobs < 1) throw InputError("PoisonConfig: jobs must be >= 1");
}

int PoisonConfig::resolve_count(std::size_t n) const {
  if (poison_count) return *poison_count;
  return static_cast<int>(std::lround(poison_rate * static_cast<double>(n)));
}

Image project_linf(const Image& x, const Image& center, double eps) {
  require_same_shape(x, center, "project_linf");
  Image out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = center.raw()[i];
    const double v = std::clamp(x.raw()[i], c - eps, c + eps);
    out.raw()[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

double feature_distance(const vit::Model& m, const Image& a, const vit::Vector& f_target) {
  return (features(m, a) - f_target).squaredNorm();
}

PoisonRecord poison_sample(const vit::Model& surrogate, const ImageSample& x_t,
                           const ImageSample& x_a, const PoisonConfig& cfg,
                           int sub_trigger_index) {
  cfg.validate();
  require_same_shape(x_t.pixels, x_a.pixels, "poison_sample");
  const vit::Vector f_a = features(surrogate, x_a.pixels);

  PoisonRecord rec;
  rec.target_origin = x_t.id;
  rec.patched_source_id = x_a.id;
  rec.sub_trigger_index = sub_trigger_index;

  Image x = x_t.pixels;
  Image best = x;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0;; ++step) {
    const vit::ForwardCache cache = vit::forward_one(surrogate, x);
    const vit::Vector diff = cache.features.row(0).transpose() - f_a;
    const double loss = diff.squaredNorm();
    if (!std::isfinite(loss)) {
      throw OptimizationError("poison_sample: non-finite feature loss at step " +
                              std::to_string(step) + " for target '" + x_t.id + "'");
    }
    if (step == 0) rec.initial_feature_dist = loss;
    if (loss < best_loss) {
      best_loss = loss;
      best = x;
    }
    if (step == cfg.steps || loss <= cfg.tau || cfg.epsilon == 0.0) break;
    vit::Upstream up;
    up.d_features = 2.0 * diff.transpose();
    const Image g = vit::backward(surrogate, cache, up, {.inputs = true}).inputs.front();
    for (std::size_t i = 0; i < x.size(); ++i) x.raw()[i] -= cfg.lr * g.raw()[i];
    x = project_linf(x, x_t.pixels, cfg.epsilon);
    rec.steps_used = step + 1;
  }

  if (cfg.quantize && best != x_t.pixels) {
    Image q = quantize_in_band(best, x_t.pixels, cfg.epsilon);
    const double qd = feature_distance(surrogate, q, f_a);
    if (qd <= rec.initial_feature_dist) {
      best = std::move(q);
      best_loss = qd;
    } else {
      best = x_t.pixels;
      best_loss = rec.initial_feature_dist;
    }
  }
  rec.final_feature_dist = best_loss;
  rec.linf_used = linf_distance(best, x_t.pixels);
  rec.poisoned = {std::move(best), x_t.label, x_t.id};
  return rec;
}

PoisonedDataset build_poisoned_dataset(const Dataset& clean, const vit::Model& surrogate,
                                       const std::vector<trigger::SubTrigger>& subs,
                                       PixelPoint location, std::optional<int> source_label,
                                       int target_label, const PoisonConfig& cfg) {
  cfg.validate();
  const int q = cfg.resolve_count(clean.size());
  PoisonedDataset out;
  out.samples = clean;
  if (q == 0) return out;
  if (subs.empty()) throw InputError("build_poisoned_dataset: no sub-triggers");
  if (static_cast<int>(subs.size()) != cfg.k) {
    throw InputError("build_poisoned_dataset: expected K=" + std::to_string(cfg.k) +
                     " sub-triggers, got " + std::to_string(subs.size()));
  }

  std::vector<std::size_t> target_pool, source_pool;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const int y = clean[i].label;
    if (y == target_label) {
      target_pool.push_back(i);
    } else if (cfg.mode == Mode::AnyToOne || (source_label && y == *source_label)) {
      source_pool.push_back(i);
    }
  }
  if (cfg.mode == Mode::OneToOne && !source_label) {
    throw InputError("build_poisoned_dataset: one-to-one mode needs a source label");
  }
  if (static_cast<std::size_t>(q) > target_pool.size()) {
    throw InputError("build_poisoned_dataset: Q=" + std::to_string(q) + " exceeds the " +
                     std::to_string(target_pool.size()) + " target-label samples");
  }
  if (static_cast<std::size_t>(q) > source_pool.size()) {
    throw InputError("build_poisoned_dataset: Q=" + std::to_string(q) + " exceeds the " +
                     std::to_string(source_pool.size()) + " source samples");
  }

  Rng rng(derive_seed(cfg.seed, 0x706f6973));
  const auto t_pick = rng.sample_without_replacement(target_pool.size(), q);
  const auto s_pick = rng.sample_without_replacement(source_pool.size(), q);

  out.records.resize(q);
  out.positions.resize(q);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (int j = next++; j < q; j = next++) {
      try {
        const std::size_t ti = target_pool[t_pick[j]];
        const std::size_t si = source_pool[s_pick[j]];
        const int k = j % cfg.k;
        const ImageSample x_a = trigger::patch_image(clean[si], subs[k], location);
        out.records[j] = poison_sample(surrogate, clean[ti], x_a, cfg, k);
        out.positions[j] = ti;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = q;
      }
    }
  };
  const int n_threads = std::min(cfg.jobs, q);
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (int j = 0; j < q; ++j) out.samples[out.positions[j]] = out.records[j].poisoned;
  return out;
}

}  // namespace megatron::poison
