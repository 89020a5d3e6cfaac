#include "megatron/metrics.hpp"

#include <cmath>
#include <memory>

#include "megatron/errors.hpp"

namespace megatron::metrics {
namespace {

std::vector<const Image*> pointers(const Dataset& d) {
  std::vector<const Image*> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(&s.pixels);
  return out;
}

std::vector<int> run(const Predictor& model, std::span<const Image* const> images) {
  std::vector<int> pred = model(images);
  if (pred.size() != images.size()) throw ContractError("predictor returned a wrong count");
  return pred;
}

double signed_pow(double v, double e) {
  if (e == 1.0) return v;
  return v < 0.0 ? -std::pow(-v, e) : std::pow(v, e);
}

// Summed-area table with a zero border: s(y, x) = sum over [0,y) x [0,x).
std::vector<double> integral(const std::vector<double>& v, int h, int w) {
  std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += v[static_cast<std::size_t>(y) * w + x];
      s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] = s[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

double box(const std::vector<double>& s, int w, int y, int x, int n) {
  const auto at = [&](int yy, int xx) { return s[static_cast<std::size_t>(yy) * (w + 1) + xx]; };
  return at(y + n, x + n) - at(y, x + n) - at(y + n, x) + at(y, x);
}

}  // namespace

Predictor predictor_for(const vit::Model& model) {
  auto owned = std::make_shared<const vit::Model>(model);
  return [owned](std::span<const Image* const> images) { return vit::predict_all(*owned, images); };
}

double rate_of(const Predictor& model, std::span<const Image* const> images, int label) {
  if (images.empty()) throw InputError("rate_of: empty set");
  const std::vector<int> pred = run(model, images);
  std::size_t hits = 0;
  for (int p : pred) hits += p == label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double cda(const Predictor& model, const Dataset& clean_set) {
  if (clean_set.empty()) throw InputError("cda: empty clean set");
  const auto ptrs = pointers(clean_set);
  const std::vector<int> pred = run(model, ptrs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == clean_set[i].label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double sasr(const Predictor& model, const Dataset& source_set, const trigger::SubTrigger& sub,
            PixelPoint location, int target_label) {
  if (source_set.empty()) throw InputError("sasr: empty source set");
  std::vector<Image> patched;
  patched.reserve(source_set.size());
  for (const auto& s : source_set) patched.push_back(trigger::patch_pixels(s.pixels, sub.pattern, location));
  std::vector<const Image*> ptrs;
  for (const auto& p : patched) ptrs.push_back(&p);
  return rate_of(model, ptrs, target_label);
}

double scda(const Predictor& model, const Dataset& source_set) {
  if (source_set.empty()) throw InputError("scda: empty source set");
  return cda(model, source_set);
}

double psnr(const Image& a, const Image& b, double peak) {
  require_same_shape(a, b, "psnr");
  if (!(peak > 0.0)) throw InputError("psnr: peak must be > 0");
  if (a.empty()) throw InputError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.raw()[i] - b.raw()[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

void SsimConfig::validate() const {
  if (window < 1) throw InputError("SsimConfig: window must be >= 1");
  for (double e : {alpha, beta, gamma})
    if (e < 0.0 || e > 1.0) throw InputError("SsimConfig: exponents must lie in [0,1]");
  if (c1 < 0.0 || c2 < 0.0) throw InputError("SsimConfig: stabilisers must be >= 0");
}

double ssim(const Image& a, const Image& b, const SsimConfig& cfg) {
  require_same_shape(a, b, "ssim");
  cfg.validate();
  const int h = a.height();
  const int w = a.width();
  const int n = cfg.window;
  if (n > h || n > w) {
    throw InputError("ssim: window " + std::to_string(n) + " exceeds image " + a.shape_string());
  }
  if (a == b) return 1.0;
  const double inv = 1.0 / (static_cast<double>(n) * n);
  double total = 0.0;
  std::size_t count = 0;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < a.channels(); ++c) {
    std::vector<double> va(a.raw().begin() + c * plane, a.raw().begin() + (c + 1) * plane);
    std::vector<double> vb(b.raw().begin() + c * plane, b.raw().begin() + (c + 1) * plane);
    std::vector<double> aa(plane), bb(plane), ab(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      aa[i] = va[i] * va[i];
      bb[i] = vb[i] * vb[i];
      ab[i] = va[i] * vb[i];
    }
    const auto sa = integral(va, h, w), sb = integral(vb, h, w);
    const auto saa = integral(aa, h, w), sbb = integral(bb, h, w), sab = integral(ab, h, w);
    for (int y = 0; y + n <= h; ++y)
      for (int x = 0; x + n <= w; ++x) {
        const double mu_a = box(sa, w, y, x, n) * inv;
        const double mu_b = box(sb, w, y, x, n) * inv;
        const double var_a = std::max(0.0, box(saa, w, y, x, n) * inv - mu_a * mu_a);
        const double var_b = std::max(0.0, box(sbb, w, y, x, n) * inv - mu_b * mu_b);
        const double cov = box(sab, w, y, x, n) * inv - mu_a * mu_b;
        const double sd_a = std::sqrt(var_a);
        const double sd_b = std::sqrt(var_b);
        const double lum = (2.0 * mu_a * mu_b + cfg.c1) / (mu_a * mu_a + mu_b * mu_b + cfg.c1);
        const double con = (2.0 * sd_a * sd_b + cfg.c2) / (var_a + var_b + cfg.c2);
        const double str = (cov + cfg.c3()) / (sd_a * sd_b + cfg.c3());
        total += signed_pow(lum, cfg.alpha) * signed_pow(con, cfg.beta) * signed_pow(str, cfg.gamma);
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

double l1_distance(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1_distance");
  if (a.empty()) throw InputError("l1_distance: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.raw()[i] - b.raw()[i]);
  return s / static_cast<double>(a.size());
}

std::optional<double> lpips(const Image& a, const Image& b, const PerceptualProvider& provider) {
  if (!provider) return std::nullopt;
  try {
    std::optional<double> v = provider(a, b);
    if (v && !std::isfinite(*v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

nlohmann::json to_json(const AttackReport& r) {
  using nlohmann::json;
  json j;
  j["schema_version"] = r.schema_version;
  j["cda"] = r.cda;
  j["sasr"] = r.sasr;
  j["scda"] = r.scda;
  j["baseline_cda"] = r.baseline_cda;
  j["baseline_sasr"] = r.baseline_sasr;
  j["baseline_scda"] = r.baseline_scda;
  j["surrogate_cda"] = r.surrogate_cda;
  j["surrogate_sasr"] = r.surrogate_sasr;
  j["sasr_per_sub_trigger"] = r.sasr_per_sub_trigger;
  j["baseline_sasr_per_sub_trigger"] = r.baseline_sasr_per_sub_trigger;
  j["sub_trigger_index"] = r.sub_trigger_index;
  j["poison_count"] = r.poison_count;
  j["psnr_mean"] = r.psnr_mean;
  j["psnr_min"] = r.psnr_min;
  j["ssim_mean"] = r.ssim_mean;
  j["l1_mean"] = r.l1_mean;
  j["linf_max"] = r.linf_max;
  j["lpips_mean"] = r.lpips_mean ? json(*r.lpips_mean) : json(nullptr);
  j["shifts"] = json::array();
  for (const auto& s : r.shifts) j["shifts"].push_back({{"dx", s.dx}, {"dy", s.dy}, {"sasr", s.sasr}});
  if (r.defense) {
    j["defense"] = {{"drop_rate", r.defense->drop_rate},
                    {"shuffle", r.defense->shuffle},
                    {"cda", r.defense->cda},
                    {"sasr", r.defense->sasr},
                    {"baseline_sasr", r.defense->baseline_sasr}};
  } else {
    j["defense"] = nullptr;
  }
  j["trigger_final_loss"] = r.trigger_final_loss;
  j["trigger_iterations"] = r.trigger_iterations;
  j["seed"] = r.seed;
  j["config"] = r.config;
  return j;
}

AttackReport report_from_json(const nlohmann::json& j) {
  AttackReport r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    r.cda = j.at("cda").get<double>();
    r.sasr = j.at("sasr").get<double>();
    r.scda = j.at("scda").get<double>();
    r.baseline_cda = j.at("baseline_cda").get<double>();
    r.baseline_sasr = j.at("baseline_sasr").get<double>();
    r.baseline_scda = j.at("baseline_scda").get<double>();
    r.surrogate_cda = j.at("surrogate_cda").get<double>();
    r.surrogate_sasr = j.at("surrogate_sasr").get<double>();
    r.sasr_per_sub_trigger = j.at("sasr_per_sub_trigger").get<std::vector<double>>();
    r.baseline_sasr_per_sub_trigger = j.at("baseline_sasr_per_sub_trigger").get<std::vector<double>>();
    r.sub_trigger_index = j.at("sub_trigger_index").get<int>();
    r.poison_count = j.at("poison_count").get<int>();
    r.psnr_mean = j.at("psnr_mean").get<double>();
    r.psnr_min = j.at("psnr_min").get<double>();
    r.ssim_mean = j.at("ssim_mean").get<double>();
    r.l1_mean = j.at("l1_mean").get<double>();
    r.linf_max = j.at("linf_max").get<double>();
    if (!j.at("lpips_mean").is_null()) r.lpips_mean = j.at("lpips_mean").get<double>();
    for (const auto& s : j.at("shifts")) {
      r.shifts.push_back({s.at("dx").get<int>(), s.at("dy").get<int>(), s.at("sasr").get<double>()});
    }
    if (const auto& d = j.at("defense"); !d.is_null()) {
      r.defense = DefenseResult{d.at("drop_rate").get<double>(), d.at("shuffle").get<bool>(),
                                d.at("cda").get<double>(), d.at("sasr").get<double>(),
                                d.at("baseline_sasr").get<double>()};
    }
    r.trigger_final_loss = j.at("trigger_final_loss").get<double>();
    r.trigger_iterations = j.at("trigger_iterations").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config");
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("report_from_json: ") + e.what());
  }
  return r;
}

bool reports_close(const AttackReport& a, const AttackReport& b, double tol,
                   std::string* first_difference) {
  const auto fail = [&](const std::string& what) {
    if (first_difference) *first_difference = what;
    return false;
  };
  const auto close = [&](double x, double y) { return std::abs(x - y) <= tol; };
  const std::pair<const char*, std::pair<double, double>> scalars[] = {
      {"cda", {a.cda, b.cda}},
      {"sasr", {a.sasr, b.sasr}},
      {"scda", {a.scda, b.scda}},
      {"baseline_cda", {a.baseline_cda, b.baseline_cda}},
      {"baseline_sasr", {a.baseline_sasr, b.baseline_sasr}},
      {"baseline_scda", {a.baseline_scda, b.baseline_scda}},
      {"surrogate_cda", {a.surrogate_cda, b.surrogate_cda}},
      {"surrogate_sasr", {a.surrogate_sasr, b.surrogate_sasr}},
      {"psnr_mean", {a.psnr_mean, b.psnr_mean}},
      {"psnr_min", {a.psnr_min, b.psnr_min}},
      {"ssim_mean", {a.ssim_mean, b.ssim_mean}},
      {"l1_mean", {a.l1_mean, b.l1_mean}},
      {"linf_max", {a.linf_max, b.linf_max}},
      {"trigger_final_loss", {a.trigger_final_loss, b.trigger_final_loss}},
  };
  for (const auto& [name, v] : scalars)
    if (!close(v.first, v.second)) return fail(name);
  if (a.schema_version != b.schema_version || a.sub_trigger_index != b.sub_trigger_index ||
      a.poison_count != b.poison_count || a.trigger_iterations != b.trigger_iterations ||
      a.seed != b.seed) {
    return fail("integer field");
  }
  const auto vec_close = [&](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!close(x[i], y[i])) return false;
    return true;
  };
  if (!vec_close(a.sasr_per_sub_trigger, b.sasr_per_sub_trigger)) return fail("sasr_per_sub_trigger");
  if (!vec_close(a.baseline_sasr_per_sub_trigger, b.baseline_sasr_per_sub_trigger)) {
    return fail("baseline_sasr_per_sub_trigger");
  }
  if (a.lpips_mean.has_value() != b.lpips_mean.has_value() ||
      (a.lpips_mean && !close(*a.lpips_mean, *b.lpips_mean))) {
    return fail("lpips_mean");
  }
  if (a.shifts.size() != b.shifts.size()) return fail("shifts");
  for (std::size_t i = 0; i < a.shifts.size(); ++i) {
    if (a.shifts[i].dx != b.shifts[i].dx || a.shifts[i].dy != b.shifts[i].dy ||
        !close(a.shifts[i].sasr, b.shifts[i].sasr)) {
      return fail("shifts");
    }
  }
  if (a.defense.has_value() != b.defense.has_value()) return fail("defense");
  if (a.defense) {
    const auto& x = *a.defense;
    const auto& y = *b.defense;
    if (x.shuffle != y.shuffle || !close(x.drop_rate, y.drop_rate) || !close(x.cda, y.cda) ||
        !close(x.sasr, y.sasr) || !close(x.baseline_sasr, y.baseline_sasr)) {
      return fail("defense");
    }
  }
  if (a.config != b.config) return fail("config");
  return true;
}

}  // namespace megatron::metrics
