#include "megatron/harness.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "megatron/dataset.hpp"
#include "megatron/errors.hpp"
#include "megatron/random.hpp"
#include "megatron/rollout.hpp"

namespace megatron::harness {
namespace {

using nlohmann::json;

template <typename F>
auto tagged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ArtifactError&) {
    throw;
  } catch (const OverwriteError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

Dataset relabel_subset(const Dataset& d, const std::vector<int>& classes, std::size_t limit) {
  Dataset out;
  for (const auto& s : d) {
    const auto it = std::find(classes.begin(), classes.end(), s.label);
    if (it == classes.end()) continue;
    out.push_back({s.pixels, static_cast<int>(it - classes.begin()), s.id});
    if (out.size() == limit) break;
  }
  return out;
}

Dataset source_test_set(const config::ExperimentConfig& cfg, const Dataset& test) {
  Dataset out;
  for (const auto& s : test) {
    const bool is_source = cfg.poison.mode == poison::Mode::OneToOne ? s.label == cfg.source_label
                                                                     : s.label != cfg.target_label;
    if (is_source) out.push_back(s);
  }
  if (out.empty()) throw InputError("evaluate: test split holds no source samples");
  return out;
}

vit::EpochObserver epoch_logger(io::StageLog* log, const std::string& what) {
  if (!log) return {};
  return [log, what](const vit::EpochStats& s) {
    std::ostringstream os;
    os << what << " epoch " << s.epoch << " loss " << s.mean_loss << " acc " << s.accuracy;
    log->line(os.str());
  };
}

// --- run-directory plumbing -------------------------------------------------

std::string config_hash(const config::ExperimentConfig& cfg) {
  return io::sha256_hex(config::to_json(cfg).dump());
}

std::string rel(const RunPaths& p, const fs::path& f) { return fs::relative(f, p.root).generic_string(); }

// Digest over every image file of a dataset directory, in manifest order.
std::string images_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir / "images"))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string cat;
  for (const auto& f : files) cat += f.filename().string() + ":" + io::sha256_file(f) + "\n";
  return io::sha256_hex(cat);
}

std::string artifact_hash(const RunPaths& p, const fs::path& f) {
  if (f == p.poisoned_dir()) {
    if (!fs::exists(p.poisoned_manifest())) {
      throw ArtifactError(rel(p, p.poisoned_manifest()), "missing artifact: " + p.poisoned_manifest().string());
    }
    return images_digest(f);
  }
  if (!fs::exists(f)) throw ArtifactError(rel(p, f), "missing artifact: " + f.string());
  return io::sha256_file(f);
}

// Verify `artifacts` against the outputs recorded by `upstream`.
json verify_inputs(const RunPaths& p, const config::ExperimentConfig& cfg, const std::string& upstream,
                   const std::vector<fs::path>& artifacts) {
  for (const auto& a : artifacts)
    if (!fs::exists(a)) throw ArtifactError(rel(p, a), "missing artifact: " + a.string());
  const fs::path mpath = p.stage_manifest(upstream);
  if (!fs::exists(mpath)) {
    throw ArtifactError(rel(p, mpath), "missing stage manifest: " + mpath.string());
  }
  const json m = io::read_json(mpath);
  if (m.value("config_sha256", "") != config_hash(cfg)) {
    throw ArtifactError(rel(p, mpath), "stage '" + upstream + "' was produced with a different configuration");
  }
  json inputs = json::object();
  for (const auto& a : artifacts) {
    const std::string key = rel(p, a);
    const std::string h = artifact_hash(p, a);
    const auto& outs = m.at("outputs");
    if (!outs.contains(key) || outs.at(key).get<std::string>() != h) {
      throw ArtifactError(key, "artifact hash mismatch: " + a.string());
    }
    inputs[key] = h;
  }
  return inputs;
}

void refuse_overwrite(const RunPaths& p, const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& o : outputs)
    if (fs::exists(o)) {
      throw OverwriteError("refusing to overwrite " + o.string() + " (use --force)");
    }
  (void)p;
}

void write_stage_manifest(const RunPaths& p, const config::ExperimentConfig& cfg,
                          const std::string& stage, const json& inputs,
                          const std::vector<fs::path>& outputs) {
  json outs = json::object();
  for (const auto& o : outputs) outs[rel(p, o)] = artifact_hash(p, o);
  io::write_json(p.stage_manifest(stage),
                 {{"stage", stage}, {"config_sha256", config_hash(cfg)}, {"inputs", inputs}, {"outputs", outs}});
}

void write_config_snapshot(const RunPaths& p, const config::ExperimentConfig& cfg) {
  io::write_json(p.config(), config::to_json(cfg));
}

json trigger_meta(const config::ExperimentConfig& cfg) {
  return {{"gamma", cfg.trigger.gamma},
          {"k", cfg.poison.k},
          {"phi_a", cfg.trigger.phi_a},
          {"phi_d", cfg.trigger.phi_d},
          {"seed", cfg.trigger.seed},
          {"config_sha256", config_hash(cfg)}};
}

rollout::ImportanceScores trigger_scores(const config::ExperimentConfig& cfg, const vit::Model& surrogate,
                                         const trigger::Trigger& t, const Dataset& pool) {
  // Mean rollout scores of patched source samples, averaged over a few.
  const auto sources = data::filter_labels(pool, {cfg.source_label});
  const std::size_t n = std::min<std::size_t>(16, sources.size());
  rollout::ImportanceScores acc;
  for (std::size_t i = 0; i < n; ++i) {
    const Image x = trigger::patch_pixels(sources[i].pixels, t.pattern, t.location);
    const auto stack = vit::grad_wrt_attention(surrogate.config, surrogate.params, x, cfg.target_label);
    auto s = rollout::importance_scores(rollout::grad_attention_rollout(stack));
    if (i == 0) {
      acc = s;
    } else {
      acc.scores += s.scores;
    }
  }
  if (n > 0) acc.scores /= static_cast<double>(n);
  return acc;
}

}  // namespace

DataSplits load_data(const config::ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  DataSplits s;
  if (d.format == "synthetic") {
    data::SyntheticSpec spec = d.synthetic;
    spec.n_classes = static_cast<int>(d.classes.size());
    s.train = data::make_synthetic(d.train_size, derive_seed(cfg.data_seed(), 0), spec, "train");
    s.test = data::make_synthetic(d.test_size, derive_seed(cfg.data_seed(), 1), spec, "test");
  } else if (d.format == "cifar10-binary") {
    s.train = data::load_cifar10_binary(d.path, true, d.classes, d.train_size);
    s.test = data::load_cifar10_binary(d.path, false, d.classes, d.test_size);
  } else {
    s.train = relabel_subset(io::load_dataset_dir(fs::path(d.path) / "train").samples, d.classes, d.train_size);
    s.test = relabel_subset(io::load_dataset_dir(fs::path(d.path) / "test").samples, d.classes, d.test_size);
  }
  if (s.train.empty() || s.test.empty()) throw InputError("dataset: empty split");
  for (const auto* split : {&s.train, &s.test})
    for (const auto& x : *split) {
      if (x.pixels.channels() != cfg.victim.model.channels || x.pixels.height() != cfg.victim.model.image_size ||
          x.pixels.width() != cfg.victim.model.image_size) {
        throw DimensionError("dataset: sample '" + x.id + "' has shape " + x.pixels.shape_string());
      }
    }
  return s;
}

Dataset attacker_pool(const config::ExperimentConfig& cfg, const Dataset& train) {
  if (cfg.dataset.attacker_pool == config::AttackerPool::Identical) return train;
  Rng rng(derive_seed(cfg.data_seed(), 2));
  auto idx = rng.sample_without_replacement(train.size(), train.size() / 2);
  std::sort(idx.begin(), idx.end());
  Dataset out;
  for (auto i : idx) out.push_back(train[i]);
  return out;
}

vit::Model train_surrogate(const config::ExperimentConfig& cfg, const Dataset& attacker_data,
                           const vit::EpochObserver& observer) {
  return tagged("train-surrogate", [&] {
    auto r = vit::train(cfg.surrogate.model, cfg.surrogate.train, attacker_data, observer);
    return vit::Model{cfg.surrogate.model, std::move(r.params)};
  });
}

trigger::Trigger gen_trigger(const config::ExperimentConfig& cfg, const vit::Model& surrogate,
                             const Dataset& attacker_data) {
  return tagged("gen-trigger", [&] {
    return trigger::generate_trigger(surrogate, attacker_data, cfg.source(), cfg.target_label, cfg.trigger);
  });
}

std::vector<trigger::SubTrigger> sub_triggers(const config::ExperimentConfig& cfg, const trigger::Trigger& t) {
  return trigger::make_sub_triggers(t.pattern, cfg.poison.k, cfg.trigger.phi_a, cfg.trigger.phi_d);
}

poison::PoisonedDataset craft_poisons(const config::ExperimentConfig& cfg, const vit::Model& surrogate,
                                      const trigger::Trigger& t, const Dataset& train, int jobs) {
  return tagged("poison", [&] {
    poison::PoisonConfig pc = cfg.poison;
    pc.jobs = jobs;
    return poison::build_poisoned_dataset(train, surrogate, sub_triggers(cfg, t), t.location, cfg.source(),
                                          cfg.target_label, pc);
  });
}

vit::Model train_victim(const config::ModelStage& stage, const Dataset& training_set,
                        const vit::EpochObserver& observer) {
  return tagged("train-victim", [&] {
    auto r = vit::train(stage.model, stage.train, training_set, observer);
    return vit::Model{stage.model, std::move(r.params)};
  });
}

std::vector<metrics::ShiftResult> shift_evaluation(const metrics::Predictor& victim, const Dataset& source_set,
                                                   const trigger::SubTrigger& sub, PixelPoint base,
                                                   const std::vector<std::pair<int, int>>& shifts,
                                                   int patch_size, int target_label) {
  if (source_set.empty()) throw InputError("shift_evaluation: empty source set");
  const Image& probe = source_set.front().pixels;
  std::vector<metrics::ShiftResult> out;
  for (const auto& [dx, dy] : shifts) {
    const PixelPoint loc{base.x + dx * patch_size, base.y + dy * patch_size};
    const PixelRect r{loc.x, loc.y, sub.pattern.width(), sub.pattern.height()};
    if (!rect_inside(r, probe.height(), probe.width())) {
      throw InputError("shift_evaluation: offset (" + std::to_string(dx) + "," + std::to_string(dy) +
                       ") places the sub-trigger outside the image");
    }
    out.push_back({dx, dy, metrics::sasr(victim, source_set, sub, loc, target_label)});
  }
  return out;
}

Image patch_defense_probe(const Image& image, int patch_size, double drop_rate, bool shuffle,
                          std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw InputError("patch_defense_probe: drop_rate must lie in [0,1)");
  if (patch_size < 1 || image.height() % patch_size != 0 || image.width() % patch_size != 0) {
    throw DimensionError("patch_defense_probe: image not divisible into patches of " + std::to_string(patch_size));
  }
  const int gr = image.height() / patch_size;
  const int gc = image.width() / patch_size;
  const int n = gr * gc;
  const int n_drop = static_cast<int>(std::lround(drop_rate * n));
  if (n_drop == 0 && !shuffle) return image;
  Rng rng(seed);
  std::vector<std::size_t> order = rng.sample_without_replacement(n, n);
  std::vector<bool> dropped(n, false);
  for (int i = 0; i < n_drop; ++i) dropped[order[i]] = true;
  std::vector<int> keep;
  for (int i = 0; i < n; ++i)
    if (!dropped[i]) keep.push_back(i);
  std::vector<int> src = keep;
  if (shuffle) rng.shuffle(src);

  Image out(image.channels(), image.height(), image.width());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const int dst = keep[k], from = src[k];
    const int dy = (dst / gc) * patch_size, dx = (dst % gc) * patch_size;
    const int sy = (from / gc) * patch_size, sx = (from % gc) * patch_size;
    for (int c = 0; c < image.channels(); ++c)
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) out.at(c, dy + y, dx + x) = image.at(c, sy + y, sx + x);
  }
  return out;
}

metrics::AttackReport evaluate(const config::ExperimentConfig& cfg, const EvaluationInputs& in) {
  return tagged("evaluate", [&] {
    if (!in.victim || !in.baseline || !in.surrogate || !in.trigger || !in.clean_train || !in.poisoned || !in.test) {
      throw ContractError("evaluate: missing input");
    }
    if (in.poisoned->samples.size() != in.clean_train->size()) {
      throw InputError("evaluate: poisoned set size differs from the clean training set");
    }
    metrics::AttackReport r;
    const auto victim = metrics::predictor_for(*in.victim);
    const auto baseline = metrics::predictor_for(*in.baseline);
    const auto surrogate = metrics::predictor_for(*in.surrogate);
    const Dataset sources = source_test_set(cfg, *in.test);
    const auto subs = sub_triggers(cfg, *in.trigger);
    const auto& sub = subs.at(cfg.evaluation.sub_trigger_index);
    const PixelPoint loc = cfg.eval_location();
    const int tgt = cfg.target_label;

    r.sub_trigger_index = cfg.evaluation.sub_trigger_index;
    r.cda = metrics::cda(victim, *in.test);
    r.sasr = metrics::sasr(victim, sources, sub, loc, tgt);
    r.scda = metrics::scda(victim, sources);
    r.baseline_cda = metrics::cda(baseline, *in.test);
    r.baseline_sasr = metrics::sasr(baseline, sources, sub, loc, tgt);
    r.baseline_scda = metrics::scda(baseline, sources);
    r.surrogate_cda = metrics::cda(surrogate, *in.test);
    r.surrogate_sasr = metrics::sasr(surrogate, sources, sub, loc, tgt);
    for (const auto& s : subs) {
      r.sasr_per_sub_trigger.push_back(metrics::sasr(victim, sources, s, loc, tgt));
      r.baseline_sasr_per_sub_trigger.push_back(metrics::sasr(baseline, sources, s, loc, tgt));
    }

    const auto& recs = in.poisoned->records;
    r.poison_count = static_cast<int>(recs.size());
    r.psnr_mean = metrics::kPsnrCap;
    r.psnr_min = metrics::kPsnrCap;
    r.ssim_mean = 1.0;
    if (!recs.empty()) {
      double ps = 0.0, ss = 0.0, l1 = 0.0;
      r.psnr_min = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < recs.size(); ++j) {
        const std::size_t pos = in.poisoned->positions.at(j);
        const Image& xp = in.poisoned->samples.at(pos).pixels;
        const Image& xt = in.clean_train->at(pos).pixels;
        const double p = metrics::psnr(xp, xt);
        ps += p;
        r.psnr_min = std::min(r.psnr_min, p);
        ss += metrics::ssim(xp, xt);
        l1 += metrics::l1_distance(xp, xt);
        r.linf_max = std::max(r.linf_max, linf_distance(xp, xt));
      }
      const double n = static_cast<double>(recs.size());
      r.psnr_mean = ps / n;
      r.ssim_mean = ss / n;
      r.l1_mean = l1 / n;
    }
    r.lpips_mean = std::nullopt;

    r.shifts = shift_evaluation(victim, sources, sub, loc, cfg.evaluation.shifts, cfg.victim.model.patch_size, tgt);

    if (cfg.defense.enabled) {
      const int ps = cfg.victim.model.patch_size;
      metrics::DefenseResult d;
      d.drop_rate = cfg.defense.drop_rate;
      d.shuffle = cfg.defense.shuffle;
      Dataset probed_test = *in.test;
      for (std::size_t i = 0; i < probed_test.size(); ++i) {
        probed_test[i].pixels = patch_defense_probe(probed_test[i].pixels, ps, d.drop_rate, d.shuffle,
                                                    derive_seed(cfg.defense_seed(), i));
      }
      std::vector<Image> patched;
      for (std::size_t i = 0; i < sources.size(); ++i) {
        patched.push_back(patch_defense_probe(trigger::patch_pixels(sources[i].pixels, sub.pattern, loc), ps,
                                              d.drop_rate, d.shuffle, derive_seed(cfg.defense_seed(), 1u << 20 | i)));
      }
      std::vector<const Image*> ptrs;
      for (const auto& p : patched) ptrs.push_back(&p);
      d.cda = metrics::cda(victim, probed_test);
      d.sasr = metrics::rate_of(victim, ptrs, tgt);
      d.baseline_sasr = metrics::rate_of(baseline, ptrs, tgt);
      r.defense = d;
    }

    r.trigger_final_loss = in.trigger->final_loss.value_or(0.0);
    r.trigger_iterations = in.trigger->iterations_used;
    r.seed = cfg.seed;
    r.config = config::to_json(cfg);
    return r;
  });
}

metrics::AttackReport run_experiment(const config::ExperimentConfig& cfg, int jobs, io::StageLog* log) {
  const auto note = [&](const std::string& s) {
    if (log) log->line(s);
  };
  const DataSplits data = tagged("load-data", [&] { return load_data(cfg); });
  const Dataset pool = attacker_pool(cfg, data.train);
  note("train-surrogate");
  const vit::Model surrogate = train_surrogate(cfg, pool, epoch_logger(log, "surrogate"));
  note("gen-trigger");
  const trigger::Trigger trig = gen_trigger(cfg, surrogate, pool);
  note("poison");
  const poison::PoisonedDataset poisoned = craft_poisons(cfg, surrogate, trig, data.train, jobs);
  note("train-victim");
  const vit::Model victim = train_victim(cfg.victim, poisoned.samples, epoch_logger(log, "victim"));
  const vit::Model baseline = train_victim(cfg.victim, data.train, epoch_logger(log, "baseline"));
  note("evaluate");
  return evaluate(cfg, {&victim, &baseline, &surrogate, &trig, &data.train, &poisoned, &data.test});
}

// ---------------------------------------------------------------------------

fs::path stage_train_surrogate(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  const RunPaths p{opt.out};
  refuse_overwrite(p, {p.surrogate()}, opt.force);
  fs::create_directories(p.root);
  write_config_snapshot(p, cfg);
  io::StageLog log(p.log("train-surrogate"), opt.echo);
  log.line("loading data");
  const DataSplits data = tagged("train-surrogate", [&] { return load_data(cfg); });
  const Dataset pool = attacker_pool(cfg, data.train);
  log.line("training surrogate on " + std::to_string(pool.size()) + " samples");
  const vit::Model m = train_surrogate(cfg, pool, epoch_logger(&log, "surrogate"));
  io::save_checkpoint(p.surrogate(), m);
  write_stage_manifest(p, cfg, "train-surrogate", json::object(), {p.surrogate()});
  log.line("wrote " + p.surrogate().string());
  return p.surrogate();
}

fs::path stage_gen_trigger(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  const RunPaths p{opt.out};
  refuse_overwrite(p, {p.trigger_png(), p.trigger_meta()}, opt.force);
  const json inputs = verify_inputs(p, cfg, "train-surrogate", {p.surrogate()});
  write_config_snapshot(p, cfg);
  io::StageLog log(p.log("gen-trigger"), opt.echo);
  const vit::Model surrogate = io::load_checkpoint(p.surrogate());
  const DataSplits data = tagged("gen-trigger", [&] { return load_data(cfg); });
  const Dataset pool = attacker_pool(cfg, data.train);
  log.line("optimising trigger for " + std::to_string(cfg.trigger.max_iters) + " iterations");
  const trigger::Trigger t = gen_trigger(cfg, surrogate, pool);
  io::save_trigger(p.trigger_stem(), t, trigger_meta(cfg));
  const auto scores = tagged("gen-trigger", [&] { return trigger_scores(cfg, surrogate, t, pool); });
  io::write_score_grid(p.scores_txt(), scores);
  io::write_score_heatmap(p.scores_png(), scores);
  std::ostringstream os;
  os << "iterations " << t.iterations_used << " final loss " << t.final_loss.value_or(0.0);
  log.line(os.str());
  write_stage_manifest(p, cfg, "gen-trigger", inputs, {p.trigger_png(), p.trigger_meta()});
  return p.trigger_png();
}

fs::path stage_poison(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  const RunPaths p{opt.out};
  refuse_overwrite(p, {p.poisoned_manifest()}, opt.force);
  json inputs = verify_inputs(p, cfg, "train-surrogate", {p.surrogate()});
  inputs.update(verify_inputs(p, cfg, "gen-trigger", {p.trigger_png(), p.trigger_meta()}));
  write_config_snapshot(p, cfg);
  io::StageLog log(p.log("poison"), opt.echo);
  const vit::Model surrogate = io::load_checkpoint(p.surrogate());
  const trigger::Trigger t = io::load_trigger(p.trigger_stem()).trigger;
  const DataSplits data = tagged("poison", [&] { return load_data(cfg); });
  log.line("crafting " + std::to_string(cfg.poison.resolve_count(data.train.size())) + " poisons with " +
           std::to_string(opt.jobs) + " workers");
  const poison::PoisonedDataset pd = craft_poisons(cfg, surrogate, t, data.train, opt.jobs);
  if (fs::exists(p.poisoned_dir())) fs::remove_all(p.poisoned_dir());
  io::save_dataset_dir(p.poisoned_dir(), pd.samples, pd.positions, pd.records);
  write_stage_manifest(p, cfg, "poison", inputs, {p.poisoned_manifest(), p.poisoned_dir()});
  log.line("wrote " + p.poisoned_manifest().string());
  return p.poisoned_manifest();
}

fs::path stage_train_victim(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  const RunPaths p{opt.out};
  refuse_overwrite(p, {p.victim(), p.baseline()}, opt.force);
  const json inputs = verify_inputs(p, cfg, "poison", {p.poisoned_manifest(), p.poisoned_dir()});
  write_config_snapshot(p, cfg);
  io::StageLog log(p.log("train-victim"), opt.echo);
  // The benign trainer: only the published dataset and its own config.
  const Dataset poisoned = io::load_dataset_dir(p.poisoned_dir()).samples;
  log.line("training victim on " + std::to_string(poisoned.size()) + " samples");
  io::save_checkpoint(p.victim(), train_victim(cfg.victim, poisoned, epoch_logger(&log, "victim")));
  const DataSplits data = tagged("train-victim", [&] { return load_data(cfg); });
  log.line("training clean baseline");
  io::save_checkpoint(p.baseline(), train_victim(cfg.victim, data.train, epoch_logger(&log, "baseline")));
  write_stage_manifest(p, cfg, "train-victim", inputs, {p.victim(), p.baseline()});
  return p.victim();
}

fs::path stage_evaluate(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  const RunPaths p{opt.out};
  refuse_overwrite(p, {p.report()}, opt.force);
  json inputs = verify_inputs(p, cfg, "train-victim", {p.victim(), p.baseline()});
  inputs.update(verify_inputs(p, cfg, "train-surrogate", {p.surrogate()}));
  inputs.update(verify_inputs(p, cfg, "gen-trigger", {p.trigger_png(), p.trigger_meta()}));
  inputs.update(verify_inputs(p, cfg, "poison", {p.poisoned_manifest(), p.poisoned_dir()}));
  write_config_snapshot(p, cfg);
  io::StageLog log(p.log("evaluate"), opt.echo);
  const vit::Model victim = io::load_checkpoint(p.victim());
  const vit::Model baseline = io::load_checkpoint(p.baseline());
  const vit::Model surrogate = io::load_checkpoint(p.surrogate());
  const trigger::Trigger t = io::load_trigger(p.trigger_stem()).trigger;
  const io::LoadedDataset loaded = io::load_dataset_dir(p.poisoned_dir());
  poison::PoisonedDataset pd{loaded.samples, loaded.positions, loaded.records};
  const DataSplits data = tagged("evaluate", [&] { return load_data(cfg); });
  log.line("evaluating");
  const metrics::AttackReport r =
      evaluate(cfg, {&victim, &baseline, &surrogate, &t, &data.train, &pd, &data.test});
  io::write_json(p.report(), metrics::to_json(r));
  write_stage_manifest(p, cfg, "evaluate", inputs, {p.report()});
  log.line("wrote " + p.report().string());
  return p.report();
}

fs::path run_all(const config::ExperimentConfig& cfg, const StageOptions& opt) {
  if (!opt.force && fs::exists(opt.out) && !fs::is_empty(opt.out)) {
    throw OverwriteError("output directory " + opt.out.string() + " is not empty (use --force)");
  }
  StageOptions o = opt;
  o.force = true;
  stage_train_surrogate(cfg, o);
  stage_gen_trigger(cfg, o);
  stage_poison(cfg, o);
  stage_train_victim(cfg, o);
  return stage_evaluate(cfg, o);
}

}  // namespace megatron::harness
