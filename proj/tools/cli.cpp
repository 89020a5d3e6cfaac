#include "cli.hpp"

#include <CLI11.hpp>
#include <iomanip>
#include <ostream>

#include "megatron/config.hpp"
#include "megatron/errors.hpp"
#include "megatron/harness.hpp"
#include "megatron/io.hpp"
#include "megatron/metrics.hpp"

namespace megatron::cli {
namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool force = false;
  bool dry_run = false;
};

void print_summary(const metrics::AttackReport& r, std::ostream& out) {
  const auto pct = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * v << " %";
    return os.str();
  };
  const auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
  };
  std::vector<std::pair<std::string, std::string>> rows = {
      {"CDA (victim)", pct(r.cda)},
      {"CDA (baseline)", pct(r.baseline_cda)},
      {"SASR (victim)", pct(r.sasr)},
      {"SASR (baseline)", pct(r.baseline_sasr)},
      {"SASR gap", pct(r.sasr - r.baseline_sasr)},
      {"SCDA (victim)", pct(r.scda)},
      {"SCDA (baseline)", pct(r.baseline_scda)},
      {"poisoned samples", std::to_string(r.poison_count)},
      {"PSNR mean (dB)", num(r.psnr_mean)},
      {"PSNR min (dB)", num(r.psnr_min)},
      {"SSIM mean", num(r.ssim_mean)},
      {"L1 mean", num(r.l1_mean)},
      {"Linf max", num(r.linf_max)},
      {"LPIPS mean", r.lpips_mean ? num(*r.lpips_mean) : "n/a"},
  };
  for (const auto& s : r.shifts) {
    rows.emplace_back("SASR shift (" + std::to_string(s.dx) + "," + std::to_string(s.dy) + ")", pct(s.sasr));
  }
  if (r.defense) {
    rows.emplace_back("CDA under probe", pct(r.defense->cda));
    rows.emplace_back("SASR under probe", pct(r.defense->sasr));
  }
  std::size_t w = 0;
  for (const auto& [k, v] : rows) w = std::max(w, k.size());
  out << std::left;
  for (const auto& [k, v] : rows) out << "  " << std::setw(static_cast<int>(w)) << k << "  " << v << '\n';
}

config::ExperimentConfig resolve(const Options& o) {
  config::ExperimentConfig cfg = config::load(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    config::resolve_seeds(cfg);
  }
  return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Clean-label backdoor attack pipeline for small vision transformers", "megatron"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train-surrogate", "Train the attacker's surrogate model"},
      {"gen-trigger", "Optimise the trigger against the surrogate"},
      {"poison", "Craft the clean-label poisoned training set"},
      {"train-victim", "Train the victim (and a clean baseline) on the published data"},
      {"evaluate", "Measure attack effectiveness and stealth"},
      {"run", "Run every stage in order"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Experiment configuration (JSON)")->required();
    sub->add_option("--out", o.out, "Run directory")->required();
    sub->add_option("--seed", o.seed, "Override the global seed");
    sub->add_option("--jobs", o.jobs, "Worker threads for poisoning")->check(CLI::PositiveNumber);
    sub->add_flag("--force", o.force, "Overwrite existing stage outputs");
    sub->add_flag("--dry-run", o.dry_run, "Print the resolved configuration and exit");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "megatron: " << e.what() << '\n';
    if (e.get_exit_code() == 0) return kOk;
    return kConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    const config::ExperimentConfig cfg = resolve(o);
    if (o.dry_run) {
      out << config::to_json(cfg).dump(2) << '\n';
      return kOk;
    }
    harness::StageOptions so{o.out, o.jobs, o.force, true};
    std::filesystem::path result;
    if (cmd == "train-surrogate") {
      result = harness::stage_train_surrogate(cfg, so);
    } else if (cmd == "gen-trigger") {
      result = harness::stage_gen_trigger(cfg, so);
    } else if (cmd == "poison") {
      result = harness::stage_poison(cfg, so);
    } else if (cmd == "train-victim") {
      result = harness::stage_train_victim(cfg, so);
    } else if (cmd == "evaluate") {
      result = harness::stage_evaluate(cfg, so);
    } else {
      result = harness::run_all(cfg, so);
    }
    if (cmd == "run" || cmd == "evaluate") {
      print_summary(metrics::report_from_json(io::read_json(result)), out);
    }
    out << result.string() << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    err << "megatron " << cmd << ": " << e.what() << '\n';
    return kConfig;
  } catch (const ArtifactError& e) {
    err << "megatron " << cmd << ": " << e.what() << " [artifact: " << e.artifact() << "]\n";
    return kMissingArtifact;
  } catch (const OverwriteError& e) {
    err << "megatron " << cmd << ": " << e.what() << '\n';
    return kOverwrite;
  } catch (const std::exception& e) {
    err << "megatron " << cmd << ": " << e.what() << '\n';
    return kInternal;
  }
}

}  // namespace megatron::cli
