#include "megatron/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"

namespace megatron::config {
namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were read so that any
// leftover key can be reported with its full path.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "document" : path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    if (const json* v = find(key)) {
      try {
        dst = v->get<T>();
      } catch (const json::exception&) {
        fail(at(key), std::string("wrong type (") + v->type_name() + ")");
      }
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& dst) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        dst.reset();
        return;
      }
      T tmp{};
      get(key, tmp);
      dst = tmp;
    }
  }

  template <typename E>
  void get_enum(const char* key, E& dst, std::initializer_list<std::pair<const char*, E>> names) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(at(key), "expected a string");
      const std::string s = v->get<std::string>();
      for (const auto& [n, e] : names)
        if (s == n) {
          dst = e;
          return;
        }
      std::string allowed;
      for (const auto& [n, e] : names) allowed += std::string(allowed.empty() ? "" : ", ") + n;
      fail(at(key), "unknown value '" + s + "' (expected one of: " + allowed + ")");
    }
  }

  void get_point(const char* key, PixelPoint& dst) {
    if (const json* v = find(key)) dst = point(*v, at(key));
  }

  void get_optional_point(const char* key, std::optional<PixelPoint>& dst) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        dst.reset();
      } else {
        dst = point(*v, at(key));
      }
    }
  }

  template <typename F>
  void section(const char* key, F&& f) {
    if (const json* v = find(key)) {
      Reader sub(*v, at(key));
      f(sub);
      sub.finish();
    }
  }

  const json* find(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) fail(at(it.key()), "unknown key");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError("config: " + path + ": " + what);
  }

 private:
  static PixelPoint point(const json& v, const std::string& path) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
      fail(path, "expected [x, y] integer pair");
    }
    return {v[0].get<int>(), v[1].get<int>()};
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void interpolate_all(json& j, const EnvLookup& env) {
  if (j.is_string()) {
    j = interpolate(j.get<std::string>(), env);
  } else if (j.is_structured()) {
    for (auto& v : j) interpolate_all(v, env);
  }
}

void read_model(Reader& r, vit::ModelConfig& m) {
  r.get("image_size", m.image_size);
  r.get("patch_size", m.patch_size);
  r.get("channels", m.channels);
  r.get("n_layers", m.n_layers);
  r.get("n_heads", m.n_heads);
  r.get("embed_dim", m.embed_dim);
  r.get("n_classes", m.n_classes);
  r.get("mlp_ratio", m.mlp_ratio);
  r.get_enum("pooling", m.pooling, {{"cls", vit::Pooling::ClassToken}, {"mean", vit::Pooling::Mean}});
  r.get("final_norm", m.final_norm);
}

void read_train(Reader& r, vit::TrainConfig& t) {
  r.get("epochs", t.epochs);
  r.get("learning_rate", t.learning_rate);
  r.get("batch_size", t.batch_size);
  r.get("weight_decay", t.weight_decay);
  r.get_enum("optimizer", t.optimizer, {{"adam", vit::Optimizer::Adam}, {"sgd", vit::Optimizer::Sgd}});
}

void read_stage(Reader& r, ModelStage& s) {
  r.section("model", [&](Reader& m) { read_model(m, s.model); });
  r.section("train", [&](Reader& t) { read_train(t, s.train); });
}

json model_json(const vit::ModelConfig& m) {
  return {{"image_size", m.image_size}, {"patch_size", m.patch_size}, {"channels", m.channels},
          {"n_layers", m.n_layers},     {"n_heads", m.n_heads},       {"embed_dim", m.embed_dim},
          {"n_classes", m.n_classes},   {"mlp_ratio", m.mlp_ratio},
          {"pooling", m.pooling == vit::Pooling::Mean ? "mean" : "cls"},
          {"final_norm", m.final_norm}};
}

json train_json(const vit::TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"weight_decay", t.weight_decay},
          {"optimizer", t.optimizer == vit::Optimizer::Sgd ? "sgd" : "adam"}};
}

}  // namespace

std::uint64_t ExperimentConfig::data_seed() const { return derive_seed(seed, 5); }
std::uint64_t ExperimentConfig::defense_seed() const { return derive_seed(seed, 6); }

void resolve_seeds(ExperimentConfig& cfg) {
  cfg.surrogate.train.seed = derive_seed(cfg.seed, 1);
  cfg.victim.train.seed = derive_seed(cfg.seed, 2);
  cfg.trigger.seed = derive_seed(cfg.seed, 3);
  cfg.poison.seed = derive_seed(cfg.seed, 4);
}

void validate(const ExperimentConfig& cfg) {
  const auto wrap = [](const std::string& where, auto&& f) {
    try {
      f();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("config: " + where + ": " + e.what());
    }
  };
  if (cfg.schema_version != kSchemaVersion) {
    throw ConfigError("config: schema_version: expected " + std::to_string(kSchemaVersion) +
                      ", got " + std::to_string(cfg.schema_version));
  }
  const auto& d = cfg.dataset;
  if (d.format != "synthetic" && d.format != "cifar10-binary" && d.format != "image-dir") {
    throw ConfigError("config: dataset.format: unknown format '" + d.format + "'");
  }
  if (d.format != "synthetic" && d.path.empty()) {
    throw ConfigError("config: dataset.path: required for format '" + d.format +
                      "' (or set MEGATRON_DATA_DIR)");
  }
  if (d.train_size < 1 || d.test_size < 1) throw ConfigError("config: dataset sizes must be >= 1");
  if (d.classes.size() < 2) throw ConfigError("config: dataset.classes: need at least two classes");
  const int n_classes = static_cast<int>(d.classes.size());
  wrap("surrogate.model", [&] { cfg.surrogate.model.validate(); });
  wrap("victim.model", [&] { cfg.victim.model.validate(); });
  wrap("surrogate.train", [&] { cfg.surrogate.train.validate(); });
  wrap("victim.train", [&] { cfg.victim.train.validate(); });
  for (const auto* m : {&cfg.surrogate.model, &cfg.victim.model}) {
    if (m->n_classes != n_classes) {
      throw ConfigError("config: model n_classes must equal the dataset class count " +
                        std::to_string(n_classes));
    }
    if (m->image_size != cfg.surrogate.model.image_size || m->channels != cfg.surrogate.model.channels) {
      throw ConfigError("config: surrogate and victim must share image_size and channels");
    }
  }
  if (cfg.surrogate.model.n_layers < 1) throw ConfigError("config: surrogate.model.n_layers must be >= 1");
  if (cfg.source_label == cfg.target_label) throw ConfigError("config: source_label equals target_label");
  for (int l : {cfg.source_label, cfg.target_label})
    if (l < 0 || l >= n_classes) throw ConfigError("config: label " + std::to_string(l) + " out of range");
  wrap("trigger", [&] { cfg.trigger.validate(cfg.surrogate.model); });
  wrap("poison", [&] { cfg.poison.validate(); });
  if (cfg.poison.k > cfg.trigger.width * cfg.trigger.height) {
    throw ConfigError("config: poison.k exceeds the trigger pixel count");
  }
  if (cfg.evaluation.sub_trigger_index < 0 || cfg.evaluation.sub_trigger_index >= cfg.poison.k) {
    throw ConfigError("config: evaluation.sub_trigger_index must lie in [0, K)");
  }
  const PixelPoint loc = cfg.eval_location();
  const int ps = cfg.victim.model.patch_size;
  for (const auto& [dx, dy] : cfg.evaluation.shifts) {
    const PixelRect r{loc.x + dx * ps, loc.y + dy * ps, cfg.trigger.width, cfg.trigger.height};
    if (!rect_inside(r, cfg.victim.model.image_size, cfg.victim.model.image_size)) {
      throw ConfigError("config: evaluation.shifts: offset (" + std::to_string(dx) + "," +
                        std::to_string(dy) + ") moves the trigger outside the image");
    }
  }
  if (!(cfg.defense.drop_rate >= 0.0 && cfg.defense.drop_rate < 1.0)) {
    throw ConfigError("config: defense.drop_rate must lie in [0,1)");
  }
}

EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  };
}

std::string interpolate(const std::string& text, const EnvLookup& env) {
  std::string out;
  for (std::size_t i = 0; i < text.size();) {
    if (text.compare(i, 2, "${") == 0) {
      const std::size_t end = text.find('}', i + 2);
      if (end == std::string::npos) throw ConfigError("config: unterminated ${ in '" + text + "'");
      const std::string name = text.substr(i + 2, end - i - 2);
      const auto v = env(name);
      if (!v) throw ConfigError("config: environment variable '" + name + "' is not set");
      out += *v;
      i = end + 1;
    } else {
      out += text[i++];
    }
  }
  return out;
}

ExperimentConfig parse(const json& input, const EnvLookup& env) {
  json doc = input;
  interpolate_all(doc, env);
  ExperimentConfig cfg;
  Reader r(doc, "");
  r.get("schema_version", cfg.schema_version);
  r.get("seed", cfg.seed);
  r.get("source_label", cfg.source_label);
  r.get("target_label", cfg.target_label);
  r.section("dataset", [&](Reader& d) {
    d.get("format", cfg.dataset.format);
    d.get("path", cfg.dataset.path);
    d.get("classes", cfg.dataset.classes);
    d.get("train_size", cfg.dataset.train_size);
    d.get("test_size", cfg.dataset.test_size);
    d.get_enum("attacker_pool", cfg.dataset.attacker_pool,
               {{"identical", AttackerPool::Identical}, {"disjoint", AttackerPool::Disjoint}});
    d.section("synthetic", [&](Reader& s) {
      s.get("image_size", cfg.dataset.synthetic.image_size);
      s.get("blob_amplitude", cfg.dataset.synthetic.blob_amplitude);
      s.get("noise", cfg.dataset.synthetic.noise);
    });
  });
  r.section("surrogate", [&](Reader& s) { read_stage(s, cfg.surrogate); });
  r.section("victim", [&](Reader& s) { read_stage(s, cfg.victim); });
  r.section("trigger", [&](Reader& t) {
    auto& c = cfg.trigger;
    t.get("width", c.width);
    t.get("height", c.height);
    t.get_point("location", c.location);
    t.get("gamma", c.gamma);
    t.get("lr", c.lr);
    t.get("max_iters", c.max_iters);
    t.get("tau", c.tau);
    t.get_enum("init_mode", c.init_mode,
               {{"uniform", trigger::InitMode::Uniform}, {"zeros", trigger::InitMode::Zeros}});
    t.get("diffusion_radius", c.diffusion_radius);
    t.get_enum("pcgrad_mode", c.pcgrad_mode,
               {{"standard", trigger::PcgradMode::Standard},
                {"literal", trigger::PcgradMode::Literal}});
    t.get_enum("score_normalization", c.score_normalization,
               {{"none", rollout::ScoreNormalization::None},
                {"sum-abs", rollout::ScoreNormalization::SumAbs}});
    t.get("clamp_rollout", c.clamp_rollout);
    t.get("phi_a", c.phi_a);
    t.get("phi_d", c.phi_d);
  });
  r.section("poison", [&](Reader& p) {
    auto& c = cfg.poison;
    p.get("epsilon", c.epsilon);
    p.get("steps", c.steps);
    p.get("lr", c.lr);
    p.get("tau", c.tau);
    p.get("poison_rate", c.poison_rate);
    p.get_optional("poison_count", c.poison_count);
    p.get("k", c.k);
    p.get_enum("mode", c.mode, {{"one-to-one", poison::Mode::OneToOne}, {"any-to-one", poison::Mode::AnyToOne}});
    p.get("quantize", c.quantize);
  });
  r.section("evaluation", [&](Reader& e) {
    e.get("sub_trigger_index", cfg.evaluation.sub_trigger_index);
    e.get_optional_point("location", cfg.evaluation.location);
    if (const json* v = e.find("shifts")) {
      cfg.evaluation.shifts.clear();
      if (!v->is_array()) Reader::fail("evaluation.shifts", "expected an array of [dx, dy]");
      for (const auto& s : *v) {
        if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer()) {
          Reader::fail("evaluation.shifts", "expected an array of [dx, dy] integer pairs");
        }
        cfg.evaluation.shifts.emplace_back(s[0].get<int>(), s[1].get<int>());
      }
    }
  });
  r.section("defense", [&](Reader& d) {
    d.get("enabled", cfg.defense.enabled);
    d.get("drop_rate", cfg.defense.drop_rate);
    d.get("shuffle", cfg.defense.shuffle);
  });
  r.finish();

  if (cfg.dataset.path.empty()) {
    if (const auto dir = env("MEGATRON_DATA_DIR")) cfg.dataset.path = *dir;
  }
  if (cfg.dataset.format == "synthetic") {
    for (auto* m : {&cfg.surrogate.model, &cfg.victim.model}) {
      if (m->image_size != cfg.dataset.synthetic.image_size) {
        throw ConfigError("config: model image_size must equal dataset.synthetic.image_size");
      }
    }
  }
  resolve_seeds(cfg);
  validate(cfg);
  return cfg;
}

ExperimentConfig load(const std::string& path, const EnvLookup& env) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse(doc, env);
}

json to_json(const ExperimentConfig& c) {
  json shifts = json::array();
  for (const auto& [dx, dy] : c.evaluation.shifts) shifts.push_back({dx, dy});
  const auto& t = c.trigger;
  const auto& p = c.poison;
  return {
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"source_label", c.source_label},
      {"target_label", c.target_label},
      {"dataset",
       {{"format", c.dataset.format},
        {"path", c.dataset.path},
        {"classes", c.dataset.classes},
        {"train_size", c.dataset.train_size},
        {"test_size", c.dataset.test_size},
        {"attacker_pool", c.dataset.attacker_pool == AttackerPool::Disjoint ? "disjoint" : "identical"},
        {"synthetic",
         {{"image_size", c.dataset.synthetic.image_size},
          {"blob_amplitude", c.dataset.synthetic.blob_amplitude},
          {"noise", c.dataset.synthetic.noise}}}}},
      {"surrogate", {{"model", model_json(c.surrogate.model)}, {"train", train_json(c.surrogate.train)}}},
      {"victim", {{"model", model_json(c.victim.model)}, {"train", train_json(c.victim.train)}}},
      {"trigger",
       {{"width", t.width},
        {"height", t.height},
        {"location", {t.location.x, t.location.y}},
        {"gamma", t.gamma},
        {"lr", t.lr},
        {"max_iters", t.max_iters},
        {"tau", t.tau},
        {"init_mode", t.init_mode == trigger::InitMode::Zeros ? "zeros" : "uniform"},
        {"diffusion_radius", t.diffusion_radius},
        {"pcgrad_mode", t.pcgrad_mode == trigger::PcgradMode::Literal ? "literal" : "standard"},
        {"score_normalization",
         t.score_normalization == rollout::ScoreNormalization::SumAbs ? "sum-abs" : "none"},
        {"clamp_rollout", t.clamp_rollout},
        {"phi_a", t.phi_a},
        {"phi_d", t.phi_d}}},
      {"poison",
       {{"epsilon", p.epsilon},
        {"steps", p.steps},
        {"lr", p.lr},
        {"tau", p.tau},
        {"poison_rate", p.poison_rate},
        {"poison_count", p.poison_count ? json(*p.poison_count) : json(nullptr)},
        {"k", p.k},
        {"mode", p.mode == poison::Mode::AnyToOne ? "any-to-one" : "one-to-one"},
        {"quantize", p.quantize}}},
      {"evaluation",
       {{"sub_trigger_index", c.evaluation.sub_trigger_index},
        {"location", c.evaluation.location ? json({c.evaluation.location->x, c.evaluation.location->y})
                                           : json(nullptr)},
        {"shifts", shifts}}},
      {"defense",
       {{"enabled", c.defense.enabled}, {"drop_rate", c.defense.drop_rate}, {"shuffle", c.defense.shuffle}}},
  };
}

}  // namespace megatron::config
