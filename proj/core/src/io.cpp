#include "megatron/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "megatron/errors.hpp"

namespace megatron::io {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

constexpr char kMagic[8] = {'M', 'G', 'T', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ArtifactError(path.string(), "truncated checkpoint: " + path.string());
  }
  return v;
}

std::string pooling_name(vit::Pooling p) { return p == vit::Pooling::Mean ? "mean" : "cls"; }

nlohmann::json record_json(const poison::PoisonRecord& r) {
  return {{"target_origin", r.target_origin},
          {"patched_source_id", r.patched_source_id},
          {"sub_trigger_index", r.sub_trigger_index},
          {"initial_feature_dist", r.initial_feature_dist},
          {"final_feature_dist", r.final_feature_dist},
          {"linf_used", r.linf_used},
          {"steps_used", r.steps_used}};
}

}  // namespace

void write_png(const fs::path& path, const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw InputError("write_png: only 1- or 3-channel images are supported");
  }
  const int h = image.height();
  const int w = image.width();
  const int c = image.channels();
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image.at(ch, y, x), 0.0, 1.0);
        buf[(static_cast<std::size_t>(y) * w + x) * c + ch] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw ArtifactError(path.string(), "cannot write PNG " + path.string() + ": " + msg);
  }
}

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ArtifactError(path.string(), "cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool grey = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = grey ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int c = grey ? 1 : 3;
  const int h = static_cast<int>(png.height);
  const int w = static_cast<int>(png.width);
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw ArtifactError(path.string(), "cannot decode PNG " + path.string() + ": " + msg);
  }
  Image img(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        img.at(ch, y, x) = u8_to_unit(buf[(static_cast<std::size_t>(y) * w + x) * c + ch]);
  return img;
}

nlohmann::json model_config_to_json(const vit::ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"embed_dim", c.embed_dim},
          {"n_classes", c.n_classes},   {"mlp_ratio", c.mlp_ratio},   {"pooling", pooling_name(c.pooling)},
          {"final_norm", c.final_norm}};
}

vit::ModelConfig model_config_from_json(const nlohmann::json& j) {
  vit::ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.pooling = j.at("pooling").get<std::string>() == "mean" ? vit::Pooling::Mean : vit::Pooling::ClassToken;
  c.final_norm = j.at("final_norm").get<bool>();
  return c;
}

void save_checkpoint(const fs::path& path, const vit::Model& model) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  const std::string cfg = model_config_to_json(model.config).dump();
  put(out, static_cast<std::uint64_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::uint32_t count = 0;
  vit::for_each_tensor(model.params, [&](const std::string&, const vit::Matrix&) { ++count; });
  put(out, count);
  vit::for_each_tensor(model.params, [&](const std::string& name, const vit::Matrix& m) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::uint64_t>(m.rows()));
    put(out, static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  write_text(path, out.str());
}

vit::Model load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(path.string(), "missing checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ArtifactError(path.string(), "not a megatron checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw ArtifactError(path.string(), "unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = get<std::uint64_t>(in, path);
  if (cfg_len > (1u << 20)) throw ArtifactError(path.string(), "corrupt checkpoint header");
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), static_cast<std::streamsize>(cfg_len))) {
    throw ArtifactError(path.string(), "truncated checkpoint: " + path.string());
  }
  vit::Model model;
  try {
    model.config = model_config_from_json(nlohmann::json::parse(cfg));
    model.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path.string(), std::string("corrupt checkpoint config: ") + e.what());
  }
  model.params = vit::init_params(model.config, 0);
  const auto count = get<std::uint32_t>(in, path);
  std::uint32_t expected = 0;
  vit::for_each_tensor(model.params, [&](const std::string&, vit::Matrix&) { ++expected; });
  if (count != expected) throw ArtifactError(path.string(), "checkpoint tensor count mismatch");
  vit::for_each_tensor(model.params, [&](const std::string& name, vit::Matrix& m) {
    const auto len = get<std::uint32_t>(in, path);
    std::string stored(len, '\0');
    in.read(stored.data(), len);
    const auto rows = get<std::uint64_t>(in, path);
    const auto cols = get<std::uint64_t>(in, path);
    if (stored != name || rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols())) {
      throw ArtifactError(path.string(), "checkpoint tensor '" + stored + "' does not match '" + name + "'");
    }
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
      throw ArtifactError(path.string(), "truncated checkpoint: " + path.string());
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ArtifactError(path.string(), "trailing bytes in checkpoint: " + path.string());
  }
  return model;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) {
    throw Error("sha256: digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(path.string(), "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError(path.string(), "cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw ArtifactError(path.string(), "short write to " + path.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ArtifactError(path.string(), "malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_score_grid(const fs::path& path, const rollout::ImportanceScores& s) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (int r = 0; r < s.grid_rows; ++r) {
    for (int c = 0; c < s.grid_cols; ++c) {
      if (c) os << ' ';
      os << s.scores(1 + r * s.grid_cols + c);
    }
    os << '\n';
  }
  write_text(path, os.str());
}

void write_score_heatmap(const fs::path& path, const rollout::ImportanceScores& s, int cell) {
  const vit::Vector patch = s.scores.tail(s.scores.size() - 1);
  const double lo = patch.minCoeff();
  const double hi = patch.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  Image img(1, s.grid_rows * cell, s.grid_cols * cell);
  for (int r = 0; r < s.grid_rows; ++r)
    for (int c = 0; c < s.grid_cols; ++c) {
      const double v = (patch(r * s.grid_cols + c) - lo) / span;
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) img.at(0, r * cell + y, c * cell + x) = v;
    }
  write_png(path, img);
}

void save_trigger(const fs::path& stem, const trigger::Trigger& t, const nlohmann::json& meta) {
  if (!on_u8_grid(t.pattern)) throw InputError("save_trigger: pattern is not on the 8-bit grid");
  nlohmann::json j = meta;
  j["location"] = {t.location.x, t.location.y};
  j["width"] = t.pattern.width();
  j["height"] = t.pattern.height();
  j["channels"] = t.pattern.channels();
  j["final_loss"] = t.final_loss ? nlohmann::json(*t.final_loss) : nlohmann::json(nullptr);
  j["iterations_used"] = t.iterations_used;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : t.history) hist.push_back({h.latent, h.diffusion, h.combined});
  j["loss_history"] = std::move(hist);
  fs::path png = stem;
  png += ".png";
  fs::path side = stem;
  side += ".json";
  if (t.pattern.channels() == 1 || t.pattern.channels() == 3) {
    write_png(png, t.pattern);
  } else {
    throw InputError("save_trigger: unsupported channel count");
  }
  j["pattern_sha256"] = sha256_file(png);
  write_json(side, j);
}

TriggerArtifact load_trigger(const fs::path& stem) {
  fs::path png = stem;
  png += ".png";
  fs::path side = stem;
  side += ".json";
  TriggerArtifact a;
  a.meta = read_json(side);
  try {
    if (sha256_file(png) != a.meta.at("pattern_sha256").get<std::string>()) {
      throw ArtifactError(png.string(), "trigger pattern hash mismatch: " + png.string());
    }
    a.trigger.pattern = read_png(png);
    const auto& loc = a.meta.at("location");
    a.trigger.location = {loc.at(0).get<int>(), loc.at(1).get<int>()};
    if (!a.meta.at("final_loss").is_null()) a.trigger.final_loss = a.meta.at("final_loss").get<double>();
    a.trigger.iterations_used = a.meta.at("iterations_used").get<int>();
    for (const auto& h : a.meta.at("loss_history")) {
      a.trigger.history.push_back({h.at(0).get<double>(), h.at(1).get<double>(), h.at(2).get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(side.string(), std::string("corrupt trigger sidecar: ") + e.what());
  }
  return a;
}

void save_dataset_dir(const fs::path& dir, const Dataset& samples,
                      const std::vector<std::size_t>& positions,
                      const std::vector<poison::PoisonRecord>& records) {
  if (positions.size() != records.size()) throw InputError("save_dataset_dir: positions/records differ");
  std::vector<int> record_of(samples.size(), -1);
  for (std::size_t r = 0; r < positions.size(); ++r) record_of.at(positions[r]) = static_cast<int>(r);
  fs::create_directories(dir / "images");
  std::string manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!on_u8_grid(s.pixels)) {
      throw InputError("save_dataset_dir: sample '" + s.id + "' is not on the 8-bit grid");
    }
    std::ostringstream name;
    name << "images/" << std::setw(5) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), s.pixels);
    nlohmann::json line = {{"id", s.id}, {"file", name.str()}, {"label", s.label},
                           {"is_poisoned", record_of[i] >= 0}};
    if (record_of[i] >= 0) line["record"] = record_json(records[record_of[i]]);
    manifest += line.dump() + "\n";
  }
  write_text(dir / "manifest.jsonl", manifest);
}

LoadedDataset load_dataset_dir(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.jsonl";
  if (!fs::exists(mpath)) throw ArtifactError(mpath.string(), "missing dataset manifest: " + mpath.string());
  std::istringstream lines(read_text(mpath));
  LoadedDataset out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImageSample s{read_png(dir / j.at("file").get<std::string>()), j.at("label").get<int>(),
                    j.at("id").get<std::string>()};
      if (j.at("is_poisoned").get<bool>()) {
        const auto& r = j.at("record");
        poison::PoisonRecord rec;
        rec.poisoned = s;
        rec.target_origin = r.at("target_origin").get<std::string>();
        rec.patched_source_id = r.at("patched_source_id").get<std::string>();
        rec.sub_trigger_index = r.at("sub_trigger_index").get<int>();
        rec.initial_feature_dist = r.at("initial_feature_dist").get<double>();
        rec.final_feature_dist = r.at("final_feature_dist").get<double>();
        rec.linf_used = r.at("linf_used").get<double>();
        rec.steps_used = r.at("steps_used").get<int>();
        out.positions.push_back(n);
        out.records.push_back(std::move(rec));
      }
      out.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError(mpath.string(), "corrupt manifest line " + std::to_string(n + 1) + ": " + e.what());
    }
    ++n;
  }
  return out;
}

StageLog::StageLog(const fs::path& path, bool echo) : echo_(echo) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
}

void StageLog::line(const std::string& text) {
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  std::ostringstream os;
  os << '[' << std::fixed << std::setprecision(2) << std::setw(8) << t << "s] " << text;
  if (out_) out_ << os.str() << '\n' << std::flush;
  if (echo_) std::cerr << os.str() << '\n';
}

}  // namespace megatron::io
