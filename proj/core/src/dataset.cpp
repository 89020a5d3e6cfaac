#include "megatron/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"

namespace megatron::data {

Dataset make_synthetic(std::size_t n, std::uint64_t seed, const SyntheticSpec& spec,
                       const std::string& id_prefix) {
  if (spec.image_size < 4 || spec.n_classes < 1) throw InputError("make_synthetic: bad spec");
  Rng rng(seed);
  const int s = spec.image_size;
  const double half = s / 2.0;
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % spec.n_classes);
    double bg[3];
    for (double& b : bg) b = rng.uniform(0.2, 0.8);
    const double gx = rng.uniform(-0.01, 0.01);
    const double gy = rng.uniform(-0.01, 0.01);
    const double angle = rng.uniform(-0.5, 0.5) + label * std::numbers::pi / spec.n_classes;
    const double freq = rng.uniform(0.5, 1.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double cx = rng.uniform(s / 4.0, 3.0 * s / 4.0);
    const double cy = rng.uniform(s / 4.0, 3.0 * s / 4.0);
    const double radius = rng.uniform(s * 0.1875, s * 0.375);
    double colour[3];
    for (double& c : colour) c = rng.uniform();
    const double ca = std::cos(angle), sa = std::sin(angle);

    Image img(3, s, s);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double base = bg[c] + gx * (x - half) + gy * (y - half);
          const double tex = 0.5 + 0.5 * std::sin(freq * (ca * x + sa * y) + phase);
          const double m = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * radius * radius));
          const double a = spec.blob_amplitude * m;
          const double v = base * (1.0 - a) + a * tex * colour[c] + spec.noise * rng.normal();
          img.at(c, y, x) = v;
        }
    std::ostringstream id;
    id << id_prefix << '-' << std::setw(5) << std::setfill('0') << i;
    out.push_back({quantize_u8(clip01(std::move(img))), label, id.str()});
  }
  return out;
}

Dataset load_cifar10_binary(const std::filesystem::path& dir, bool train,
                            const std::vector<int>& classes, std::size_t limit) {
  if (classes.empty()) throw InputError("load_cifar10_binary: empty class subset");
  std::vector<std::string> files;
  if (train) {
    for (int b = 1; b <= 5; ++b) files.push_back("data_batch_" + std::to_string(b) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  constexpr int kSide = 32;
  constexpr std::size_t kRecord = 1 + 3 * kSide * kSide;
  Dataset out;
  std::vector<unsigned char> rec(kRecord);
  std::size_t seen = 0;
  for (const auto& f : files) {
    const auto path = dir / f;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError(path.string(), "missing CIFAR-10 batch: " + path.string());
    while (in.read(reinterpret_cast<char*>(rec.data()), kRecord)) {
      const std::size_t index = seen++;
      const auto it = std::find(classes.begin(), classes.end(), static_cast<int>(rec[0]));
      if (it == classes.end()) continue;
      Image img(3, kSide, kSide);
      for (std::size_t k = 0; k < kRecord - 1; ++k) img.raw()[k] = u8_to_unit(rec[k + 1]);
      std::ostringstream id;
      id << (train ? "cifar-train-" : "cifar-test-") << std::setw(5) << std::setfill('0') << index;
      out.push_back({std::move(img), static_cast<int>(it - classes.begin()), id.str()});
      if (limit && out.size() == limit) return out;
    }
  }
  return out;
}

Dataset filter_labels(const Dataset& d, const std::vector<int>& labels) {
  Dataset out;
  for (const auto& s : d)
    if (std::find(labels.begin(), labels.end(), s.label) != labels.end()) out.push_back(s);
  return out;
}

Dataset with_label(const Dataset& d, int label) { return filter_labels(d, {label}); }

}  // namespace megatron::data
