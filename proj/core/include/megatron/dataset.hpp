#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "megatron/image.hpp"

namespace megatron::data {

/// Two-texture synthetic corpus: each image is a smooth background with a
/// soft blob filled by a sinusoidal grating whose orientation depends on the
/// class. Pixels are snapped to the 8-bit grid. Deterministic in `seed`.
struct SyntheticSpec {
  int image_size = 32;
  int n_classes = 2;
  double blob_amplitude = 0.6;
  double noise = 0.05;
};
Dataset make_synthetic(std::size_t n, std::uint64_t seed, const SyntheticSpec& spec = {},
                       const std::string& id_prefix = "syn");

/// CIFAR-10 binary batches (`data_batch_{1..5}.bin` or `test_batch.bin`)
/// restricted to `classes`, relabelled 0..|classes|-1 in the given order.
/// At most `limit` samples are kept, in file order (0 keeps all).
Dataset load_cifar10_binary(const std::filesystem::path& dir, bool train,
                            const std::vector<int>& classes, std::size_t limit);

/// Samples with one of `labels`, relabelling is not applied.
Dataset filter_labels(const Dataset& d, const std::vector<int>& labels);
Dataset with_label(const Dataset& d, int label);

}  // namespace megatron::data
