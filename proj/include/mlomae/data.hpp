#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlomae/nn.hpp"
#include "mlomae/types.hpp"

namespace mlomae {

// Pixels are [channels × side²] in [0, 1].
struct LabeledImage {
  Matrix pixels;
  Index label = 0;
};

struct DatasetBundle {
  std::vector<Matrix> d_u;
  std::vector<LabeledImage> d_tr;
  std::vector<LabeledImage> d_val;
  std::uint64_t split_seed = 0;
  // Ground-truth informative patch positions (synthetic data only).
  std::optional<IndexList> informative_set;
};

struct SynthSpec {
  Index side = 16;
  Index channels = 1;
  Index patch_size = 4;
  Index num_classes = 4;
  IndexList informative = {5, 6, 9, 10};
  double amplitude = 0.6;
  double noise = 0.1;
  Index samples_per_class = 200;

  Index num_patches() const { return (side / patch_size) * (side / patch_size); }
  void validate() const;
};

// Class templates: [num_classes × |S|·patch_pixels] entries in [-0.5, 0.5],
// a pure function of (spec, seed).
Matrix synth_templates(const SynthSpec& spec, std::uint64_t seed);
// All samples, grouped by class, before splitting.
std::vector<LabeledImage> synth_images(const SynthSpec& spec, std::uint64_t seed);
DatasetBundle synth_generate(const SynthSpec& spec, std::uint64_t seed);

// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
// 1024 red, 1024 green, 1024 blue bytes. `limit` keeps the first n records.
std::vector<LabeledImage> cifar10_read(const std::string& path,
                                       std::optional<std::size_t> limit = std::nullopt);

std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>> split_80_20(
    const std::vector<LabeledImage>& images, std::uint64_t seed);
// Split and set d_u to the training images.
DatasetBundle make_bundle(const std::vector<LabeledImage>& images, std::uint64_t seed);

enum class AugmentPolicy { None, Flip, FlipCrop };

struct Augmentation {
  AugmentPolicy policy = AugmentPolicy::None;
  Index pad = 4;
};

Matrix augment(const Matrix& image, Index side, Rng& rng, const Augmentation& aug);
// Mirrors columns of every channel.
Matrix hflip(const Matrix& image, Index side);
// Zero-pads by `pad` and takes the side×side window at (top, left) of the
// padded image.
Matrix crop_padded(const Matrix& image, Index side, Index pad, Index top, Index left);

// Seeded permutation of 0..n-1 by Fisher–Yates.
IndexList shuffled_indices(Index n, Rng& rng);
// Deterministic batch order for (seed, epoch); the last partial batch is kept.
std::vector<IndexList> batches(Index n, Index batch_size, std::uint64_t seed, long epoch);

// Round-trip through the tensor container.
void save_bundle(const std::string& path, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& path);

}  // namespace mlomae
