#pragma once

// Image classification datasets: seeded synthetic gratings, IDX and CIFAR-10
// binary readers, per-channel standardization and train-time augmentation.

#include <cstdint>
#include <string>
#include <vector>

#include "fnas/rng.hpp"
#include "fnas/tensor.hpp"

namespace fnas {

struct Dataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string name;
  std::string provenance;    // generator seed or file digest
  std::vector<double> mean;  // per-channel standardization applied, empty if none
  std::vector<double> stddev;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  /// Throws InputError unless N = |labels|, labels ∈ [0, K) and values are finite.
  void validate() const;
  /// Rows in the given order (standardization record carried over).
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Images and labels of rows [first, first + count) of `order`.
  Tensor batch_images(const std::vector<std::size_t>& order, std::size_t first, std::size_t count) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& order, std::size_t first, std::size_t count) const;
};

enum class Difficulty { easy, medium, hard };
Difficulty parse_difficulty(const std::string& name);
const char* difficulty_name(Difficulty d);

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t samples = 2000;
  std::size_t size = 16;  // H = W
  std::size_t channels = 3;
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::medium;
};

/// Oriented gratings with random phase, frequency and colour plus noise; the
/// class is the orientation band. Random phase makes every class mean the
/// same flat image, so raw pixels are not linearly separable. Classes are
/// balanced (the first N mod K classes get one extra sample). Values in [0, 1].
Dataset synth_generate(const SynthSpec& spec);

/// IDX unsigned-byte files (images magic 0x00000803, labels 0x00000801).
/// Pixels scale to [0, 1]; classes = max label + 1. Throws FormatError with
/// the byte offset on bad magic, bad dimensions or truncation.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
/// Derives the labels file by replacing "images-idx3" with "labels-idx1".
Dataset load_idx(const std::string& images_path);

/// CIFAR-10 binary records (1 label byte + 3072 channel-planar pixels). A
/// directory loads data_batch_1..5.bin; a file loads that batch alone.
Dataset load_cifar_binary(const std::string& path);

/// Per-channel mean and standard deviation of the images.
void compute_standardization(const Dataset& ds, std::vector<double>& mean, std::vector<double>& stddev);
/// (x − mean)/stddev per channel, recording the statistics in the dataset.
void apply_standardization(Dataset& ds, const std::vector<double>& mean, const std::vector<double>& stddev);

// --- augmentation (one image [C, H, W] in a flat buffer) ------------------------

struct AugmentPolicy {
  std::size_t pad = 4;     // pad-and-crop margin, 0 disables
  double flip_prob = 0.5;  // horizontal flip probability
  std::size_t cutout = 0;  // cutout square side, 0 disables
};

void flip_horizontal(double* image, std::size_t c, std::size_t h, std::size_t w);
/// Zero-pads by `pad` and crops back to H×W at (top, left) in padded coordinates;
/// (pad, pad) is the identity.
void pad_and_crop(double* image, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t top,
                  std::size_t left);
/// Zeroes one length×length square centred uniformly over the image, clipped at borders.
void cutout(double* image, std::size_t c, std::size_t h, std::size_t w, std::size_t length, Rng& rng);
/// Tensor form of cutout for a single [C, H, W] image.
Tensor cutout(const Tensor& image, std::size_t length, Rng& rng);

/// Augmented copy of a batch [N, C, H, W]; draws per image: crop offsets, flip, cutout.
Tensor augment_batch(const Tensor& images, const AugmentPolicy& policy, Rng& rng);

}  // namespace fnas
