#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "brewlab/tensor.hpp"

namespace brewlab {

enum class Split { kTrain, kValidation };
std::string to_string(Split s);

/// Labelled images with pixels in [0, 1].
///
/// Pixels are stored channel-planar per image (N x C x H x W), the layout of
/// the CIFAR binary records and of the convolution kernels.
struct Dataset {
  Shape image_shape{3, 32, 32};
  std::size_t classes = 10;
  Split split = Split::kTrain;
  std::vector<double> pixels;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return numel(image_shape); }
  std::span<const double> image(std::size_t i) const;
  std::span<double> image(std::size_t i);
  Tensor image_tensor(std::size_t i) const;
  /// Stacks the selected images into [B, C, H, W].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Example indices per class, in canonical order.
  std::vector<std::vector<std::size_t>> by_class() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  void append(const Dataset& other);

  /// Throws FormatError when an invariant (pixel range, label range, unique
  /// ids, consistent sizes) does not hold.
  void validate() const;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};
/// Per-channel pixel mean and (population) standard deviation.
ChannelStats channel_stats(const Dataset& data);

/// Reads CIFAR-10 binary batch records (label byte + 3072 planar pixel bytes).
Dataset load_cifar_binary(const std::string& path, Split split = Split::kTrain,
                          std::uint64_t first_id = 0);
Dataset parse_cifar_binary(std::span<const unsigned char> bytes, Split split = Split::kTrain,
                           std::uint64_t first_id = 0);
/// Quantizes pixels with round-to-nearest and writes CIFAR-10 binary records.
void write_cifar_binary(const std::string& path, const Dataset& data);
std::vector<unsigned char> encode_cifar_binary(const Dataset& data);

struct CifarSubset {
  Dataset train;
  Dataset validation;
};
/// True when `dir` holds data_batch_1..5.bin and test_batch.bin.
bool cifar_available(const std::string& dir);
/// Loads the CIFAR-10 training batches (first `train_per_class` images of
/// each class) and the test batch (first `validation_per_class` per class).
CifarSubset load_cifar_dir(const std::string& dir, std::size_t train_per_class,
                           std::size_t validation_per_class);

struct SynthParams {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  /// Per-pixel Gaussian noise; 0 removes all within-class variation.
  double noise = 0.1;
  /// Maximum blob displacement in pixels.
  double jitter = 1.5;
  /// Scale of class-independent variation (background tint, blob contrast,
  /// one distractor blob per image).
  double nuisance = 1.0;
  std::size_t modes_per_class = 3;
  std::uint64_t seed = 0;

  friend bool operator==(const SynthParams&, const SynthParams&) = default;
};

/// Class-conditional Gaussian-blob images. Every class owns a few prototype
/// blob arrangements; an example perturbs one prototype's blobs and adds
/// pixel noise. Train and validation splits share the prototypes but use
/// disjoint random streams.
Dataset synth_dataset(const SynthParams& params, Split split = Split::kTrain);

/// One poison-target scenario: T validation targets of class y_t, and P
/// training images of class y_adv that the attacker may perturb.
struct PoisonCase {
  std::uint64_t seed = 0;
  double budget = 0.0;
  int target_class = 0;
  int adversarial_class = 0;
  std::vector<std::size_t> target_indices;  // into the validation split
  std::vector<std::uint64_t> target_ids;
  std::vector<std::size_t> poison_indices;  // into the training split, ascending
  std::vector<std::uint64_t> poison_ids;

  std::size_t poison_count() const { return poison_indices.size(); }
};

/// Number of poisons for a budget: floor(budget * N).
std::size_t poison_count_for(double budget, std::size_t n);

PoisonCase sample_case(const Dataset& train, const Dataset& validation, double budget,
                       std::size_t targets, std::uint64_t seed);

void write_case(std::ostream& out, const PoisonCase& c);
/// Reads a manifest and checks it against the datasets.
PoisonCase read_case(std::istream& in, const Dataset& train, const Dataset& validation);

}  // namespace brewlab
