#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustkd/tensor.hpp"

namespace robustkd {

enum class Split { train, test };

/// Images stacked as (n, c, h, w) with one label per image.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;
  /// Sorted indices of trigger-patched examples (empty for clean data).
  std::vector<std::size_t> poisoned;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  Tensor image(std::size_t i) const;
  /// Checks shape/label invariants; throws ValidationError.
  void validate() const;
  /// First `count` examples (or all if fewer).
  Dataset head(std::size_t count) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

struct BlobParams {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  Shape image_shape{1, 16, 16};
  double noise_std = 0.4;
  std::uint64_t seed = 0;
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Class-conditional synthetic images: every class owns a fixed arrangement of
/// bright cells on a 4x4-pixel grid, perturbed by clipped Gaussian noise.
DataSplits generate_blobs(const BlobParams& params);

struct TriggerSpec {
  Tensor pattern;  // (c, th, tw)
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t target_label = 0;
  double blend = 1.0;

  void validate(const Shape& image_shape, std::size_t num_classes) const;
};

/// Solid square patch of ones in the bottom-right corner.
TriggerSpec corner_trigger(const Shape& image_shape, std::size_t size, std::size_t target_label);

Tensor apply_trigger(const Tensor& image, const TriggerSpec& spec);
/// Applies the trigger to every image of an (n, c, h, w) batch.
Tensor apply_trigger_batch(const Tensor& images, const TriggerSpec& spec);

/// Patches and relabels round(fraction * n) seeded-random training examples.
Dataset poison_dataset(const Dataset& dataset, const TriggerSpec& spec, double poison_fraction, std::uint64_t seed);

// Text format: header "classes=N shape=c,h,w", then one "label v0 v1 ..." line per example.
void save_dataset_text(const Dataset& dataset, const std::string& path);
Dataset load_dataset_text(const std::string& path, Split split = Split::train);

}  // namespace robustkd
