#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/tensor.hpp"

namespace hardaware {

/// Images in [-1, 1] with categorical and/or multi-label annotations.
struct LabeledImageSet {
  Tensor images;               // [n x C x H x W]
  std::vector<int> classes;    // n entries, or empty
  std::size_t num_classes = 0;
  Tensor attributes;           // [n x N] in {0, 1}, or empty
  std::string split;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  std::size_t attribute_count() const { return attributes.empty() ? 0 : attributes.dim(1); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::vector<std::size_t> positive_counts() const;
  std::vector<std::size_t> negative_counts() const;
  /// Throws DimensionError / LabelError when the invariants do not hold.
  void validate() const;
};

/// Parses an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels map linearly from [0, 255] to [-1, 1].
LabeledImageSet load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Inverse of load_mnist_idx.
void save_mnist_idx(const LabeledImageSet& set, const std::filesystem::path& images,
                    const std::filesystem::path& labels);

/// Zero-pads (value -1, the background) `pad` pixels on every side.
LabeledImageSet pad_images(const LabeledImageSet& set, std::size_t pad);
/// Removes `pad` pixels from every side of a [B x C x H x W] tensor.
Tensor crop_images(const Tensor& images, std::size_t pad);

struct SubsetRequest {
  std::size_t n_total = 0;      // used when n_per_class == 0
  std::size_t n_per_class = 0;  // stratified by class when nonzero
};

/// Deterministic sample without replacement; returned indices ascend.
std::vector<std::size_t> subset_indices(const LabeledImageSet& set, const SubsetRequest& request, std::uint64_t seed);
LabeledImageSet subset(const LabeledImageSet& set, const SubsetRequest& request, std::uint64_t seed);
LabeledImageSet select(const LabeledImageSet& set, const std::vector<std::size_t>& indices);

/// Synthetic imbalanced multi-label images. Attribute j is a separable +/-1
/// texture with period at most 8 pixels, added to a 32x32 canvas; distinct
/// textures are orthogonal. The number of images carrying attribute j is
/// max_count * (j+1)^-alpha rounded and clipped to [min_count, max_count].
struct SyntheticSpec {
  std::size_t attributes = 32;
  std::size_t count = 4096;
  double alpha = 1.5;
  std::size_t max_count = 2048;
  std::size_t min_count = 8;
  double amplitude = 0.2;
  double noise = 0.05;  // uniform in [-noise, noise]
  std::uint64_t seed = 0;

  /// Positive count of every attribute, before any sampling.
  std::vector<std::size_t> expected_counts() const;
  /// Throws ConfigError when the counts cannot be realized.
  void validate() const;

  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

inline constexpr std::size_t kSyntheticSide = 32;
inline constexpr std::size_t kMaxSyntheticAttributes = 63;

LabeledImageSet make_synthetic_multilabel(const SyntheticSpec& spec);
/// The +/-1 texture of attribute j, [32 x 32].
Tensor synthetic_pattern(std::size_t attribute);
/// Projects each image onto every attribute texture and thresholds at half
/// the strongest response; recovers the labels of a synthetic set.
Tensor detect_synthetic_attributes(const Tensor& images, std::size_t attributes);

/// Save/load in the checkpoint format (manifest + blob).
void save_image_set(const LabeledImageSet& set, const std::filesystem::path& manifest,
                    const nlohmann::json& meta = nlohmann::json::object());
LabeledImageSet load_image_set(const std::filesystem::path& manifest);

struct Batch {
  std::vector<std::size_t> indices;
  Tensor images;
  std::vector<int> classes;
  Tensor attributes;
};

/// Endless stream of shuffled epochs. Position p of the stream is element
/// p mod n of the permutation for epoch p / n, so any step can be produced
/// without replaying earlier ones.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> indices(std::uint64_t step) const;
  std::size_t batch_size() const { return batch_size_; }
  std::size_t count() const { return count_; }
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;

 private:
  std::size_t count_, batch_size_;
  std::uint64_t seed_;
};

Batch gather(const LabeledImageSet& set, const std::vector<std::size_t>& indices);

/// Rungs from coarsest to finest: the input is the last rung and every
/// coarser rung is the 2x2 average pool of the next.
std::vector<Tensor> build_pyramid(const Tensor& top, std::size_t rungs);

}  // namespace hardaware
