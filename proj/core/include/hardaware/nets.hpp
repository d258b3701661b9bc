#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/checkpoint.hpp"
#include "hardaware/ops.hpp"

namespace hardaware {

// Layer descriptors ------------------------------------------------------------

struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};
struct DenseLayer {
  std::size_t out = 0;
};
struct PoolLayer {
  enum class Kind { Max, Average } kind = Kind::Max;
  std::size_t window = 2;
};
struct ActivationLayer {
  Activation activation;
};
struct FlattenLayer {};
struct GlobalPoolLayer {};
struct DropoutLayer {
  double p = 0.5;
};

using LayerDesc =
    std::variant<ConvLayer, DenseLayer, PoolLayer, ActivationLayer, FlattenLayer, GlobalPoolLayer, DropoutLayer>;

/// A trunk of layers producing a feature vector, followed by a categorical
/// head (`classes` logits) and/or a binary head (`attributes` logits).
struct ClassifierSpec {
  std::string name;
  Shape input;  // [C x H x W]
  std::vector<LayerDesc> layers;
  std::size_t classes = 0;
  std::size_t attributes = 0;

  std::size_t output_width() const { return classes + attributes; }
  /// Shape of the trunk output for a single sample; throws DimensionError
  /// when a layer does not fit its input.
  Shape feature_shape() const;
  std::size_t parameter_count() const;

  nlohmann::json to_json() const;
  static ClassifierSpec from_json(const nlohmann::json& j);
};

/// LeNet-5 with ReLU for 1x28x28 input: conv(6,5x5,pad 2), maxpool,
/// conv(16,5x5), maxpool, dense 120, dense 84, 10-way head.
ClassifierSpec build_lenet5();

/// Small trunk, two unpadded 3x3 convolutions with ReLU, global average
/// pooling and dropout(0.5), then heads of width `classes` and `attributes`.
ClassifierSpec build_multilabel_cnn(const Shape& input, std::size_t attributes, std::size_t classes,
                                    std::size_t width = 16);

/// Tensors that make up a model's state: trainable parameters plus buffers
/// such as batch-norm running statistics.
struct StateEntry {
  std::string name;
  Tensor* tensor;
};

void export_state(const std::vector<StateEntry>& entries, Checkpoint& out);
/// Throws FormatError when a tensor is missing or has a different shape.
void import_state(const std::vector<StateEntry>& entries, const Checkpoint& in);
/// FNV-1a over the raw bytes of every entry, in order.
std::uint64_t state_checksum(const std::vector<StateEntry>& entries);

struct ClassifierOutput {
  Var features;          // trunk output, [B x F]
  Var category_logits;   // [B x classes] or invalid
  Var attribute_logits;  // [B x attributes] or invalid
};

class Classifier {
 public:
  /// He-normal weights and zero biases drawn from `seed`.
  Classifier(ClassifierSpec spec, std::uint64_t seed);

  /// `dropout_rng` is only consulted in train mode and may be null otherwise.
  ClassifierOutput forward(Graph& g, Var x, Mode mode, std::mt19937_64* dropout_rng = nullptr);

  const ClassifierSpec& spec() const { return spec_; }
  std::vector<Parameter*> parameters();
  std::vector<StateEntry> state();
  std::size_t parameter_count() const;

 private:
  ClassifierSpec spec_;
  std::deque<Parameter> params_;
  std::vector<std::size_t> layer_param_;  // index into params_ per layer, or npos
  std::size_t category_head_ = 0, attribute_head_ = 0;
};

// MR-GAN -----------------------------------------------------------------------------

struct MRGanSpec {
  std::size_t latent_dim = 32;
  std::size_t condition_dim = 10;
  std::vector<std::size_t> resolutions{4, 8, 16, 32};
  std::vector<std::size_t> channels{128, 128, 64, 64};
  std::size_t image_channels = 1;
  double leaky_slope = 0.2;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  /// Extra categorical head on the top-rung discriminator (0 = none).
  std::size_t aux_classes = 0;
  /// Feed the tiled condition to the discriminators. Off for the
  /// auxiliary-classifier variant, whose discriminator must not see labels.
  bool condition_discriminator = true;

  /// Throws ConfigError unless the ladder starts at 4, doubles at every rung
  /// and has one channel count per rung.
  void validate() const;
  std::size_t rungs() const { return resolutions.size(); }

  nlohmann::json to_json() const;
  static MRGanSpec from_json(const nlohmann::json& j);
};

/// Name of the feature maps projected directly from the latent input.
inline constexpr const char* kInjectionPoint = "block0";

struct GeneratorOutput {
  std::vector<Var> images;  // one per rung, [B x image_channels x R x R], in [-1, 1]
  Var injection;            // block0 output, after any perturbation
};

class Generator {
 public:
  Generator(MRGanSpec spec, std::uint64_t seed);

  /// z [B x latent_dim], c [B x condition_dim]. When `injection_noise` is
  /// given it is added element-wise to the block0 feature maps.
  GeneratorOutput forward(Graph& g, Var z, Var c, Mode mode, const Tensor* injection_noise = nullptr);

  /// Shape of the block0 feature maps for a batch of `batch`.
  Shape injection_shape(std::size_t batch) const;

  /// Kernel of the latent/condition -> block0 transposed convolution,
  /// [(latent_dim + condition_dim) x channels[0] x 4 x 4].
  Parameter& projection_kernel() { return params_.front(); }

  const MRGanSpec& spec() const { return spec_; }
  std::vector<Parameter*> parameters();
  std::vector<StateEntry> state();

 private:
  // Indices into params_, so copies stay self-consistent.
  struct Block {
    std::size_t kernel, gamma, beta, head_kernel, head_bias;
    BatchNormState bn;
  };
  MRGanSpec spec_;
  std::deque<Parameter> params_;
  std::vector<Block> blocks_;
};

struct DiscriminatorOutput {
  Var logit;      // [B x 1]
  Var aux_logits; // [B x aux_classes] or invalid
};

/// Judges one rung. The condition vector is tiled over the image grid and
/// concatenated as extra input channels; `condition` is ignored when the
/// spec turns discriminator conditioning off.
class Discriminator {
 public:
  Discriminator(const MRGanSpec& spec, std::size_t rung, std::uint64_t seed);

  DiscriminatorOutput forward(Graph& g, Var image, Var condition, Mode mode);

  std::size_t rung() const { return rung_; }
  std::vector<Parameter*> parameters();
  std::vector<StateEntry> state();

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  struct Block {
    std::size_t kernel, bias, gamma, beta;  // gamma/beta are kNone for the input block
    BatchNormState bn;
    std::size_t stride, padding;
  };
  std::size_t rung_;
  std::size_t resolution_;
  bool conditioned_ = false;
  double slope_, momentum_, eps_;
  std::deque<Parameter> params_;
  std::vector<Block> blocks_;
  std::size_t out_weight_ = kNone, out_bias_ = kNone;
  std::size_t aux_weight_ = kNone, aux_bias_ = kNone;
};

/// Generator plus one discriminator per rung, initialized from one seed.
struct MRGan {
  MRGan(const MRGanSpec& spec, std::uint64_t seed);
  Generator generator;
  std::vector<Discriminator> discriminators;
};

/// A trained generator ready for complementary sampling.
struct GeneratorBundle {
  std::shared_ptr<Generator> generator;
  std::string injection_point = kInjectionPoint;
  double sigma_p = 0.0;

  void save(const std::filesystem::path& manifest) const;
  static GeneratorBundle load(const std::filesystem::path& manifest);
};

/// Draws z ~ N(0, I), perturbs the block0 feature maps with N(0, sigma_p^2)
/// noise and returns the top-rung images [B x image_channels x R x R].
/// sigma_p = 0 yields the ordinary conditional samples. Eval-mode batch norm;
/// draws are a pure function of `seed` and `index`. An unconditional
/// generator only reads the row count of `conditions`.
Tensor generate_complementary(const GeneratorBundle& bundle, const Tensor& conditions, std::uint64_t seed,
                              std::uint64_t index = 0);
/// Same, with an explicit perturbation scale.
Tensor generate_complementary(Generator& generator, const Tensor& conditions, double sigma_p,
                              std::uint64_t seed, std::uint64_t index = 0);

}  // namespace hardaware
