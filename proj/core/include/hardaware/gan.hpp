#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/data.hpp"
#include "hardaware/nets.hpp"
#include "hardaware/optim.hpp"

namespace hardaware {

struct GanTrainConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t batch_size = 64;
  std::size_t total_samples = 64000;
  double decorrelation_weight = 2e-6;
  /// Condition G (and the discriminators) on labels.
  bool conditional = true;
  /// Weight of the auxiliary classification loss when the spec has an aux head.
  double aux_weight = 1.0;
  std::size_t sample_every = 500;
  std::uint64_t seed = 0;

  std::size_t iterations() const { return total_samples / batch_size; }
  /// Throws ConfigError on a negative weight, zero samples or a batch of 1.
  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys.
  static GanTrainConfig from_json(const nlohmann::json& j);
};

/// Mean over feature channels i and latent pairs (j, k) of the squared cosine
/// similarity between w_ij and w_ik (zero on the diagonal), divided by
/// N_F * N_Z^2. `kernel` is the [(N_Z + K) x N_F x kh x kw] projection kernel;
/// w_ij is kernel[j, i, :, :] for j < latent_dim.
Var decorrelation_loss(Var kernel, std::size_t latent_dim);

struct CorrelationSummary {
  std::vector<double> edges;         // bins + 1 edges over [0, 1]
  std::vector<std::size_t> counts;   // per bin
  double mean = 0.0;                 // mean |cos| over channels and pairs j != k
};

CorrelationSummary kernel_correlation_histogram(const Tensor& kernel, std::size_t latent_dim, std::size_t bins = 20);

struct GanStepReport {
  std::uint64_t step = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  double decorrelation_loss = 0.0;
  double mean_kernel_correlation = 0.0;
  double aux_loss = 0.0;
};

/// Owns an MR-GAN and its two Adam optimizers.
class GanTrainer {
 public:
  GanTrainer(const MRGanSpec& spec, const GanTrainConfig& cfg);

  /// One discriminator update followed by one generator update.
  /// `real` holds one batch per rung (coarse to fine); `conditions` is
  /// [B x condition_dim] or empty; `classes` feeds the auxiliary head.
  /// Throws NumericError with diagnostics on a non-finite loss.
  GanStepReport step(const std::vector<Tensor>& real, const Tensor& conditions, const std::vector<int>& classes,
                     std::uint64_t step);

  MRGan& gan() { return *gan_; }
  Generator& generator() { return gan_->generator; }
  Optimizer& generator_optimizer() { return *g_opt_; }
  Optimizer& discriminator_optimizer() { return *d_opt_; }
  const GanTrainConfig& config() const { return cfg_; }

 private:
  MRGanSpec spec_;
  GanTrainConfig cfg_;
  std::unique_ptr<MRGan> gan_;
  std::unique_ptr<Optimizer> g_opt_, d_opt_;
};

/// Condition rows for a dataset: one-hot classes, the attribute matrix, or
/// empty when the spec has no condition input.
Tensor dataset_conditions(const LabeledImageSet& set, const std::vector<std::size_t>& indices, const MRGanSpec& spec);

/// Tiles [n x 1 x H x W] images in [-1, 1] into a binary PGM, `cols` per row.
void write_pgm_grid(const std::filesystem::path& path, const Tensor& images, std::size_t cols);

struct GanRunOptions {
  /// Curves CSV and sample grids go here when set.
  std::filesystem::path output_dir;
  std::function<void(const GanStepReport&)> on_step;
};

struct GanTrainResult {
  GeneratorBundle bundle;
  std::vector<GanStepReport> curve;
  /// Largest number of prefetched batches in flight.
  std::size_t prefetch_peak = 0;
};

/// Trains for cfg.iterations() steps on 32x32-top-rung images. Batches are
/// prepared by a background worker and handed over through a queue of
/// capacity 2. Writes gan_curves.csv and samples/step_*.pgm (8x8 tiles every
/// sample_every steps and at the end) when an output directory is given.
GanTrainResult train_gan(const LabeledImageSet& data, const MRGanSpec& spec, const GanTrainConfig& cfg,
                         const GanRunOptions& options = {});

}  // namespace hardaware
