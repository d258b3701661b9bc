#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/data.hpp"
#include "hardaware/gan.hpp"
#include "hardaware/losses.hpp"
#include "hardaware/metrics.hpp"
#include "hardaware/nets.hpp"
#include "hardaware/optim.hpp"
#include "hardaware/registry.hpp"

namespace hardaware {

// Configuration ------------------------------------------------------------------------

struct DatasetConfig {
  enum class Kind { Mnist, Synthetic } kind = Kind::Mnist;
  std::string mnist_dir;
  /// Training subset; both zero keeps the full training split.
  std::size_t n_total = 0;
  std::size_t n_per_class = 0;
  std::uint64_t subset_seed = 0;
  /// MNIST: evaluate on the first `test_limit` test images (0 = all 10 000).
  std::size_t test_limit = 0;
  /// Synthetic training set. The held-out set uses the same spec with a
  /// different seed, so both splits share the per-attribute counts.
  SyntheticSpec synthetic;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct ModelConfig {
  enum class Kind { LeNet5, MultilabelCnn } kind = Kind::LeNet5;
  std::size_t width = 16;  // multilabel CNN only

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LossSection {
  enum class Kind { Habp, CrossEntropy, Focal, WeightedFocal, Ohem, WeightedCE } kind = Kind::Habp;
  enum class Base { CrossEntropy, WeightedCEA, WeightedCEB } base = Base::CrossEntropy;
  enum class Deact { Multiclass, Binary, Weighted } deact = Deact::Weighted;
  double gamma = 1.2;
  double lambda = 1e-4;
  double threshold = -4.6;
  double ohem_ratio = 0.17;

  void validate() const;
  nlohmann::json to_json() const;
  static LossSection from_json(const nlohmann::json& j);
};

struct TrainingSection {
  std::size_t total_samples = 500000;
  std::size_t batch_size = 64;
  /// Iterations between deactivation steps.
  std::size_t deact_every = 20;
  /// Spread the deactivation term over every step with weight lambda / deact_every.
  bool amortize = false;
  /// lr(step) = optimizer.lr * factor^floor(step / every); every = 0 keeps it constant.
  double lr_factor = 0.1;
  std::uint64_t lr_every = 0;

  std::size_t iterations() const { return total_samples / batch_size; }
  nlohmann::json to_json() const;
  static TrainingSection from_json(const nlohmann::json& j);
};

struct DeactSection {
  /// Generator bundle manifest; empty disables the deactivation branch.
  std::string bundle;
  double sigma_p = 1.5;
  /// Hard labels drawn per synthetic sample.
  std::size_t k = 3;
  double registry_ema = 0.5;

  nlohmann::json to_json() const;
  static DeactSection from_json(const nlohmann::json& j);
};

struct RunSection {
  std::uint64_t seed = 0;
  /// Steps between held-out evaluations; 0 evaluates at the end only.
  std::uint64_t eval_every = 0;
  /// Steps between checkpoints; 0 disables them.
  std::uint64_t checkpoint_every = 0;
  std::string output_dir;
  /// Checkpoint manifest to resume from.
  std::string resume_from;

  nlohmann::json to_json() const;
  static RunSection from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  LossSection loss;
  OptimizerConfig optimizer;
  TrainingSection training;
  DeactSection deact;
  RunSection run;

  bool has_bundle() const { return !deact.bundle.empty(); }
  /// Throws ConfigError on inconsistent sections or unreadable paths.
  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys at every level.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON with the output and resume paths removed.
  std::uint64_t hash() const;
};

/// Applies `a.b.c=value` overrides to a fully populated config object. The
/// value is parsed as JSON when possible and as a string otherwise. Throws
/// ConfigError for a path that does not exist or a malformed override.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

/// Reads a JSON file; throws ConfigError naming the path when it is missing
/// or malformed.
nlohmann::json read_json_file(const std::filesystem::path& path);

// Data -------------------------------------------------------------------------------

struct ExperimentData {
  LabeledImageSet train;
  LabeledImageSet test;
};

/// MNIST at 28x28 or the synthetic 32x32 splits.
ExperimentData load_experiment_data(const DatasetConfig& cfg);

// Training ---------------------------------------------------------------------------

struct StepReport {
  std::uint64_t step = 0;
  double base_loss = 0.0;            // L_HABP or the configured base variant
  std::optional<double> deact_loss;  // L_SC, present at deactivation steps
  double deact_weight = 0.0;         // lambda applied to L_SC this step
  double total = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct ClassifierOutputs {
  Tensor category_logits;   // [n x C] or empty
  Tensor attribute_logits;  // [n x N] or empty
  Tensor features;          // [n x F]
};

/// Model, optimizer and registry for one classification run.
class ClassifierTrainer {
 public:
  /// `bundle` may be null when the config has no deactivation branch.
  ClassifierTrainer(const ExperimentConfig& cfg, const LabeledImageSet& train,
                    std::shared_ptr<const GeneratorBundle> bundle);

  /// Forward the real batch, base loss, registry update, optional
  /// deactivation branch, backward and optimizer update.
  StepReport train_step(const Batch& real, std::uint64_t step);

  /// Logits for a whole set in eval mode, in batches.
  ClassifierOutputs predict(const Tensor& images, std::size_t batch = 500);

  Classifier& model() { return *model_; }
  Optimizer& optimizer() { return *optimizer_; }
  HardLabelRegistry& registry() { return registry_; }
  const ExperimentConfig& config() const { return cfg_; }

  /// Model state, optimizer state, registry and config hash at `step`.
  Checkpoint checkpoint(std::uint64_t step);
  /// Returns the step stored in the checkpoint. Throws ConfigError when the
  /// config hash differs.
  std::uint64_t restore(const Checkpoint& ck);

 private:
  BatchOutput real_output(const ClassifierOutput& out, const Batch& real) const;
  Var base_loss(const BatchOutput& batch) const;
  Var deact_branch(Graph& g, std::uint64_t step);

  ExperimentConfig cfg_;
  bool categorical_;  // MNIST: classes act as one-hot attributes
  std::unique_ptr<Classifier> model_;
  std::unique_ptr<Optimizer> optimizer_;
  StepSchedule schedule_;
  HardLabelRegistry registry_;
  std::shared_ptr<const GeneratorBundle> bundle_;
  BaseLossSpec base_spec_;
  std::vector<double> priors_;
  std::size_t batch_size_ = 0;
};

/// Held-out metrics. MNIST: test_error, top1_accuracy. Synthetic: top3_recall,
/// balanced_accuracy, low_decile_balanced_accuracy, low_decile_mean_probability,
/// count_probability_correlation.
std::map<std::string, double> evaluate_split(ClassifierTrainer& trainer, const LabeledImageSet& set);

/// Attributes in the lowest decile of positive count (ceil(N/10) of them),
/// ties toward the lower index.
std::vector<std::size_t> lowest_decile_attributes(const std::vector<std::size_t>& positive_counts);

struct ExperimentResult {
  std::map<std::string, double> metrics;  // final held-out metrics
  std::uint64_t steps = 0;
  /// FNV-1a over every batch's sample indices, in step order.
  std::uint64_t batch_digest = 0;
  std::uint64_t state_checksum = 0;
  std::vector<StepReport> reports;  // steps run by this call
  std::filesystem::path output_dir;
};

struct RunHooks {
  std::function<void(const StepReport&)> on_step;
  /// Stop after this many total steps (simulates an interruption).
  std::optional<std::uint64_t> stop_after;
};

/// Full training loop: prefetched batches, per-step CSV (steps.csv),
/// periodic and final evaluation (metrics.csv), checkpoints, resume.
/// Writes resolved_config.json into the output directory when one is set.
ExperimentResult run_classifier_experiment(const ExperimentConfig& cfg, const RunHooks& hooks = {});

// Ablation -------------------------------------------------------------------------------

struct AblationRow {
  std::string arm;
  ExperimentResult result;
};

/// The five arms Baseline / Deact only / HABP only / FL+Deact / HABP+Deact on
/// the synthetic dataset with shared seeds. `base` must name a bundle.
/// Writes ablation.csv with one row per arm.
std::vector<AblationRow> run_ablation_suite(const ExperimentConfig& base);

inline constexpr const char* kAblationHeader =
    "arm,loss,deact,top3_recall,balanced_accuracy,low_decile_balanced_accuracy,low_decile_mean_probability,"
    "count_probability_correlation,batch_digest";

// GAN experiments --------------------------------------------------------------------

struct GanExperimentConfig {
  DatasetConfig dataset;
  MRGanSpec gan;
  GanTrainConfig train;
  std::string output_dir;

  void validate() const;
  nlohmann::json to_json() const;
  static GanExperimentConfig from_json(const nlohmann::json& j);
};

/// Images at the GAN's top resolution: MNIST padded to 32x32, synthetic as is.
LabeledImageSet gan_training_set(const DatasetConfig& cfg);

/// Trains on the configured subset and saves bundle.json into output_dir.
GanTrainResult run_gan_experiment(const GanExperimentConfig& cfg);

/// Frechet distance between Gaussian fits of `embedder` trunk features of
/// real and generated images (same spatial size as the embedder's input).
double fid_proxy(Classifier& embedder, const Tensor& real, const Tensor& generated);

}  // namespace hardaware
