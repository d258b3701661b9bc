#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/checkpoint.hpp"
#include "hardaware/graph.hpp"

namespace hardaware {

struct OptimizerConfig {
  enum class Kind { SGD, Adam } kind = Kind::SGD;
  double lr = 0.01;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  /// Throws ConfigError on lr <= 0 or coefficients outside [0, 1).
  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys.
  static OptimizerConfig from_json(const nlohmann::json& j);
};

/// Owns per-parameter state for a fixed list of parameters and applies
/// updates from their accumulated gradients.
class Optimizer {
 public:
  virtual ~Optimizer() = default;

  /// One update with learning rate `lr`, then the step counter advances.
  virtual void step(double lr) = 0;
  void zero_grad();
  std::uint64_t steps() const { return steps_; }
  const std::vector<Parameter*>& parameters() const { return params_; }

  /// State tensors are stored as `<prefix>.<param>.<slot>`; the step
  /// counter goes into the checkpoint metadata under `prefix`.
  void save(Checkpoint& out, const std::string& prefix) const;
  /// Throws FormatError when a slot is missing or mis-shaped.
  void load(const Checkpoint& in, const std::string& prefix);

 protected:
  explicit Optimizer(std::vector<Parameter*> params, std::size_t slots, std::vector<std::string> slot_names);

  std::vector<Parameter*> params_;
  std::vector<std::vector<Tensor>> state_;  // [param][slot]
  std::vector<std::string> slot_names_;
  std::uint64_t steps_ = 0;
};

/// v <- mu v + g; x <- x - lr v. Weight decay adds wd * x to g.
class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(std::vector<Parameter*> params, double momentum, double weight_decay = 0.0);
  void step(double lr) override;

 private:
  double momentum_, weight_decay_;
};

/// Bias-corrected Adam.
class Adam final : public Optimizer {
 public:
  Adam(std::vector<Parameter*> params, double beta1, double beta2, double eps, double weight_decay = 0.0);
  void step(double lr) override;

 private:
  double beta1_, beta2_, eps_, weight_decay_;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg, std::vector<Parameter*> params);

/// lr(step) = base * factor^floor(step / every); constant when every == 0.
struct StepSchedule {
  double base = 0.01;
  double factor = 0.1;
  std::uint64_t every = 0;

  double lr(std::uint64_t step) const;
};

/// Euclidean norm of all accumulated gradients.
double gradient_norm(const std::vector<Parameter*>& params);

}  // namespace hardaware
