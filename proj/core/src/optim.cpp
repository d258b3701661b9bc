#include "hardaware/optim.hpp"

#include <cmath>

#include "hardaware/errors.hpp"

namespace hardaware {

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be > 0, got " + std::to_string(lr));
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer.beta1 and optimizer.beta2 must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", kind == Kind::SGD ? "sgd" : "adam"},
          {"lr", lr},
          {"momentum", momentum},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  if (!j.is_object()) throw ConfigError("optimizer must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "kind") {
        const auto k = value.get<std::string>();
        if (k == "sgd") c.kind = Kind::SGD;
        else if (k == "adam") c.kind = Kind::Adam;
        else throw ConfigError("optimizer.kind must be 'sgd' or 'adam', got '" + k + "'");
      } else if (key == "lr") c.lr = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else throw ConfigError("unknown key 'optimizer." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("optimizer." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

Optimizer::Optimizer(std::vector<Parameter*> params, std::size_t slots, std::vector<std::string> slot_names)
    : params_(std::move(params)), slot_names_(std::move(slot_names)) {
  for (Parameter* p : params_) {
    std::vector<Tensor> s;
    for (std::size_t k = 0; k < slots; ++k) s.emplace_back(p->value.shape(), 0.0);
    state_.push_back(std::move(s));
  }
}

void Optimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Optimizer::save(Checkpoint& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    for (std::size_t k = 0; k < slot_names_.size(); ++k)
      out.tensors.push_back({prefix + "." + params_[i]->name + "." + slot_names_[k], state_[i][k]});
  out.meta[prefix] = {{"steps", steps_}};
}

void Optimizer::load(const Checkpoint& in, const std::string& prefix) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    for (std::size_t k = 0; k < slot_names_.size(); ++k) {
      const std::string name = prefix + "." + params_[i]->name + "." + slot_names_[k];
      const Tensor* t = in.find(name);
      if (!t) throw FormatError("checkpoint lacks optimizer slot '" + name + "'", 0);
      if (t->shape() != state_[i][k].shape()) throw FormatError("optimizer slot '" + name + "' has the wrong shape", 0);
      state_[i][k] = *t;
    }
  if (!in.meta.contains(prefix)) throw FormatError("checkpoint lacks optimizer metadata '" + prefix + "'", 0);
  steps_ = in.meta.at(prefix).at("steps").get<std::uint64_t>();
}

SgdMomentum::SgdMomentum(std::vector<Parameter*> params, double momentum, double weight_decay)
    : Optimizer(std::move(params), 1, {"velocity"}), momentum_(momentum), weight_decay_(weight_decay) {}

void SgdMomentum::step(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Tensor& v = state_[i][0];
    if (p.grad.empty()) continue;
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double g = p.grad[k] + weight_decay_ * p.value[k];
      v[k] = momentum_ * v[k] + g;
      p.value[k] -= lr * v[k];
    }
  }
  ++steps_;
}

Adam::Adam(std::vector<Parameter*> params, double beta1, double beta2, double eps, double weight_decay)
    : Optimizer(std::move(params), 2, {"m", "v"}), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  const double t = static_cast<double>(steps_ + 1);
  const double c1 = 1.0 - std::pow(beta1_, t), c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.empty()) continue;
    Tensor& m = state_[i][0];
    Tensor& v = state_[i][1];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = p.grad[k] + weight_decay_ * p.value[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
  ++steps_;
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg, std::vector<Parameter*> params) {
  cfg.validate();
  if (cfg.kind == OptimizerConfig::Kind::SGD) {
    return std::make_unique<SgdMomentum>(std::move(params), cfg.momentum, cfg.weight_decay);
  }
  return std::make_unique<Adam>(std::move(params), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
}

double StepSchedule::lr(std::uint64_t step) const {
  if (every == 0) return base;
  return base * std::pow(factor, static_cast<double>(step / every));
}

double gradient_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params)
    if (!p->grad.empty()) s += p->grad.squared_norm();
  return std::sqrt(s);
}

}  // namespace hardaware
