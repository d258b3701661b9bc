#include "hardaware/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "hardaware/bounded_queue.hpp"
#include "hardaware/errors.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

namespace {

using nlohmann::json;

// Keys accepted in a section are exactly the keys its defaults serialize.
void reject_unknown(const json& j, const json& defaults, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <class T>
T field(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + where + "." + key + "' has the wrong type: " + j.at(key).dump());
  }
}

template <class E>
struct EnumName {
  E value;
  const char* name;
};

template <class E, std::size_t K>
const char* enum_to_string(E v, const EnumName<E> (&names)[K]) {
  for (const auto& n : names)
    if (n.value == v) return n.name;
  return "?";
}

template <class E, std::size_t K>
E enum_from_json(const json& j, const char* key, E fallback, const EnumName<E> (&names)[K], const std::string& where) {
  if (!j.contains(key)) return fallback;
  const std::string s = field<std::string>(j, key, "", where);
  for (const auto& n : names)
    if (s == n.name) return n.value;
  std::string options;
  for (const auto& n : names) options += std::string(options.empty() ? "" : ", ") + n.name;
  throw ConfigError("'" + where + "." + key + "' must be one of " + options + ", got '" + s + "'");
}

constexpr EnumName<DatasetConfig::Kind> kDatasetKinds[] = {{DatasetConfig::Kind::Mnist, "mnist"},
                                                           {DatasetConfig::Kind::Synthetic, "synthetic"}};
constexpr EnumName<ModelConfig::Kind> kModelKinds[] = {{ModelConfig::Kind::LeNet5, "lenet5"},
                                                       {ModelConfig::Kind::MultilabelCnn, "multilabel_cnn"}};
constexpr EnumName<LossSection::Kind> kLossKinds[] = {
    {LossSection::Kind::Habp, "habp"},         {LossSection::Kind::CrossEntropy, "ce"},
    {LossSection::Kind::Focal, "focal"},       {LossSection::Kind::WeightedFocal, "weighted_focal"},
    {LossSection::Kind::Ohem, "ohem"},         {LossSection::Kind::WeightedCE, "weighted_ce"}};
constexpr EnumName<LossSection::Base> kBases[] = {{LossSection::Base::CrossEntropy, "ce"},
                                                  {LossSection::Base::WeightedCEA, "weighted_ce_a"},
                                                  {LossSection::Base::WeightedCEB, "weighted_ce_b"}};
constexpr EnumName<LossSection::Deact> kDeacts[] = {{LossSection::Deact::Multiclass, "multiclass"},
                                                    {LossSection::Deact::Binary, "binary"},
                                                    {LossSection::Deact::Weighted, "weighted"}};

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const char* const kMnistFiles[] = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                                   "t10k-labels-idx1-ubyte"};

}  // namespace

// Configuration ------------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (n_total > 0 && n_per_class > 0) throw ConfigError("dataset: set n_total or n_per_class, not both");
  if (kind == Kind::Mnist) {
    if (mnist_dir.empty()) throw ConfigError("dataset.mnist_dir is required for MNIST");
    for (const char* f : kMnistFiles) {
      const auto p = std::filesystem::path(mnist_dir) / f;
      if (!std::filesystem::exists(p)) throw ConfigError("MNIST file not found: " + p.string());
    }
  } else {
    if (n_total > 0 || n_per_class > 0) throw ConfigError("dataset: subsets apply to MNIST only");
    synthetic.validate();
  }
}

json DatasetConfig::to_json() const {
  return {{"kind", enum_to_string(kind, kDatasetKinds)},
          {"mnist_dir", mnist_dir},
          {"n_total", n_total},
          {"n_per_class", n_per_class},
          {"subset_seed", subset_seed},
          {"test_limit", test_limit},
          {"synthetic", synthetic.to_json()}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  const std::string w = "dataset";
  DatasetConfig c;
  reject_unknown(j, c.to_json(), w);
  c.kind = enum_from_json(j, "kind", c.kind, kDatasetKinds, w);
  c.mnist_dir = field(j, "mnist_dir", c.mnist_dir, w);
  c.n_total = field(j, "n_total", c.n_total, w);
  c.n_per_class = field(j, "n_per_class", c.n_per_class, w);
  c.subset_seed = field(j, "subset_seed", c.subset_seed, w);
  c.test_limit = field(j, "test_limit", c.test_limit, w);
  if (j.contains("synthetic")) {
    reject_unknown(j.at("synthetic"), c.synthetic.to_json(), w + ".synthetic");
    c.synthetic = SyntheticSpec::from_json(j.at("synthetic"));
  }
  return c;
}

json ModelConfig::to_json() const { return {{"kind", enum_to_string(kind, kModelKinds)}, {"width", width}}; }

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  reject_unknown(j, c.to_json(), "model");
  c.kind = enum_from_json(j, "kind", c.kind, kModelKinds, "model");
  c.width = field(j, "width", c.width, "model");
  if (c.width == 0) throw ConfigError("model.width must be positive");
  return c;
}

void LossSection::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("loss.gamma must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss.lambda must be >= 0");
  if (!std::isfinite(threshold)) throw ConfigError("loss.threshold must be finite");
  if (!(ohem_ratio > 0.0 && ohem_ratio <= 1.0)) throw ConfigError("loss.ohem_ratio must lie in (0, 1]");
}

json LossSection::to_json() const {
  return {{"kind", enum_to_string(kind, kLossKinds)},
          {"base", enum_to_string(base, kBases)},
          {"deact", enum_to_string(deact, kDeacts)},
          {"gamma", gamma},
          {"lambda", lambda},
          {"threshold", threshold},
          {"ohem_ratio", ohem_ratio}};
}

LossSection LossSection::from_json(const json& j) {
  const std::string w = "loss";
  LossSection c;
  reject_unknown(j, c.to_json(), w);
  c.kind = enum_from_json(j, "kind", c.kind, kLossKinds, w);
  c.base = enum_from_json(j, "base", c.base, kBases, w);
  c.deact = enum_from_json(j, "deact", c.deact, kDeacts, w);
  c.gamma = field(j, "gamma", c.gamma, w);
  c.lambda = field(j, "lambda", c.lambda, w);
  c.threshold = field(j, "threshold", c.threshold, w);
  c.ohem_ratio = field(j, "ohem_ratio", c.ohem_ratio, w);
  c.validate();
  return c;
}

json TrainingSection::to_json() const {
  return {{"total_samples", total_samples}, {"batch_size", batch_size}, {"deact_every", deact_every},
          {"amortize", amortize},           {"lr_factor", lr_factor},   {"lr_every", lr_every}};
}

TrainingSection TrainingSection::from_json(const json& j) {
  const std::string w = "training";
  TrainingSection c;
  reject_unknown(j, c.to_json(), w);
  c.total_samples = field(j, "total_samples", c.total_samples, w);
  c.batch_size = field(j, "batch_size", c.batch_size, w);
  c.deact_every = field(j, "deact_every", c.deact_every, w);
  c.amortize = field(j, "amortize", c.amortize, w);
  c.lr_factor = field(j, "lr_factor", c.lr_factor, w);
  c.lr_every = field(j, "lr_every", c.lr_every, w);
  return c;
}

json DeactSection::to_json() const {
  return {{"bundle", bundle}, {"sigma_p", sigma_p}, {"k", k}, {"registry_ema", registry_ema}};
}

DeactSection DeactSection::from_json(const json& j) {
  const std::string w = "deact";
  DeactSection c;
  reject_unknown(j, c.to_json(), w);
  c.bundle = field(j, "bundle", c.bundle, w);
  c.sigma_p = field(j, "sigma_p", c.sigma_p, w);
  c.k = field(j, "k", c.k, w);
  c.registry_ema = field(j, "registry_ema", c.registry_ema, w);
  return c;
}

json RunSection::to_json() const {
  return {{"seed", seed},
          {"eval_every", eval_every},
          {"checkpoint_every", checkpoint_every},
          {"output_dir", output_dir},
          {"resume_from", resume_from}};
}

RunSection RunSection::from_json(const json& j) {
  const std::string w = "run";
  RunSection c;
  reject_unknown(j, c.to_json(), w);
  c.seed = field(j, "seed", c.seed, w);
  c.eval_every = field(j, "eval_every", c.eval_every, w);
  c.checkpoint_every = field(j, "checkpoint_every", c.checkpoint_every, w);
  c.output_dir = field(j, "output_dir", c.output_dir, w);
  c.resume_from = field(j, "resume_from", c.resume_from, w);
  return c;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  loss.validate();
  optimizer.validate();
  const bool mnist = dataset.kind == DatasetConfig::Kind::Mnist;
  if (mnist != (model.kind == ModelConfig::Kind::LeNet5)) {
    throw ConfigError("model.kind lenet5 pairs with MNIST and multilabel_cnn with synthetic data");
  }
  if (mnist) {
    if (loss.kind == LossSection::Kind::WeightedFocal || loss.kind == LossSection::Kind::WeightedCE ||
        loss.base != LossSection::Base::CrossEntropy) {
      throw ConfigError("attribute-weighted losses need multi-label data");
    }
    if (deact.k != 1) throw ConfigError("deact.k must be 1 for a single-label dataset");
  }
  if (training.batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (training.total_samples == 0) throw ConfigError("training.total_samples must be positive");
  if (training.deact_every == 0) throw ConfigError("training.deact_every must be positive");
  if (!(training.lr_factor > 0.0)) throw ConfigError("training.lr_factor must be > 0");
  if (!(deact.sigma_p >= 0.0)) throw ConfigError("deact.sigma_p must be >= 0");
  if (deact.k == 0) throw ConfigError("deact.k must be positive");
  if (!(deact.registry_ema > 0.0 && deact.registry_ema <= 1.0)) throw ConfigError("deact.registry_ema must lie in (0, 1]");
  if (has_bundle() && !std::filesystem::exists(deact.bundle)) {
    throw ConfigError("generator bundle not found: " + deact.bundle);
  }
  if (run.checkpoint_every > 0 && run.output_dir.empty()) throw ConfigError("checkpoints need run.output_dir");
  if (!run.resume_from.empty() && !std::filesystem::exists(run.resume_from)) {
    throw ConfigError("checkpoint not found: " + run.resume_from);
  }
}

json ExperimentConfig::to_json() const {
  return {{"dataset", dataset.to_json()},     {"model", model.to_json()},
          {"loss", loss.to_json()},           {"optimizer", optimizer.to_json()},
          {"training", training.to_json()},   {"deact", deact.to_json()},
          {"run", run.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  reject_unknown(j, c.to_json(), "config");
  if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("loss")) c.loss = LossSection::from_json(j.at("loss"));
  if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  if (j.contains("training")) c.training = TrainingSection::from_json(j.at("training"));
  if (j.contains("deact")) c.deact = DeactSection::from_json(j.at("deact"));
  if (j.contains("run")) c.run = RunSection::from_json(j.at("run"));
  return c;
}

std::uint64_t ExperimentConfig::hash() const {
  json j = to_json();
  j["run"].erase("output_dir");
  j["run"].erase("resume_from");
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}

void apply_overrides(json& config, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string path = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json* node = &config;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown key '" + path + "' in override");
      node = &(*node)[key];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) throw ConfigError("override '" + path + "' names a section, not a value");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = std::move(value);
  }
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return j;
}

// Data -------------------------------------------------------------------------------

namespace {

LabeledImageSet load_mnist_train(const DatasetConfig& cfg) {
  const std::filesystem::path dir(cfg.mnist_dir);
  LabeledImageSet train = load_mnist_idx(dir / kMnistFiles[0], dir / kMnistFiles[1]);
  if (cfg.n_total > 0 || cfg.n_per_class > 0) {
    train = subset(train, SubsetRequest{cfg.n_total, cfg.n_per_class}, cfg.subset_seed);
  }
  train.split = "train";
  return train;
}

SyntheticSpec held_out_spec(const SyntheticSpec& s) {
  SyntheticSpec t = s;
  t.seed = mix_seed(s.seed ^ 0x7e57ULL);
  return t;
}

}  // namespace

ExperimentData load_experiment_data(const DatasetConfig& cfg) {
  cfg.validate();
  ExperimentData d;
  if (cfg.kind == DatasetConfig::Kind::Mnist) {
    d.train = load_mnist_train(cfg);
    const std::filesystem::path dir(cfg.mnist_dir);
    d.test = load_mnist_idx(dir / kMnistFiles[2], dir / kMnistFiles[3]);
    if (cfg.test_limit > 0 && cfg.test_limit < d.test.size()) {
      std::vector<std::size_t> first(cfg.test_limit);
      std::iota(first.begin(), first.end(), std::size_t{0});
      d.test = select(d.test, first);
    }
    d.test.split = "test";
  } else {
    d.train = make_synthetic_multilabel(cfg.synthetic);
    d.train.split = "train";
    d.test = make_synthetic_multilabel(held_out_spec(cfg.synthetic));
    d.test.split = "test";
  }
  return d;
}

// Training ---------------------------------------------------------------------------

namespace {

std::size_t effective_batch(const ExperimentConfig& cfg, std::size_t n) { return std::min(cfg.training.batch_size, n); }

std::uint64_t effective_iterations(const ExperimentConfig& cfg, std::size_t n) {
  return cfg.training.total_samples / effective_batch(cfg, n);
}

Tensor one_hot(const std::vector<int>& classes, std::size_t c) {
  Tensor t({classes.size(), c}, 0.0);
  for (std::size_t i = 0; i < classes.size(); ++i) t.at(i, static_cast<std::size_t>(classes[i])) = 1.0;
  return t;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = p.ptr() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return p;
}

Tensor sigmoid_all(const Tensor& logits) {
  Tensor p = logits;
  for (double& v : p.data()) v = stable_sigmoid(v);
  return p;
}

}  // namespace

ClassifierTrainer::ClassifierTrainer(const ExperimentConfig& cfg, const LabeledImageSet& train,
                                     std::shared_ptr<const GeneratorBundle> bundle)
    : cfg_(cfg),
      categorical_(cfg.dataset.kind == DatasetConfig::Kind::Mnist),
      schedule_{cfg.optimizer.lr, cfg.training.lr_factor, cfg.training.lr_every},
      registry_(categorical_ ? std::max<std::size_t>(train.num_classes, 1) : train.attribute_count(), cfg.loss.gamma,
                cfg.deact.registry_ema),
      bundle_(std::move(bundle)) {
  if (categorical_) {
    if (train.classes.empty()) throw ConfigError("single-label training needs class labels");
    model_ = std::make_unique<Classifier>(build_lenet5(), cfg.run.seed);
  } else {
    if (train.attribute_count() == 0) throw ConfigError("multi-label training needs attribute labels");
    model_ = std::make_unique<Classifier>(
        build_multilabel_cnn(train.image_shape(), train.attribute_count(), 0, cfg.model.width), cfg.run.seed);
  }
  optimizer_ = make_optimizer(cfg.optimizer, model_->parameters());
  if (!categorical_) {
    const auto pos = train.positive_counts();
    const auto neg = train.negative_counts();
    if (cfg.loss.base == LossSection::Base::WeightedCEA) {
      base_spec_ = {BaseLoss::WeightedCE, ce_weights_per_attribute(pos, neg)};
    } else if (cfg.loss.base == LossSection::Base::WeightedCEB) {
      base_spec_ = {BaseLoss::WeightedCE, ce_weights_global(pos, neg)};
    }
    for (std::size_t p : pos) priors_.push_back(static_cast<double>(p) / static_cast<double>(train.size()));
  }
  if (cfg.loss.kind == LossSection::Kind::WeightedCE && base_spec_.kind != BaseLoss::WeightedCE) {
    throw ConfigError("loss.kind weighted_ce needs loss.base weighted_ce_a or weighted_ce_b");
  }
  if (cfg.has_bundle()) {
    if (!bundle_ || !bundle_->generator) throw ConfigError("deactivation branch configured without a generator");
    const std::size_t cond = bundle_->generator->spec().condition_dim;
    if (cond != registry_.attributes()) {
      throw ConfigError("generator condition width " + std::to_string(cond) + " does not match " +
                        std::to_string(registry_.attributes()) + " labels");
    }
  }
}

BatchOutput ClassifierTrainer::real_output(const ClassifierOutput& out, const Batch& real) const {
  BatchOutput b;
  if (categorical_) {
    b.category_logits = out.category_logits;
    b.category_labels = real.classes;
  } else {
    b.attribute_logits = out.attribute_logits;
    b.attribute_labels = real.attributes;
  }
  return b;
}

Var ClassifierTrainer::base_loss(const BatchOutput& batch) const {
  const LossSection& l = cfg_.loss;
  switch (l.kind) {
    case LossSection::Kind::Habp:
      return habp_loss(batch, l.gamma, base_spec_).value;
    case LossSection::Kind::CrossEntropy:
      return weighted_ce_loss(batch, {}).value;
    case LossSection::Kind::WeightedCE:
      return weighted_ce_loss(batch, base_spec_).value;
    case LossSection::Kind::Focal:
      return focal_loss(batch, l.gamma).value;
    case LossSection::Kind::WeightedFocal:
      return weighted_focal_loss(batch, l.gamma, priors_).value;
    case LossSection::Kind::Ohem:
      return ohem_loss(batch, l.ohem_ratio).value;
  }
  throw std::logic_error("unhandled loss kind");
}

Var ClassifierTrainer::deact_branch(Graph& g, std::uint64_t step) {
  const std::uint64_t seed = cfg_.run.seed;
  // The synthetic batch matches the real one.
  const Tensor labels = registry_.sample_hard_labels(batch_size_, cfg_.deact.k, seed, step);
  Tensor images = generate_complementary(*bundle_->generator, labels, cfg_.deact.sigma_p, seed, step);
  const Shape& in = model_->spec().input;
  if (images.dim(2) > in[1]) images = crop_images(images, (images.dim(2) - in[1]) / 2);
  auto rng = make_rng(seed, streams::kSyntheticDropout, step);
  const ClassifierOutput out = model_->forward(g, g.constant(std::move(images)), Mode::Train, &rng);
  const Var logits = categorical_ ? out.category_logits : out.attribute_logits;
  switch (cfg_.loss.deact) {
    case LossSection::Deact::Multiclass:
      return deact_multiclass(logits, cfg_.loss.threshold);
    case LossSection::Deact::Binary:
      return deact_binary(logits);
    case LossSection::Deact::Weighted:
      return deact_weighted(logits, registry_.node_scores(labels));
  }
  throw std::logic_error("unhandled deactivation kind");
}

StepReport ClassifierTrainer::train_step(const Batch& real, std::uint64_t step) {
  const std::uint64_t seed = cfg_.run.seed;
  batch_size_ = real.indices.size();
  Graph g;
  auto rng = make_rng(seed, streams::kDropout, step);
  const ClassifierOutput out = model_->forward(g, g.constant(real.images), Mode::Train, &rng);
  const BatchOutput batch = real_output(out, real);
  const Var base = base_loss(batch);

  if (categorical_) {
    registry_.record_batch(one_hot(real.classes, registry_.attributes()), softmax_rows(out.category_logits.value()),
                           static_cast<std::int64_t>(step));
  } else {
    registry_.record_batch(real.attributes, sigmoid_all(out.attribute_logits.value()), static_cast<std::int64_t>(step));
  }

  StepReport r;
  r.step = step;
  r.base_loss = base.value()[0];
  std::optional<Var> sc;
  const bool amortize = cfg_.training.amortize;
  if (bundle_ && (amortize || step % cfg_.training.deact_every == 0)) {
    sc = deact_branch(g, step);
    r.deact_loss = sc->value()[0];
    r.deact_weight = amortize ? cfg_.loss.lambda / static_cast<double>(cfg_.training.deact_every) : cfg_.loss.lambda;
  }
  const Var total = combined_loss(base, sc, r.deact_weight);
  r.total = total.value()[0];
  if (!std::isfinite(r.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << ": base=" << r.base_loss;
    if (r.deact_loss) msg << ", deact=" << *r.deact_loss;
    throw NumericError(msg.str());
  }
  optimizer_->zero_grad();
  g.backward(total);
  r.grad_norm = gradient_norm(optimizer_->parameters());
  if (!std::isfinite(r.grad_norm)) {
    throw NumericError("non-finite gradient at step " + std::to_string(step) + " (loss " + std::to_string(r.total) + ")");
  }
  r.lr = schedule_.lr(step);
  optimizer_->step(r.lr);
  return r;
}

ClassifierOutputs ClassifierTrainer::predict(const Tensor& images, std::size_t batch) {
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  ClassifierOutputs all;
  std::vector<double> cat, attr, feat;
  std::size_t wc = 0, wa = 0, wf = 0;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t e = std::min(n, s + batch);
    Shape shape = images.shape();
    shape[0] = e - s;
    Tensor chunk(shape);
    std::copy_n(images.ptr() + s * per, (e - s) * per, chunk.ptr());
    Graph g(false);
    const ClassifierOutput out = model_->forward(g, g.constant(std::move(chunk)), Mode::Eval);
    auto append = [](std::vector<double>& dst, std::size_t& width, const Var& v) {
      if (!v.valid()) return;
      width = v.value().dim(1);
      dst.insert(dst.end(), v.value().ptr(), v.value().ptr() + v.value().size());
    };
    append(cat, wc, out.category_logits);
    append(attr, wa, out.attribute_logits);
    append(feat, wf, out.features);
  }
  if (wc) all.category_logits = Tensor({n, wc}, std::move(cat));
  if (wa) all.attribute_logits = Tensor({n, wa}, std::move(attr));
  if (wf) all.features = Tensor({n, wf}, std::move(feat));
  return all;
}

Checkpoint ClassifierTrainer::checkpoint(std::uint64_t step) {
  Checkpoint ck;
  export_state(model_->state(), ck);
  optimizer_->save(ck, "optimizer");
  ck.meta["kind"] = "classifier-checkpoint";
  ck.meta["step"] = step;
  ck.meta["config_hash"] = hex(cfg_.hash());
  ck.meta["registry"] = registry_.snapshot();
  return ck;
}

std::uint64_t ClassifierTrainer::restore(const Checkpoint& ck) {
  if (ck.meta.value("kind", std::string{}) != "classifier-checkpoint") {
    throw FormatError("not a classifier checkpoint", 0);
  }
  const std::string h = ck.meta.value("config_hash", std::string{});
  if (h != hex(cfg_.hash())) {
    throw ConfigError("checkpoint config hash " + h + " does not match this config (" + hex(cfg_.hash()) + ")");
  }
  import_state(model_->state(), ck);
  optimizer_->load(ck, "optimizer");
  registry_ = HardLabelRegistry::restore(ck.meta.at("registry"));
  return ck.meta.at("step").get<std::uint64_t>();
}

std::vector<std::size_t> lowest_decile_attributes(const std::vector<std::size_t>& positive_counts) {
  const std::size_t n = positive_counts.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return positive_counts[a] < positive_counts[b]; });
  order.resize((n + 9) / 10);
  std::sort(order.begin(), order.end());
  return order;
}

std::map<std::string, double> evaluate_split(ClassifierTrainer& trainer, const LabeledImageSet& set) {
  std::map<std::string, double> m;
  const ClassifierOutputs out = trainer.predict(set.images);
  if (!out.category_logits.empty()) {
    const double top1 = topk_accuracy(out.category_logits, set.classes, 1);
    m["top1_accuracy"] = top1;
    m["test_error"] = 1.0 - top1;
  }
  if (!out.attribute_logits.empty()) {
    const std::size_t n = set.attribute_count();
    const GroupMap groups = GroupMap::single(n);
    m["top3_recall"] = topk_recall(out.attribute_logits, set.attributes, std::min<std::size_t>(3, n), groups).overall;
    const auto bal = class_balanced_accuracy(out.attribute_logits, set.attributes, groups);
    m["balanced_accuracy"] = bal.overall;
    const ErrorCountTable table = error_vs_count_table(out.attribute_logits, set.attributes);
    std::vector<double> prob(n, std::nan("")), counts, probs;
    for (const ErrorCountRow& r : table.rows) {
      prob[r.attribute] = r.mean_probability;
      counts.push_back(static_cast<double>(r.positives));
      probs.push_back(r.mean_probability);
    }
    double bsum = 0.0, psum = 0.0;
    std::size_t bn = 0, pn = 0;
    for (std::size_t j : lowest_decile_attributes(set.positive_counts())) {
      if (std::isfinite(bal.per_attribute[j])) {
        bsum += bal.per_attribute[j];
        ++bn;
      }
      if (std::isfinite(prob[j])) {
        psum += prob[j];
        ++pn;
      }
    }
    m["low_decile_balanced_accuracy"] = bn ? bsum / static_cast<double>(bn) : std::nan("");
    m["low_decile_mean_probability"] = pn ? psum / static_cast<double>(pn) : std::nan("");
    m["count_probability_correlation"] = pearson(counts, probs);
  }
  return m;
}

namespace {

std::ofstream open_log(const std::filesystem::path& path, const std::string& header, std::uint64_t keep_below) {
  // On resume, rows at or after the resume step are dropped so the file
  // matches an uninterrupted run.
  std::vector<std::string> kept;
  if (keep_below > 0) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) < keep_below) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  for (const auto& l : kept) out << l << '\n';
  out << std::setprecision(17);
  return out;
}

void write_metrics(std::ofstream& out, std::uint64_t step, const std::map<std::string, double>& m) {
  for (const auto& [k, v] : m) out << step << ',' << k << ',' << v << '\n';
  out.flush();
}

struct PreparedBatch {
  std::uint64_t step;
  Batch batch;
};

}  // namespace

ExperimentResult run_classifier_experiment(const ExperimentConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  const ExperimentData data = load_experiment_data(cfg.dataset);
  std::shared_ptr<const GeneratorBundle> bundle;
  if (cfg.has_bundle()) bundle = std::make_shared<GeneratorBundle>(GeneratorBundle::load(cfg.deact.bundle));
  ClassifierTrainer trainer(cfg, data.train, bundle);

  ExperimentResult result;
  const bool logging = !cfg.run.output_dir.empty();
  if (logging) {
    result.output_dir = cfg.run.output_dir;
    std::filesystem::create_directories(result.output_dir);
    std::ofstream(result.output_dir / "resolved_config.json") << cfg.to_json().dump(2) << '\n';
  }
  std::uint64_t start = 0;
  if (!cfg.run.resume_from.empty()) {
    start = trainer.restore(load_checkpoint(cfg.run.resume_from));
    spdlog::info("resuming from step {}", start);
  }
  std::ofstream steps_csv, metrics_csv;
  if (logging) {
    steps_csv = open_log(result.output_dir / "steps.csv", "step,l_habp,l_sc,total,grad_norm,lr", start);
    metrics_csv = open_log(result.output_dir / "metrics.csv", "step,metric,value", start + 1);
  }

  const std::size_t n = data.train.size();
  const std::size_t batch = effective_batch(cfg, n);
  if (batch < cfg.training.batch_size) {
    spdlog::info("training set has {} images; batch size reduced from {}", n, cfg.training.batch_size);
  }
  const std::uint64_t iterations = effective_iterations(cfg, n);
  if (iterations == 0) throw ConfigError("training.total_samples is below one batch");
  const std::uint64_t end = hooks.stop_after ? std::min(iterations, *hooks.stop_after) : iterations;
  const BatchSampler sampler(n, batch, cfg.run.seed);

  BoundedQueue<PreparedBatch> queue(2);
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      for (std::uint64_t s = start; s < end; ++s) {
        if (!queue.push({s, gather(data.train, sampler.indices(s))})) return;
      }
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });

  std::uint64_t digest = 0xcbf29ce484222325ULL;
  try {
    while (auto item = queue.pop()) {
      const std::uint64_t step = item->step;
      const auto& idx = item->batch.indices;
      digest = fnv1a(idx.data(), idx.size() * sizeof(std::size_t), digest);
      const StepReport r = trainer.train_step(item->batch, step);
      result.reports.push_back(r);
      if (logging) {
        steps_csv << r.step << ',' << r.base_loss << ',';
        if (r.deact_loss) steps_csv << *r.deact_loss;
        steps_csv << ',' << r.total << ',' << r.grad_norm << ',' << r.lr << '\n';
      }
      if (hooks.on_step) hooks.on_step(r);
      const std::uint64_t done = step + 1;
      if (cfg.run.eval_every > 0 && done % cfg.run.eval_every == 0 && done < iterations && logging) {
        write_metrics(metrics_csv, done, evaluate_split(trainer, data.test));
      }
      if (cfg.run.checkpoint_every > 0 && done % cfg.run.checkpoint_every == 0 && done < iterations) {
        char name[40];
        std::snprintf(name, sizeof name, "step_%06llu.json", static_cast<unsigned long long>(done));
        std::filesystem::create_directories(result.output_dir / "checkpoints");
        steps_csv.flush();
        save_checkpoint(result.output_dir / "checkpoints" / name, trainer.checkpoint(done));
      }
    }
  } catch (...) {
    queue.close();
    producer.join();
    throw;
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);

  result.steps = end;
  result.batch_digest = digest;
  result.state_checksum = state_checksum(trainer.model().state());
  if (end == iterations) {
    result.metrics = evaluate_split(trainer, data.test);
    if (logging) {
      write_metrics(metrics_csv, iterations, result.metrics);
      trainer.registry().write_csv(result.output_dir / "registry.csv");
      Checkpoint final_state = trainer.checkpoint(iterations);
      save_checkpoint(result.output_dir / "final.json", final_state);
      if (!data.test.attributes.empty()) {
        error_vs_count_table(trainer.predict(data.test.images).attribute_logits, data.test.attributes)
            .write_csv(result.output_dir / "error_vs_count.csv");
      }
    }
  }
  return result;
}

// Ablation -------------------------------------------------------------------------------

std::vector<AblationRow> run_ablation_suite(const ExperimentConfig& base) {
  if (base.dataset.kind != DatasetConfig::Kind::Synthetic) throw ConfigError("the ablation runs on synthetic data");
  if (!base.has_bundle()) throw ConfigError("the ablation needs deact.bundle");
  struct Arm {
    const char* name;
    LossSection::Kind loss;
    bool deact;
  };
  const Arm arms[] = {{"baseline", LossSection::Kind::CrossEntropy, false},
                      {"deact_only", LossSection::Kind::CrossEntropy, true},
                      {"habp_only", LossSection::Kind::Habp, false},
                      {"fl_deact", LossSection::Kind::Focal, true},
                      {"habp_deact", LossSection::Kind::Habp, true}};
  std::vector<AblationRow> rows;
  for (const Arm& a : arms) {
    ExperimentConfig c = base;
    c.loss.kind = a.loss;
    if (!a.deact) c.deact.bundle.clear();
    c.run.resume_from.clear();
    if (!base.run.output_dir.empty()) c.run.output_dir = (std::filesystem::path(base.run.output_dir) / a.name).string();
    spdlog::info("ablation arm {}", a.name);
    rows.push_back({a.name, run_classifier_experiment(c)});
  }
  if (!base.run.output_dir.empty()) {
    std::ofstream out(std::filesystem::path(base.run.output_dir) / "ablation.csv");
    out << kAblationHeader << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& m = rows[i].result.metrics;
      out << rows[i].arm << ',' << enum_to_string(arms[i].loss, kLossKinds) << ',' << (arms[i].deact ? 1 : 0);
      for (const char* k : {"top3_recall", "balanced_accuracy", "low_decile_balanced_accuracy",
                            "low_decile_mean_probability", "count_probability_correlation"}) {
        out << ',' << m.at(k);
      }
      out << ',' << hex(rows[i].result.batch_digest) << '\n';
    }
  }
  return rows;
}

// GAN experiments --------------------------------------------------------------------

void GanExperimentConfig::validate() const {
  dataset.validate();
  gan.validate();
  train.validate();
  if (gan.resolutions.back() != kSyntheticSide) throw ConfigError("the GAN's top rung must be 32x32");
  const bool mnist = dataset.kind == DatasetConfig::Kind::Mnist;
  const std::size_t labels = mnist ? 10 : dataset.synthetic.attributes;
  if (train.conditional && gan.condition_dim != labels) {
    throw ConfigError("gan.condition_dim must be " + std::to_string(labels) + " for this dataset");
  }
  if (gan.aux_classes > 0 && (!mnist || gan.aux_classes != 10)) {
    throw ConfigError("an auxiliary classifier head needs MNIST and aux_classes = 10");
  }
}

json GanExperimentConfig::to_json() const {
  return {{"dataset", dataset.to_json()}, {"gan", gan.to_json()}, {"train", train.to_json()}, {"output_dir", output_dir}};
}

GanExperimentConfig GanExperimentConfig::from_json(const json& j) {
  GanExperimentConfig c;
  reject_unknown(j, c.to_json(), "config");
  if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
  if (j.contains("gan")) {
    reject_unknown(j.at("gan"), c.gan.to_json(), "gan");
    c.gan = MRGanSpec::from_json(j.at("gan"));
  }
  if (j.contains("train")) c.train = GanTrainConfig::from_json(j.at("train"));
  c.output_dir = field(j, "output_dir", c.output_dir, "config");
  return c;
}

LabeledImageSet gan_training_set(const DatasetConfig& cfg) {
  cfg.validate();
  if (cfg.kind == DatasetConfig::Kind::Mnist) return pad_images(load_mnist_train(cfg), 2);
  LabeledImageSet s = make_synthetic_multilabel(cfg.synthetic);
  s.split = "train";
  return s;
}

GanTrainResult run_gan_experiment(const GanExperimentConfig& cfg) {
  cfg.validate();
  const LabeledImageSet data = gan_training_set(cfg.dataset);
  GanRunOptions opts;
  if (!cfg.output_dir.empty()) {
    opts.output_dir = cfg.output_dir;
    std::filesystem::create_directories(opts.output_dir);
    std::ofstream(opts.output_dir / "resolved_config.json") << cfg.to_json().dump(2) << '\n';
  }
  GanTrainResult r = train_gan(data, cfg.gan, cfg.train, opts);
  if (!cfg.output_dir.empty()) r.bundle.save(opts.output_dir / "bundle.json");
  return r;
}

double fid_proxy(Classifier& embedder, const Tensor& real, const Tensor& generated) {
  auto features = [&](const Tensor& images) {
    const std::size_t n = images.dim(0), per = images.size() / n, chunk = 500;
    std::vector<double> all;
    std::size_t width = 0;
    for (std::size_t s = 0; s < n; s += chunk) {
      const std::size_t e = std::min(n, s + chunk);
      Shape shape = images.shape();
      shape[0] = e - s;
      Tensor part(shape);
      std::copy_n(images.ptr() + s * per, (e - s) * per, part.ptr());
      Graph g(false);
      const Tensor& f = embedder.forward(g, g.constant(std::move(part)), Mode::Eval).features.value();
      width = f.dim(1);
      all.insert(all.end(), f.ptr(), f.ptr() + f.size());
    }
    return Tensor({n, width}, std::move(all));
  };
  return frechet_distance(GaussianSummary::fit(features(real)), GaussianSummary::fit(features(generated)));
}

}  // namespace hardaware
