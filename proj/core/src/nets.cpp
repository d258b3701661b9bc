#include "hardaware/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "hardaware/errors.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

namespace {

constexpr std::size_t kNoParam = static_cast<std::size_t>(-1);

Tensor he_normal(const Shape& shape, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::Identity: return "identity";
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::LeakyReLU: return "leaky_relu";
    case ActivationKind::Sigmoid: return "sigmoid";
    case ActivationKind::Tanh: return "tanh";
  }
  return "identity";
}

ActivationKind activation_kind(const std::string& s) {
  if (s == "identity") return ActivationKind::Identity;
  if (s == "relu") return ActivationKind::ReLU;
  if (s == "leaky_relu") return ActivationKind::LeakyReLU;
  if (s == "sigmoid") return ActivationKind::Sigmoid;
  if (s == "tanh") return ActivationKind::Tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

void require_spatial(const Shape& s, const char* what) {
  if (s.size() != 3) throw DimensionError(std::string(what) + " needs [C x H x W] input, got " + to_string(s));
}

}  // namespace

// ClassifierSpec -----------------------------------------------------------------

Shape ClassifierSpec::feature_shape() const {
  Shape s = input;
  if (s.size() != 3) throw DimensionError("classifier input must be [C x H x W], got " + to_string(s));
  for (const LayerDesc& layer : layers) {
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     require_spatial(s, "conv");
                     const std::size_t h = s[1] + 2 * c.padding, w = s[2] + 2 * c.padding;
                     if (c.kernel == 0 || c.stride == 0 || c.out_channels == 0 || c.kernel > h || c.kernel > w) {
                       throw DimensionError("conv " + std::to_string(c.kernel) + "x" + std::to_string(c.kernel) +
                                            " (padding " + std::to_string(c.padding) + ") does not fit input " +
                                            to_string(s));
                     }
                     s = {c.out_channels, (h - c.kernel) / c.stride + 1, (w - c.kernel) / c.stride + 1};
                   },
                   [&](const DenseLayer& d) {
                     if (s.size() != 1) throw DimensionError("dense layer needs a flat input, got " + to_string(s));
                     if (d.out == 0) throw DimensionError("dense layer with zero outputs");
                     s = {d.out};
                   },
                   [&](const PoolLayer& p) {
                     require_spatial(s, "pool");
                     if (p.window == 0 || p.window > s[1] || p.window > s[2]) {
                       throw DimensionError("pool window " + std::to_string(p.window) + " does not fit " + to_string(s));
                     }
                     s = {s[0], s[1] / p.window, s[2] / p.window};
                   },
                   [&](const ActivationLayer&) {},
                   [&](const FlattenLayer&) { s = {shape_size(s)}; },
                   [&](const GlobalPoolLayer&) {
                     require_spatial(s, "global pool");
                     s = {s[0]};
                   },
                   [&](const DropoutLayer& d) {
                     if (!(d.p >= 0.0 && d.p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
                   },
               },
               layer);
  }
  if (s.size() != 1) throw DimensionError("classifier trunk must end in a feature vector, got " + to_string(s));
  return s;
}

std::size_t ClassifierSpec::parameter_count() const {
  const std::size_t f = feature_shape()[0];
  Shape s = input;
  std::size_t count = 0;
  for (const LayerDesc& layer : layers) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      count += c->out_channels * s[0] * c->kernel * c->kernel + c->out_channels;
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      count += s[0] * d->out + d->out;
    }
    Shape next = s;
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     next = {c.out_channels, (s[1] + 2 * c.padding - c.kernel) / c.stride + 1,
                             (s[2] + 2 * c.padding - c.kernel) / c.stride + 1};
                   },
                   [&](const DenseLayer& d) { next = {d.out}; },
                   [&](const PoolLayer& p) { next = {s[0], s[1] / p.window, s[2] / p.window}; },
                   [&](const ActivationLayer&) {},
                   [&](const FlattenLayer&) { next = {shape_size(s)}; },
                   [&](const GlobalPoolLayer&) { next = {s[0]}; },
                   [&](const DropoutLayer&) {},
               },
               layer);
    s = next;
  }
  count += classes ? f * classes + classes : 0;
  count += attributes ? f * attributes + attributes : 0;
  return count;
}

nlohmann::json ClassifierSpec::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const LayerDesc& layer : layers) {
    layers_json.push_back(std::visit(
        Overloaded{
            [](const ConvLayer& c) -> nlohmann::json {
              return {{"type", "conv"}, {"out", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride},
                      {"padding", c.padding}};
            },
            [](const DenseLayer& d) -> nlohmann::json { return {{"type", "dense"}, {"out", d.out}}; },
            [](const PoolLayer& p) -> nlohmann::json {
              return {{"type", p.kind == PoolLayer::Kind::Max ? "maxpool" : "avgpool"}, {"window", p.window}};
            },
            [](const ActivationLayer& a) -> nlohmann::json {
              return {{"type", "activation"}, {"kind", activation_name(a.activation.kind)},
                      {"alpha", a.activation.alpha}};
            },
            [](const FlattenLayer&) -> nlohmann::json { return {{"type", "flatten"}}; },
            [](const GlobalPoolLayer&) -> nlohmann::json { return {{"type", "global_avgpool"}}; },
            [](const DropoutLayer& d) -> nlohmann::json { return {{"type", "dropout"}, {"p", d.p}}; },
        },
        layer));
  }
  return {{"name", name}, {"input", input}, {"layers", layers_json}, {"classes", classes}, {"attributes", attributes}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
  try {
    ClassifierSpec s;
    s.name = j.value("name", std::string{});
    s.input = j.at("input").get<Shape>();
    s.classes = j.value("classes", std::size_t{0});
    s.attributes = j.value("attributes", std::size_t{0});
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "conv") {
        s.layers.emplace_back(ConvLayer{l.at("out").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                                        l.value("stride", std::size_t{1}), l.value("padding", std::size_t{0})});
      } else if (type == "dense") {
        s.layers.emplace_back(DenseLayer{l.at("out").get<std::size_t>()});
      } else if (type == "maxpool" || type == "avgpool") {
        s.layers.emplace_back(PoolLayer{type == "maxpool" ? PoolLayer::Kind::Max : PoolLayer::Kind::Average,
                                        l.at("window").get<std::size_t>()});
      } else if (type == "activation") {
        s.layers.emplace_back(
            ActivationLayer{{activation_kind(l.at("kind").get<std::string>()), l.value("alpha", 0.2)}});
      } else if (type == "flatten") {
        s.layers.emplace_back(FlattenLayer{});
      } else if (type == "global_avgpool") {
        s.layers.emplace_back(GlobalPoolLayer{});
      } else if (type == "dropout") {
        s.layers.emplace_back(DropoutLayer{l.at("p").get<double>()});
      } else {
        throw ConfigError("unknown layer type '" + type + "'");
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed classifier spec: ") + e.what());
  }
}

ClassifierSpec build_lenet5() {
  const ActivationLayer relu{{ActivationKind::ReLU}};
  ClassifierSpec s;
  s.name = "lenet5";
  s.input = {1, 28, 28};
  s.layers = {ConvLayer{6, 5, 1, 2}, relu, PoolLayer{PoolLayer::Kind::Max, 2},
              ConvLayer{16, 5, 1, 0}, relu, PoolLayer{PoolLayer::Kind::Max, 2},
              FlattenLayer{},  DenseLayer{120}, relu, DenseLayer{84}, relu};
  s.classes = 10;
  return s;
}

ClassifierSpec build_multilabel_cnn(const Shape& input, std::size_t attributes, std::size_t classes,
                                    std::size_t width) {
  const ActivationLayer relu{{ActivationKind::ReLU}};
  ClassifierSpec s;
  s.name = "multilabel_cnn";
  s.input = input;
  s.layers = {ConvLayer{width, 3, 1, 1},
              relu,
              PoolLayer{PoolLayer::Kind::Max, 2},
              ConvLayer{2 * width, 3, 1, 1},
              relu,
              PoolLayer{PoolLayer::Kind::Max, 2},
              ConvLayer{4 * width, 3, 1, 0},
              relu,
              ConvLayer{4 * width, 3, 1, 0},
              relu,
              GlobalPoolLayer{},
              DropoutLayer{0.5}};
  s.classes = classes;
  s.attributes = attributes;
  s.feature_shape();  // rejects inputs too small for the unpadded convolutions
  return s;
}

// State helpers ---------------------------------------------------------------------

void export_state(const std::vector<StateEntry>& entries, Checkpoint& out) {
  for (const StateEntry& e : entries) out.tensors.push_back({e.name, *e.tensor});
}

void import_state(const std::vector<StateEntry>& entries, const Checkpoint& in) {
  for (const StateEntry& e : entries) {
    const Tensor* t = in.find(e.name);
    if (!t) throw FormatError("checkpoint lacks tensor '" + e.name + "'", 0);
    if (t->shape() != e.tensor->shape()) {
      throw FormatError("tensor '" + e.name + "' has shape " + to_string(t->shape()) + ", expected " +
                            to_string(e.tensor->shape()),
                        0);
    }
    *e.tensor = *t;
  }
}

std::uint64_t state_checksum(const std::vector<StateEntry>& entries) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const StateEntry& e : entries) {
    for (double v : e.tensor->data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

// Classifier ------------------------------------------------------------------------

Classifier::Classifier(ClassifierSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  const Shape features = spec_.feature_shape();
  if (spec_.output_width() == 0) throw ConfigError("classifier needs at least one output head");
  auto rng = make_rng(seed, streams::kInit);
  Shape s = spec_.input;
  layer_param_.assign(spec_.layers.size(), kNoParam);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerDesc& layer = spec_.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      layer_param_[i] = params_.size();
      const double fan_in = static_cast<double>(s[0] * c->kernel * c->kernel);
      params_.emplace_back(prefix + ".weight", he_normal({c->out_channels, s[0], c->kernel, c->kernel}, fan_in, rng));
      params_.emplace_back(prefix + ".bias", Tensor({c->out_channels}, 0.0));
      s = {c->out_channels, (s[1] + 2 * c->padding - c->kernel) / c->stride + 1,
           (s[2] + 2 * c->padding - c->kernel) / c->stride + 1};
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      layer_param_[i] = params_.size();
      params_.emplace_back(prefix + ".weight", he_normal({s[0], d->out}, static_cast<double>(s[0]), rng));
      params_.emplace_back(prefix + ".bias", Tensor({d->out}, 0.0));
      s = {d->out};
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      s = {s[0], s[1] / p->window, s[2] / p->window};
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      s = {shape_size(s)};
    } else if (std::holds_alternative<GlobalPoolLayer>(layer)) {
      s = {s[0]};
    }
  }
  const std::size_t f = features[0];
  if (spec_.classes) {
    category_head_ = params_.size();
    params_.emplace_back("category.weight", he_normal({f, spec_.classes}, static_cast<double>(f), rng));
    params_.emplace_back("category.bias", Tensor({spec_.classes}, 0.0));
  }
  if (spec_.attributes) {
    attribute_head_ = params_.size();
    params_.emplace_back("attribute.weight", he_normal({f, spec_.attributes}, static_cast<double>(f), rng));
    params_.emplace_back("attribute.bias", Tensor({spec_.attributes}, 0.0));
  }
}

ClassifierOutput Classifier::forward(Graph& g, Var x, Mode mode, std::mt19937_64* dropout_rng) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != spec_.input) {
    throw DimensionError("classifier '" + spec_.name + "' expects [B x " + to_string(spec_.input) + "], got " +
                         to_string(xs));
  }
  Var h = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const std::size_t pi = layer_param_[i];
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     h = conv2d(h, g.param(params_[pi]), g.param(params_[pi + 1]), {c.stride, c.padding});
                   },
                   [&](const DenseLayer&) { h = linear(h, g.param(params_[pi]), g.param(params_[pi + 1])); },
                   [&](const PoolLayer& p) {
                     h = p.kind == PoolLayer::Kind::Max ? maxpool2d(h, p.window) : avgpool2d(h, p.window);
                   },
                   [&](const ActivationLayer& a) { h = activate(h, a.activation); },
                   [&](const FlattenLayer&) { h = flatten(h); },
                   [&](const GlobalPoolLayer&) { h = global_avgpool(h); },
                   [&](const DropoutLayer& d) {
                     if (mode == Mode::Train) {
                       if (!dropout_rng) throw ConfigError("train-mode dropout needs a random generator");
                       h = dropout(h, d.p, mode, *dropout_rng);
                     }
                   },
               },
               spec_.layers[i]);
  }
  ClassifierOutput out;
  out.features = h;
  if (spec_.classes) {
    out.category_logits = linear(h, g.param(params_[category_head_]), g.param(params_[category_head_ + 1]));
  }
  if (spec_.attributes) {
    out.attribute_logits = linear(h, g.param(params_[attribute_head_]), g.param(params_[attribute_head_ + 1]));
  }
  return out;
}

std::vector<Parameter*> Classifier::parameters() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<StateEntry> Classifier::state() {
  std::vector<StateEntry> out;
  for (Parameter& p : params_) out.push_back({p.name, &p.value});
  return out;
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

// MRGanSpec -------------------------------------------------------------------------

void MRGanSpec::validate() const {
  if (resolutions.empty()) throw ConfigError("MR-GAN ladder is empty");
  if (resolutions.front() != 4) throw ConfigError("MR-GAN ladder must start at 4, got " + std::to_string(resolutions.front()));
  for (std::size_t r = 1; r < resolutions.size(); ++r) {
    if (resolutions[r] != 2 * resolutions[r - 1]) {
      throw ConfigError("MR-GAN ladder must double at every rung: " + std::to_string(resolutions[r - 1]) + " -> " +
                        std::to_string(resolutions[r]));
    }
  }
  if (channels.size() != resolutions.size()) {
    throw ConfigError("MR-GAN needs one channel count per rung (" + std::to_string(resolutions.size()) + "), got " +
                      std::to_string(channels.size()));
  }
  for (std::size_t c : channels)
    if (c == 0) throw ConfigError("MR-GAN channel counts must be positive");
  if (latent_dim == 0) throw ConfigError("MR-GAN latent width must be positive");
  if (image_channels != 1 && image_channels != 3) throw ConfigError("MR-GAN images must have 1 or 3 channels");
  if (!(leaky_slope >= 0.0)) throw ConfigError("leaky slope must be >= 0");
}

nlohmann::json MRGanSpec::to_json() const {
  return {{"latent_dim", latent_dim},   {"condition_dim", condition_dim}, {"resolutions", resolutions},
          {"channels", channels},       {"image_channels", image_channels}, {"leaky_slope", leaky_slope},
          {"bn_momentum", bn_momentum}, {"bn_eps", bn_eps},               {"aux_classes", aux_classes},
          {"condition_discriminator", condition_discriminator}};
}

MRGanSpec MRGanSpec::from_json(const nlohmann::json& j) {
  try {
    MRGanSpec s;
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.condition_dim = j.value("condition_dim", s.condition_dim);
    s.resolutions = j.value("resolutions", s.resolutions);
    s.channels = j.value("channels", s.channels);
    s.image_channels = j.value("image_channels", s.image_channels);
    s.leaky_slope = j.value("leaky_slope", s.leaky_slope);
    s.bn_momentum = j.value("bn_momentum", s.bn_momentum);
    s.bn_eps = j.value("bn_eps", s.bn_eps);
    s.aux_classes = j.value("aux_classes", s.aux_classes);
    s.condition_discriminator = j.value("condition_discriminator", s.condition_discriminator);
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed MR-GAN spec: ") + e.what());
  }
}

// Generator -------------------------------------------------------------------------

Generator::Generator(MRGanSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  auto rng = make_rng(seed, streams::kInit, 1);
  const std::size_t in = spec_.latent_dim + spec_.condition_dim;
  for (std::size_t r = 0; r < spec_.rungs(); ++r) {
    const std::string prefix = "block" + std::to_string(r);
    const std::size_t cout = spec_.channels[r];
    const std::size_t cin = r == 0 ? in : spec_.channels[r - 1];
    // Effective fan-in of a transposed convolution: the 1x1 projection sees
    // each input once, a 4x4 stride-2 upsampling sees 2x2 input positions.
    const double fan_in = static_cast<double>(r == 0 ? cin : 4 * cin);
    Block b;
    b.kernel = params_.size();
    params_.emplace_back(prefix + ".kernel", he_normal({cin, cout, 4, 4}, fan_in, rng));
    b.gamma = params_.size();
    params_.emplace_back(prefix + ".bn.gamma", Tensor({cout}, 1.0));
    b.beta = params_.size();
    params_.emplace_back(prefix + ".bn.beta", Tensor({cout}, 0.0));
    b.head_kernel = params_.size();
    params_.emplace_back(prefix + ".head.kernel",
                         he_normal({spec_.image_channels, cout, 1, 1}, static_cast<double>(cout), rng));
    b.head_bias = params_.size();
    params_.emplace_back(prefix + ".head.bias", Tensor({spec_.image_channels}, 0.0));
    b.bn = BatchNormState(cout);
    blocks_.push_back(std::move(b));
  }
}

Shape Generator::injection_shape(std::size_t batch) const { return {batch, spec_.channels[0], 4, 4}; }

GeneratorOutput Generator::forward(Graph& g, Var z, Var c, Mode mode, const Tensor* injection_noise) {
  const std::size_t batch = z.shape()[0];
  if (z.shape() != Shape{batch, spec_.latent_dim}) {
    throw DimensionError("generator latent must be [B x " + std::to_string(spec_.latent_dim) + "], got " +
                         to_string(z.shape()));
  }
  Var input = z;
  if (spec_.condition_dim > 0) {
    if (!c.valid() || c.shape() != Shape{batch, spec_.condition_dim}) {
      throw DimensionError("generator condition must be [B x " + std::to_string(spec_.condition_dim) + "]");
    }
    const std::vector<Var> parts{z, c};
    input = concat(parts, 1);
  }
  Var h = reshape(input, {batch, spec_.latent_dim + spec_.condition_dim, 1, 1});
  GeneratorOutput out;
  for (std::size_t r = 0; r < blocks_.size(); ++r) {
    Block& b = blocks_[r];
    const Conv2dOptions opts = r == 0 ? Conv2dOptions{1, 0} : Conv2dOptions{2, 1};
    h = conv2d_transposed(h, g.param(params_[b.kernel]), std::nullopt, opts);
    h = batchnorm2d(h, g.param(params_[b.gamma]), g.param(params_[b.beta]), b.bn, spec_.bn_eps, spec_.bn_momentum, mode);
    h = leaky_relu(h, spec_.leaky_slope);
    if (r == 0) {
      if (injection_noise) {
        if (injection_noise->shape() != h.shape()) {
          throw DimensionError("injection noise " + to_string(injection_noise->shape()) + " does not match " +
                               to_string(h.shape()));
        }
        h = add(h, g.constant(*injection_noise));
      }
      out.injection = h;
    }
    out.images.push_back(
        tanh(conv2d(h, g.param(params_[b.head_kernel]), g.param(params_[b.head_bias]), {1, 0})));
  }
  return out;
}

std::vector<Parameter*> Generator::parameters() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<StateEntry> Generator::state() {
  std::vector<StateEntry> out;
  for (Parameter& p : params_) out.push_back({p.name, &p.value});
  for (std::size_t r = 0; r < blocks_.size(); ++r) {
    const std::string prefix = "block" + std::to_string(r) + ".bn.";
    out.push_back({prefix + "running_mean", &blocks_[r].bn.running_mean});
    out.push_back({prefix + "running_var", &blocks_[r].bn.running_var});
  }
  return out;
}

// Discriminator ---------------------------------------------------------------------

Discriminator::Discriminator(const MRGanSpec& spec, std::size_t rung, std::uint64_t seed)
    : rung_(rung), slope_(spec.leaky_slope), momentum_(spec.bn_momentum), eps_(spec.bn_eps) {
  spec.validate();
  if (rung >= spec.rungs()) throw ConfigError("discriminator rung " + std::to_string(rung) + " outside the ladder");
  resolution_ = spec.resolutions[rung];
  auto rng = make_rng(seed, streams::kInit, 100 + rung);
  conditioned_ = spec.condition_discriminator && spec.condition_dim > 0;
  const std::size_t in = spec.image_channels + (conditioned_ ? spec.condition_dim : 0);
  auto add_block = [&](std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                       bool norm) {
    const std::string prefix = "d" + std::to_string(rung) + ".block" + std::to_string(blocks_.size());
    Block b{0, 0, 0, 0, BatchNormState(0), 0, 0};
    b.kernel = params_.size();
    params_.emplace_back(prefix + ".kernel", he_normal({cout, cin, k, k}, static_cast<double>(cin * k * k), rng));
    b.bias = params_.size();
    params_.emplace_back(prefix + ".bias", Tensor({cout}, 0.0));
    b.gamma = b.beta = kNone;
    if (norm) {
      b.gamma = params_.size();
      params_.emplace_back(prefix + ".bn.gamma", Tensor({cout}, 1.0));
      b.beta = params_.size();
      params_.emplace_back(prefix + ".bn.beta", Tensor({cout}, 0.0));
      b.bn = BatchNormState(cout);
    }
    b.stride = stride;
    b.padding = pad;
    blocks_.push_back(std::move(b));
  };
  add_block(in, spec.channels[rung], 3, 1, 1, false);
  for (std::size_t s = rung; s > 0; --s) add_block(spec.channels[s], spec.channels[s - 1], 4, 2, 1, true);
  const std::size_t flat = spec.channels[0] * 16;
  const std::string prefix = "d" + std::to_string(rung);
  out_weight_ = params_.size();
  params_.emplace_back(prefix + ".out.weight", he_normal({flat, 1}, static_cast<double>(flat), rng));
  out_bias_ = params_.size();
  params_.emplace_back(prefix + ".out.bias", Tensor({1}, 0.0));
  if (spec.aux_classes > 0 && rung + 1 == spec.rungs()) {
    aux_weight_ = params_.size();
    params_.emplace_back(prefix + ".aux.weight", he_normal({flat, spec.aux_classes}, static_cast<double>(flat), rng));
    aux_bias_ = params_.size();
    params_.emplace_back(prefix + ".aux.bias", Tensor({spec.aux_classes}, 0.0));
  }
}

DiscriminatorOutput Discriminator::forward(Graph& g, Var image, Var condition, Mode mode) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[2] != resolution_ || s[3] != resolution_) {
    throw DimensionError("discriminator for rung " + std::to_string(rung_) + " expects " + std::to_string(resolution_) +
                         "x" + std::to_string(resolution_) + " images, got " + to_string(s));
  }
  Var h = image;
  if (conditioned_) {
    if (!condition.valid() || condition.shape().size() != 2 || condition.shape()[0] != s[0]) {
      throw DimensionError("discriminator for rung " + std::to_string(rung_) + " needs a [B x condition] input");
    }
    const std::vector<Var> parts{image, tile_spatial(condition, resolution_, resolution_)};
    h = concat(parts, 1);
  }
  for (Block& b : blocks_) {
    h = conv2d(h, g.param(params_[b.kernel]), g.param(params_[b.bias]), {b.stride, b.padding});
    if (b.gamma != kNone) h = batchnorm2d(h, g.param(params_[b.gamma]), g.param(params_[b.beta]), b.bn, eps_, momentum_, mode);
    h = leaky_relu(h, slope_);
  }
  h = flatten(h);
  DiscriminatorOutput out;
  out.logit = linear(h, g.param(params_[out_weight_]), g.param(params_[out_bias_]));
  if (aux_weight_ != kNone) out.aux_logits = linear(h, g.param(params_[aux_weight_]), g.param(params_[aux_bias_]));
  return out;
}

std::vector<Parameter*> Discriminator::parameters() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<StateEntry> Discriminator::state() {
  std::vector<StateEntry> out;
  for (Parameter& p : params_) out.push_back({p.name, &p.value});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].gamma == kNone) continue;
    const std::string prefix = "d" + std::to_string(rung_) + ".block" + std::to_string(i) + ".bn.";
    out.push_back({prefix + "running_mean", &blocks_[i].bn.running_mean});
    out.push_back({prefix + "running_var", &blocks_[i].bn.running_var});
  }
  return out;
}

MRGan::MRGan(const MRGanSpec& spec, std::uint64_t seed) : generator(spec, seed) {
  discriminators.reserve(spec.rungs());
  for (std::size_t r = 0; r < spec.rungs(); ++r) discriminators.emplace_back(spec, r, seed);
}

// Bundle and sampling ---------------------------------------------------------------

void GeneratorBundle::save(const std::filesystem::path& manifest) const {
  if (!generator) throw ConfigError("generator bundle is empty");
  Checkpoint cp;
  export_state(generator->state(), cp);
  cp.meta = {{"kind", "generator-bundle"},
             {"spec", generator->spec().to_json()},
             {"injection_point", injection_point},
             {"sigma_p", sigma_p}};
  save_checkpoint(manifest, cp);
}

GeneratorBundle GeneratorBundle::load(const std::filesystem::path& manifest) {
  const Checkpoint cp = load_checkpoint(manifest);
  if (cp.meta.value("kind", std::string{}) != "generator-bundle") {
    throw FormatError(manifest.string() + " is not a generator bundle", 0);
  }
  GeneratorBundle b;
  b.generator = std::make_shared<Generator>(MRGanSpec::from_json(cp.meta.at("spec")), 0);
  import_state(b.generator->state(), cp);
  b.injection_point = cp.meta.value("injection_point", std::string(kInjectionPoint));
  b.sigma_p = cp.meta.value("sigma_p", 0.0);
  if (b.injection_point != kInjectionPoint) throw FormatError("unsupported injection point '" + b.injection_point + "'", 0);
  if (!(b.sigma_p >= 0.0)) throw FormatError("negative sigma_p in bundle", 0);
  return b;
}

Tensor generate_complementary(Generator& generator, const Tensor& conditions, double sigma_p, std::uint64_t seed,
                              std::uint64_t index) {
  if (!(sigma_p >= 0.0)) throw ConfigError("sigma_p must be >= 0");
  const MRGanSpec& spec = generator.spec();
  if (conditions.rank() != 2 || (spec.condition_dim > 0 && conditions.dim(1) != spec.condition_dim)) {
    throw DimensionError("conditions must be [B x " + std::to_string(spec.condition_dim) + "], got " +
                         to_string(conditions.shape()));
  }
  const std::size_t batch = conditions.dim(0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto zrng = make_rng(seed, streams::kLatent, index);
  Tensor z({batch, spec.latent_dim});
  for (double& v : z.data()) v = normal(zrng);
  Graph g(false);
  std::optional<Tensor> noise;
  if (sigma_p > 0.0) {
    auto prng = make_rng(seed, streams::kPerturb, index);
    noise.emplace(generator.injection_shape(batch));
    for (double& v : noise->data()) v = sigma_p * normal(prng);
  }
  const Var c = spec.condition_dim > 0 ? g.constant(conditions) : Var{};
  GeneratorOutput out = generator.forward(g, g.constant(std::move(z)), c, Mode::Eval, noise ? &*noise : nullptr);
  return out.images.back().value();
}

Tensor generate_complementary(const GeneratorBundle& bundle, const Tensor& conditions, std::uint64_t seed,
                              std::uint64_t index) {
  if (!bundle.generator) throw ConfigError("generator bundle is empty");
  return generate_complementary(*bundle.generator, conditions, bundle.sigma_p, seed, index);
}

}  // namespace hardaware
