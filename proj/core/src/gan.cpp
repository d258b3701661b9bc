#include "hardaware/gan.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "hardaware/bounded_queue.hpp"
#include "hardaware/errors.hpp"
#include "hardaware/losses.hpp"
#include "hardaware/ops.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

void GanTrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("gan.lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("gan.beta1 and gan.beta2 must lie in [0, 1)");
  }
  if (batch_size < 2) throw ConfigError("gan.batch_size must be >= 2 (batch norm)");
  if (total_samples == 0) throw ConfigError("gan.total_samples must be > 0");
  if (total_samples < batch_size) throw ConfigError("gan.total_samples is smaller than one batch");
  if (!(decorrelation_weight >= 0.0)) throw ConfigError("gan.decorrelation_weight must be >= 0");
  if (!(aux_weight >= 0.0)) throw ConfigError("gan.aux_weight must be >= 0");
  if (sample_every == 0) throw ConfigError("gan.sample_every must be > 0");
}

nlohmann::json GanTrainConfig::to_json() const {
  return {{"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"batch_size", batch_size},
          {"total_samples", total_samples},
          {"decorrelation_weight", decorrelation_weight},
          {"conditional", conditional},
          {"aux_weight", aux_weight},
          {"sample_every", sample_every},
          {"seed", seed}};
}

GanTrainConfig GanTrainConfig::from_json(const nlohmann::json& j) {
  GanTrainConfig c;
  if (!j.is_object()) throw ConfigError("gan config must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "total_samples") c.total_samples = value.get<std::size_t>();
      else if (key == "decorrelation_weight") c.decorrelation_weight = value.get<double>();
      else if (key == "conditional") c.conditional = value.get<bool>();
      else if (key == "aux_weight") c.aux_weight = value.get<double>();
      else if (key == "sample_every") c.sample_every = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown key 'gan." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("gan." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

// Decorrelation --------------------------------------------------------------------------

namespace {

constexpr double kCosineEps = 1e-12;

struct KernelView {
  std::size_t latent, channels, taps;
  const double* data;
  // w_ij = kernel[j, i, :, :]
  const double* w(std::size_t i, std::size_t j) const { return data + (j * channels + i) * taps; }
};

KernelView view_kernel(const Tensor& k, std::size_t latent_dim) {
  if (k.rank() != 4 || k.dim(0) < latent_dim) {
    throw DimensionError("projection kernel " + to_string(k.shape()) + " has fewer than " +
                         std::to_string(latent_dim) + " input rows");
  }
  if (latent_dim < 2) throw ConfigError("decorrelation needs at least two latent dimensions");
  return {latent_dim, k.dim(1), k.dim(2) * k.dim(3), k.ptr()};
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t t = 0; t < n; ++t) s += a[t] * b[t];
  return s;
}

}  // namespace

Var decorrelation_loss(Var kernel, std::size_t latent_dim) {
  const Tensor& k = kernel.value();
  const KernelView v = view_kernel(k, latent_dim);
  const std::size_t nz = v.latent, nf = v.channels, taps = v.taps;
  const double scale = 1.0 / static_cast<double>(nf * nz * nz);
  Tensor grad(k.shape(), 0.0);
  std::vector<double> norms(nz);
  double value = 0.0;
  for (std::size_t i = 0; i < nf; ++i) {
    for (std::size_t j = 0; j < nz; ++j) norms[j] = std::sqrt(dot(v.w(i, j), v.w(i, j), taps));
    for (std::size_t j = 0; j < nz; ++j)
      for (std::size_t q = j + 1; q < nz; ++q) {
        const double* a = v.w(i, j);
        const double* b = v.w(i, q);
        const double ab = dot(a, b, taps);
        const double den = norms[j] * norms[q] + kCosineEps;
        const double c = ab / den;
        // The ordered pairs (j, q) and (q, j) both contribute c^2.
        value += 2.0 * c * c;
        double* ga = grad.ptr() + (j * nf + i) * taps;
        double* gb = grad.ptr() + (q * nf + i) * taps;
        const double f = 4.0 * c * scale;
        for (std::size_t t = 0; t < taps; ++t) {
          const double ua = norms[j] > 0.0 ? a[t] / norms[j] : 0.0;
          const double ub = norms[q] > 0.0 ? b[t] / norms[q] : 0.0;
          ga[t] += f * (b[t] / den - ab * norms[q] * ua / (den * den));
          gb[t] += f * (a[t] / den - ab * norms[j] * ub / (den * den));
        }
      }
  }
  const auto id = kernel.id();
  return kernel.graph().record("decorrelation", Tensor::scalar(value * scale), {kernel},
                               [id, grad = std::move(grad)](Graph& g, const Tensor& dout) {
                                 if (Tensor* s = g.grad_sink(id)) s->add_scaled_(grad, dout[0]);
                               });
}

CorrelationSummary kernel_correlation_histogram(const Tensor& kernel, std::size_t latent_dim, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  const KernelView v = view_kernel(kernel, latent_dim);
  CorrelationSummary out;
  out.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) out.edges.push_back(static_cast<double>(b) / static_cast<double>(bins));
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.channels; ++i)
    for (std::size_t j = 0; j < v.latent; ++j)
      for (std::size_t q = j + 1; q < v.latent; ++q) {
        const double* a = v.w(i, j);
        const double* b = v.w(i, q);
        const double den = std::sqrt(dot(a, a, v.taps) * dot(b, b, v.taps)) + kCosineEps;
        const double c = std::min(std::abs(dot(a, b, v.taps)) / den, 1.0);
        total += c;
        ++n;
        out.counts[std::min(static_cast<std::size_t>(c * static_cast<double>(bins)), bins - 1)] += 2;
      }
  out.mean = total / static_cast<double>(n);
  return out;
}

// Training step -----------------------------------------------------------------------------

namespace {

double bce_mean_value(const Var& v) { return v.value()[0]; }

// Mean binary cross entropy of [B x 1] logits against a constant target.
Var bce(Var logits, double target) {
  BatchOutput b;
  b.attribute_logits = logits;
  b.attribute_labels = Tensor(logits.shape(), target);
  return weighted_ce_loss(b, {}).value;
}

Var categorical_ce(Var logits, const std::vector<int>& classes) {
  BatchOutput b;
  b.category_logits = logits;
  b.category_labels = classes;
  return weighted_ce_loss(b, {}).value;
}

std::vector<Parameter*> discriminator_parameters(MRGan& gan) {
  std::vector<Parameter*> out;
  for (Discriminator& d : gan.discriminators)
    for (Parameter* p : d.parameters()) out.push_back(p);
  return out;
}

}  // namespace

GanTrainer::GanTrainer(const MRGanSpec& spec, const GanTrainConfig& cfg) : spec_(spec), cfg_(cfg) {
  cfg_.validate();
  spec_.validate();
  if (!cfg_.conditional && spec_.condition_dim != 0) {
    throw ConfigError("an unconditional GAN needs condition_dim = 0");
  }
  gan_ = std::make_unique<MRGan>(spec_, cfg_.seed);
  g_opt_ = std::make_unique<Adam>(gan_->generator.parameters(), cfg_.beta1, cfg_.beta2, 1e-8);
  d_opt_ = std::make_unique<Adam>(discriminator_parameters(*gan_), cfg_.beta1, cfg_.beta2, 1e-8);
}

GanStepReport GanTrainer::step(const std::vector<Tensor>& real, const Tensor& conditions,
                               const std::vector<int>& classes, std::uint64_t step) {
  if (real.size() != spec_.rungs()) {
    throw DimensionError("expected " + std::to_string(spec_.rungs()) + " real rungs, got " + std::to_string(real.size()));
  }
  const std::size_t batch = real.back().dim(0);
  const bool aux = spec_.aux_classes > 0;
  if (aux && classes.size() != batch) throw DimensionError("auxiliary head needs one class label per sample");

  Tensor z({batch, spec_.latent_dim});
  {
    auto rng = make_rng(cfg_.seed, streams::kGanData, step);
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& v : z.data()) v = n(rng);
  }
  MRGan& gan = *gan_;
  const std::size_t rungs = spec_.rungs();
  const double inv_rungs = 1.0 / static_cast<double>(rungs);

  // Generator forward, kept for the generator update.
  Graph gg;
  const Var cg = spec_.condition_dim > 0 ? gg.constant(conditions) : Var{};
  const GeneratorOutput fake = gan.generator.forward(gg, gg.constant(z), cg, Mode::Train);

  GanStepReport report;
  report.step = step;

  // Discriminator update on detached fakes.
  {
    Graph gd;
    const Var cd = spec_.condition_dim > 0 ? gd.constant(conditions) : Var{};
    Var total;
    Var aux_total;
    for (std::size_t r = 0; r < rungs; ++r) {
      const DiscriminatorOutput on_real = gan.discriminators[r].forward(gd, gd.constant(real[r]), cd, Mode::Train);
      const DiscriminatorOutput on_fake =
          gan.discriminators[r].forward(gd, gd.constant(fake.images[r].value()), cd, Mode::Train);
      Var term = add(bce(on_real.logit, 1.0), bce(on_fake.logit, 0.0));
      total = total.valid() ? add(total, term) : term;
      if (on_real.aux_logits.valid()) {
        aux_total = add(categorical_ce(on_real.aux_logits, classes), categorical_ce(on_fake.aux_logits, classes));
      }
    }
    Var d_loss = scale(total, inv_rungs);
    report.d_loss = bce_mean_value(d_loss);
    if (aux_total.valid()) {
      report.aux_loss = aux_total.value()[0];
      d_loss = add(d_loss, scale(aux_total, cfg_.aux_weight));
    }
    if (!std::isfinite(d_loss.value()[0])) {
      throw NumericError("discriminator loss is not finite at step " + std::to_string(step) +
                         " (d_loss=" + std::to_string(report.d_loss) + ")");
    }
    d_opt_->zero_grad();
    gd.backward(d_loss);
    const double gn = gradient_norm(d_opt_->parameters());
    if (!std::isfinite(gn)) {
      throw NumericError("discriminator gradient is not finite at step " + std::to_string(step) +
                         " (d_loss=" + std::to_string(report.d_loss) + ")");
    }
    d_opt_->step(cfg_.lr);
  }

  // Generator update through the freshly updated discriminators.
  {
    Var total;
    for (std::size_t r = 0; r < rungs; ++r) {
      const DiscriminatorOutput out = gan.discriminators[r].forward(gg, fake.images[r], cg, Mode::Train);
      Var term = bce(out.logit, 1.0);
      if (out.aux_logits.valid()) term = add(term, scale(categorical_ce(out.aux_logits, classes), cfg_.aux_weight * rungs));
      total = total.valid() ? add(total, term) : term;
    }
    Var g_loss = scale(total, inv_rungs);
    const Var decor = decorrelation_loss(gg.param(gan.generator.projection_kernel()), spec_.latent_dim);
    report.decorrelation_loss = decor.value()[0];
    if (cfg_.decorrelation_weight > 0.0) g_loss = add(g_loss, scale(decor, cfg_.decorrelation_weight));
    report.g_loss = g_loss.value()[0];
    if (!std::isfinite(report.g_loss)) {
      throw NumericError("generator loss is not finite at step " + std::to_string(step) +
                         " (d_loss=" + std::to_string(report.d_loss) + ", g_loss=" + std::to_string(report.g_loss) + ")");
    }
    g_opt_->zero_grad();
    d_opt_->zero_grad();
    gg.backward(g_loss);
    const double gn = gradient_norm(g_opt_->parameters());
    if (!std::isfinite(gn)) {
      throw NumericError("generator gradient is not finite at step " + std::to_string(step) +
                         " (g_loss=" + std::to_string(report.g_loss) + ")");
    }
    g_opt_->step(cfg_.lr);
    // Gradients that reached the discriminators through the fakes are discarded.
    d_opt_->zero_grad();
  }
  report.mean_kernel_correlation =
      kernel_correlation_histogram(gan.generator.projection_kernel().value, spec_.latent_dim).mean;
  return report;
}

// Data plumbing ---------------------------------------------------------------------------

Tensor dataset_conditions(const LabeledImageSet& set, const std::vector<std::size_t>& indices, const MRGanSpec& spec) {
  if (spec.condition_dim == 0) return {};
  Tensor c({indices.size(), spec.condition_dim}, 0.0);
  if (!set.classes.empty() && set.attribute_count() == 0) {
    if (set.num_classes != spec.condition_dim) {
      throw ConfigError("condition width " + std::to_string(spec.condition_dim) + " does not match " +
                        std::to_string(set.num_classes) + " classes");
    }
    for (std::size_t r = 0; r < indices.size(); ++r) c.at(r, static_cast<std::size_t>(set.classes[indices[r]])) = 1.0;
    return c;
  }
  if (set.attribute_count() != spec.condition_dim) {
    throw ConfigError("condition width " + std::to_string(spec.condition_dim) + " does not match " +
                      std::to_string(set.attribute_count()) + " attributes");
  }
  const std::size_t n = spec.condition_dim;
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(set.attributes.ptr() + indices[r] * n, n, c.ptr() + r * n);
  return c;
}

void write_pgm_grid(const std::filesystem::path& path, const Tensor& images, std::size_t cols) {
  if (images.rank() != 4 || images.dim(1) != 1) throw DimensionError("PGM grid needs [n x 1 x H x W] images");
  if (cols == 0) throw ConfigError("PGM grid needs at least one column");
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t width = cols * w, height = rows * h;
  std::vector<unsigned char> px(width * height, 0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t oy = (k / cols) * h, ox = (k % cols) * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp((images.at(k, 0, y, x) + 1.0) * 127.5, 0.0, 255.0);
        px[(oy + y) * width + ox + x] = static_cast<unsigned char>(std::lround(v));
      }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

namespace {

struct PreparedBatch {
  std::uint64_t step;
  std::vector<Tensor> pyramid;
  Tensor conditions;
  std::vector<int> classes;
};

// Fixed conditions for sample grids: classes cycle along rows, or the
// attribute rows of the first images.
Tensor grid_conditions(const LabeledImageSet& data, const MRGanSpec& spec, std::size_t count) {
  if (spec.condition_dim == 0) return Tensor({count, 1}, 0.0);
  std::vector<std::size_t> idx(count);
  if (!data.classes.empty() && data.attribute_count() == 0) {
    Tensor c({count, spec.condition_dim}, 0.0);
    for (std::size_t k = 0; k < count; ++k) c.at(k, (k / 8) % spec.condition_dim) = 1.0;
    return c;
  }
  for (std::size_t k = 0; k < count; ++k) idx[k] = k % data.size();
  return dataset_conditions(data, idx, spec);
}

}  // namespace

GanTrainResult train_gan(const LabeledImageSet& data, const MRGanSpec& spec, const GanTrainConfig& requested,
                         const GanRunOptions& options) {
  requested.validate();
  // A set smaller than one batch shrinks the batch and keeps the step count.
  GanTrainConfig cfg = requested;
  if (data.size() > 0 && data.size() < cfg.batch_size) {
    const std::uint64_t steps = cfg.iterations();
    cfg.batch_size = data.size();
    cfg.total_samples = steps * cfg.batch_size;
    spdlog::info("GAN training set has {} images; batch size reduced from {}", data.size(), requested.batch_size);
  }
  spec.validate();
  const std::size_t top = spec.resolutions.back();
  if (data.images.rank() != 4 || data.images.dim(2) != top || data.images.dim(3) != top ||
      data.images.dim(1) != spec.image_channels) {
    throw DimensionError("GAN data must be [n x " + std::to_string(spec.image_channels) + " x " + std::to_string(top) +
                         " x " + std::to_string(top) + "], got " + to_string(data.images.shape()));
  }
  if (spec.aux_classes > 0 && data.classes.empty()) throw ConfigError("auxiliary head needs class labels");
  GanTrainer trainer(spec, cfg);
  const BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed);
  const std::uint64_t iterations = cfg.iterations();

  std::ofstream curves;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir / "samples");
    curves.open(options.output_dir / "gan_curves.csv");
    curves << "step,d_loss,g_loss,decorrelation_loss,mean_kernel_correlation\n" << std::setprecision(17);
  }
  const Tensor grid_c = grid_conditions(data, spec, 64);
  auto emit_grid = [&](std::uint64_t step) {
    if (options.output_dir.empty()) return;
    char name[32];
    std::snprintf(name, sizeof name, "step_%06llu.pgm", static_cast<unsigned long long>(step));
    write_pgm_grid(options.output_dir / "samples" / name,
                   generate_complementary(trainer.generator(), grid_c, 0.0, cfg.seed ^ 0x5eedULL), 8);
  };

  BoundedQueue<PreparedBatch> queue(2);
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      for (std::uint64_t s = 0; s < iterations; ++s) {
        const auto idx = sampler.indices(s);
        Batch b = gather(data, idx);
        PreparedBatch p{s, build_pyramid(b.images, spec.rungs()), dataset_conditions(data, idx, spec),
                        std::move(b.classes)};
        if (!queue.push(std::move(p))) return;
      }
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });

  GanTrainResult result;
  try {
    while (auto batch = queue.pop()) {
      const GanStepReport r = trainer.step(batch->pyramid, batch->conditions, batch->classes, batch->step);
      result.curve.push_back(r);
      if (curves.is_open()) {
        curves << r.step << ',' << r.d_loss << ',' << r.g_loss << ',' << r.decorrelation_loss << ','
               << r.mean_kernel_correlation << '\n';
      }
      if (options.on_step) options.on_step(r);
      if (r.step % cfg.sample_every == 0) emit_grid(r.step);
    }
  } catch (...) {
    queue.close();
    producer.join();
    throw;
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  emit_grid(iterations);
  result.prefetch_peak = queue.peak();
  result.bundle.generator = std::make_shared<Generator>(trainer.generator());
  result.bundle.injection_point = kInjectionPoint;
  return result;
}

}  // namespace hardaware
