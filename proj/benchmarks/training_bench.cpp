#include <benchmark/benchmark.h>

#include <random>

#include "hardaware/gan.hpp"
#include "hardaware/losses.hpp"
#include "hardaware/nets.hpp"
#include "hardaware/registry.hpp"

namespace {

using namespace hardaware;

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

Tensor random_labels(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(0.05);
  Tensor t(shape);
  for (double& v : t.data()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

// HABP value and gradient on a batch of 16 x N attribute nodes.
void BM_HabpLoss(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Parameter z("z", random_tensor({16, n}, 1, -4.0, 4.0));
  const Tensor y = random_labels({16, n}, 2);
  for (auto _ : state) {
    Graph g;
    BatchOutput b;
    b.attribute_logits = g.param(z);
    b.attribute_labels = y;
    g.backward(habp_loss(b, 1.2).value);
    benchmark::DoNotOptimize(z.grad.ptr());
    z.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(16 * n));
}
BENCHMARK(BM_HabpLoss)->Arg(40)->Arg(1000);

void BM_RegistryRecordAndSample(benchmark::State& state) {
  const std::size_t n = 1000;
  HardLabelRegistry reg(n);
  const Tensor y = random_labels({16, n}, 3);
  const Tensor p = random_tensor({16, n}, 4, 0.0, 1.0);
  std::uint64_t step = 0;
  for (auto _ : state) {
    reg.record_batch(y, p, static_cast<std::int64_t>(step));
    benchmark::DoNotOptimize(reg.sample_hard_labels(16, 3, 5, step++));
  }
}
BENCHMARK(BM_RegistryRecordAndSample);

// One LeNet-5 forward/backward on a batch of 64 MNIST-sized images.
void BM_LeNetStep(benchmark::State& state) {
  Classifier net(build_lenet5(), 1);
  const Tensor x = random_tensor({64, 1, 28, 28}, 6);
  std::vector<int> cls(64);
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] = static_cast<int>(i % 10);
  std::mt19937_64 rng(7);
  for (auto _ : state) {
    Graph g;
    const ClassifierOutput out = net.forward(g, g.constant(x), Mode::Train, &rng);
    BatchOutput b;
    b.category_logits = out.category_logits;
    b.category_labels = cls;
    g.backward(weighted_ce_loss(b, {}).value);
    for (Parameter* p : net.parameters()) p->zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_LeNetStep)->Unit(benchmark::kMillisecond);

void BM_DecorrelationLoss(benchmark::State& state) {
  Parameter k("k", random_tensor({42, 128, 4, 4}, 8));
  for (auto _ : state) {
    Graph g;
    g.backward(decorrelation_loss(g.param(k), 32));
    benchmark::DoNotOptimize(k.grad.ptr());
    k.zero_grad();
  }
}
BENCHMARK(BM_DecorrelationLoss);

// One MR-GAN update (D then G) at the desk-scale channel widths.
void BM_GanStep(benchmark::State& state) {
  MRGanSpec spec;
  spec.channels = {16, 16, 8, 8};
  GanTrainConfig cfg;
  cfg.batch_size = 32;
  GanTrainer trainer(spec, cfg);
  std::vector<Tensor> real;
  for (std::size_t r : spec.resolutions) real.push_back(random_tensor({32, 1, r, r}, 9 + r));
  Tensor cond({32, 10}, 0.0);
  std::vector<int> cls(32);
  for (std::size_t i = 0; i < 32; ++i) {
    cls[i] = static_cast<int>(i % 10);
    cond.at(i, i % 10) = 1.0;
  }
  std::uint64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(real, cond, cls, step++));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_GanStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
