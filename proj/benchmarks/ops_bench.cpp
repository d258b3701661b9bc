#include <benchmark/benchmark.h>

#include <random>

#include "hardaware/ops.hpp"

namespace {

using namespace hardaware;

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Parameter k("k", random_tensor({16, 6, 5, 5}, 1));
  const Tensor x = random_tensor({batch, 6, 14, 14}, 2);
  for (auto _ : state) {
    Graph g;
    Var out = conv2d(g.constant(x), g.param(k), std::nullopt, {1, 0});
    g.backward(sum(out));
    benchmark::DoNotOptimize(k.grad.ptr());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(64);

void BM_Conv2dTransposedForward(benchmark::State& state) {
  Parameter k("k", random_tensor({32, 16, 4, 4}, 3));
  const Tensor x = random_tensor({32, 32, 8, 8}, 4);
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(conv2d_transposed(g.constant(x), g.param(k), std::nullopt, {2, 1}).value().ptr());
  }
}
BENCHMARK(BM_Conv2dTransposedForward);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 5), b = random_tensor({n, n}, 6);
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(matmul(g.constant(a), g.constant(b)).value().ptr());
  }
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
