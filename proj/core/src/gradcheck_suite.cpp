#include "hardaware/gradcheck_suite.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <memory>
#include <random>

#include "hardaware/gan.hpp"
#include "hardaware/losses.hpp"
#include "hardaware/ops.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

namespace {

constexpr std::uint64_t kSuiteStream = 0x6c;

// Parameters and fixed tensors for one case; kept alive while the check runs.
struct Fixture {
  std::mt19937_64 rng;
  std::deque<Parameter> params;
  std::vector<Parameter*> list;

  explicit Fixture(std::uint64_t seed) : rng(make_rng(seed, kSuiteStream)) {}

  Tensor uniform(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(s);
    for (double& v : t.data()) v = d(rng);
    return t;
  }
  // Magnitudes in [0.1, 1] with random signs, away from activation kinks.
  Tensor away_from_zero(const Shape& s) {
    Tensor t = uniform(s, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (double& v : t.data())
      if (flip(rng)) v = -v;
    return t;
  }
  Tensor labels(const Shape& s, double p = 0.4) {
    std::bernoulli_distribution b(p);
    Tensor t(s);
    for (double& v : t.data()) v = b(rng) ? 1.0 : 0.0;
    return t;
  }
  Parameter& param(const std::string& name, Tensor value) {
    params.emplace_back(name, std::move(value));
    list.push_back(&params.back());
    return params.back();
  }
};

// Reduces a tensor-valued op to a scalar with fixed random weights.
Var project(Var y, const Tensor& weights) { return sum(mul(y, y.graph().constant(weights))); }

using CaseBuilder = std::function<ScalarBuilder(Fixture&)>;

struct Case {
  const char* name;
  double tolerance;
  CaseBuilder build;
};

// Unary elementwise op on a [3 x 4] input.
Case unary(const char* name, std::function<Var(Var)> op, bool kinked = false) {
  return {name, 1e-4, [op, kinked](Fixture& f) -> ScalarBuilder {
            Parameter& x = f.param("x", kinked ? f.away_from_zero({3, 4}) : f.uniform({3, 4}, -2.0, 2.0));
            const Tensor w = f.uniform({3, 4});
            return [&x, w, op](Graph& g) -> Var { return project(op(g.param(x)), w); };
          }};
}

BatchOutput attribute_batch(Graph& g, Parameter& logits, const Tensor& labels) {
  BatchOutput b;
  b.attribute_logits = g.param(logits);
  b.attribute_labels = labels;
  return b;
}

std::vector<Case> make_cases() {
  std::vector<Case> c;
  c.push_back({"add", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 4}));
                 Parameter& b = f.param("b", f.uniform({3, 4}));
                 const Tensor w = f.uniform({3, 4});
                 return [&a, &b, w](Graph& g) -> Var { return project(add(g.param(a), g.param(b)), w); };
               }});
  c.push_back({"sub", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 4}));
                 Parameter& b = f.param("b", f.uniform({3, 4}));
                 const Tensor w = f.uniform({3, 4});
                 return [&a, &b, w](Graph& g) -> Var { return project(sub(g.param(a), g.param(b)), w); };
               }});
  c.push_back({"mul", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 4}));
                 Parameter& b = f.param("b", f.uniform({3, 4}));
                 const Tensor w = f.uniform({3, 4});
                 return [&a, &b, w](Graph& g) -> Var { return project(mul(g.param(a), g.param(b)), w); };
               }});
  c.push_back(unary("scale", [](Var x) { return scale(x, -1.7); }));
  c.push_back(unary("square", [](Var x) { return square(x); }));
  c.push_back({"sum", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 4}));
                 return [&a](Graph& g) -> Var { return square(sum(g.param(a))); };
               }});
  c.push_back({"mean", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 4}));
                 return [&a](Graph& g) -> Var { return square(mean(g.param(a))); };
               }});
  c.push_back({"matmul", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({3, 5}));
                 Parameter& b = f.param("b", f.uniform({5, 2}));
                 const Tensor w = f.uniform({3, 2});
                 return [&a, &b, w](Graph& g) -> Var { return project(matmul(g.param(a), g.param(b)), w); };
               }});
  c.push_back({"linear", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({4, 5}));
                 Parameter& w = f.param("w", f.uniform({5, 3}));
                 Parameter& b = f.param("b", f.uniform({3}));
                 const Tensor r = f.uniform({4, 3});
                 return [&x, &w, &b, r](Graph& g) -> Var {
                   return project(linear(g.param(x), g.param(w), g.param(b)), r);
                 };
               }});
  c.push_back({"conv2d", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({2, 2, 6, 6}));
                 Parameter& k = f.param("k", f.uniform({3, 2, 3, 3}));
                 Parameter& b = f.param("b", f.uniform({3}));
                 const Tensor r = f.uniform({2, 3, 3, 3});
                 return [&x, &k, &b, r](Graph& g) -> Var {
                   return project(conv2d(g.param(x), g.param(k), g.param(b), {2, 1}), r);
                 };
               }});
  c.push_back({"conv2d_transposed", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({2, 3, 3, 3}));
                 Parameter& k = f.param("k", f.uniform({3, 2, 4, 4}));
                 Parameter& b = f.param("b", f.uniform({2}));
                 const Tensor r = f.uniform({2, 2, 6, 6});
                 return [&x, &k, &b, r](Graph& g) -> Var {
                   return project(conv2d_transposed(g.param(x), g.param(k), g.param(b), {2, 1}), r);
                 };
               }});
  c.push_back({"batchnorm2d", 1e-3, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({4, 3, 2, 2}));
                 Parameter& gamma = f.param("gamma", f.uniform({3}, 0.5, 1.5));
                 Parameter& beta = f.param("beta", f.uniform({3}));
                 const Tensor r = f.uniform({4, 3, 2, 2});
                 auto state = std::make_shared<BatchNormState>(3);
                 return [&x, &gamma, &beta, r, state](Graph& g) -> Var {
                   return project(batchnorm2d(g.param(x), g.param(gamma), g.param(beta), *state, 1e-5, 0.1, Mode::Train),
                                  r);
                 };
               }});
  c.push_back(unary("relu", [](Var x) { return relu(x); }, true));
  c.push_back(unary("leaky_relu", [](Var x) { return leaky_relu(x, 0.2); }, true));
  c.push_back(unary("sigmoid", [](Var x) { return sigmoid(x); }));
  c.push_back(unary("tanh", [](Var x) { return tanh(x); }));
  c.push_back({"avgpool2d", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({2, 2, 4, 4}));
                 const Tensor r = f.uniform({2, 2, 2, 2});
                 return [&x, r](Graph& g) -> Var { return project(avgpool2d(g.param(x), 2), r); };
               }});
  c.push_back({"maxpool2d", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 // A shuffled grid keeps every window's maximum well separated.
                 Tensor v({2, 2, 4, 4});
                 std::vector<double> levels(v.size());
                 for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = 0.05 * static_cast<double>(i) - 1.5;
                 std::shuffle(levels.begin(), levels.end(), f.rng);
                 std::copy(levels.begin(), levels.end(), v.data().begin());
                 Parameter& x = f.param("x", v);
                 const Tensor r = f.uniform({2, 2, 2, 2});
                 return [&x, r](Graph& g) -> Var { return project(maxpool2d(g.param(x), 2), r); };
               }});
  c.push_back({"global_avgpool", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({2, 3, 3, 3}));
                 const Tensor r = f.uniform({2, 3});
                 return [&x, r](Graph& g) -> Var { return project(global_avgpool(g.param(x)), r); };
               }});
  c.push_back({"dropout", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({4, 5}));
                 const Tensor r = f.uniform({4, 5});
                 const std::uint64_t mask_seed = f.rng();
                 return [&x, r, mask_seed](Graph& g) -> Var {
                   std::mt19937_64 rng(mask_seed);  // same mask on every evaluation
                   return project(dropout(g.param(x), 0.5, Mode::Train, rng), r);
                 };
               }});
  c.push_back({"reshape_flatten", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& x = f.param("x", f.uniform({2, 3, 2, 2}));
                 const Tensor r = f.uniform({6, 4});
                 const Tensor r2 = f.uniform({2, 12});
                 return [&x, r, r2](Graph& g) -> Var {
                   const Var v = g.param(x);
                   return add(project(reshape(v, {6, 4}), r), project(square(flatten(v)), r2));
                 };
               }});
  c.push_back({"concat", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({2, 2, 3, 3}));
                 Parameter& b = f.param("b", f.uniform({2, 3, 3, 3}));
                 const Tensor r = f.uniform({2, 5, 3, 3});
                 return [&a, &b, r](Graph& g) -> Var {
                   const Var parts[] = {g.param(a), g.param(b)};
                   return project(concat(parts, 1), r);
                 };
               }});
  c.push_back({"slice", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({4, 6}));
                 const Tensor r = f.uniform({4, 3});
                 return [&a, r](Graph& g) -> Var { return project(slice(g.param(a), 1, 2, 5), r); };
               }});
  c.push_back({"tile_spatial", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& a = f.param("a", f.uniform({2, 3}));
                 const Tensor r = f.uniform({2, 3, 4, 4});
                 return [&a, r](Graph& g) -> Var { return project(tile_spatial(g.param(a), 4, 4), r); };
               }});

  // Composite losses.
  c.push_back({"habp", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({4, 5}, -3.0, 3.0));
                 Parameter& cz = f.param("c", f.uniform({4, 3}, -2.0, 2.0));
                 const Tensor y = f.labels({4, 5});
                 std::vector<int> cls;
                 for (int i = 0; i < 4; ++i) cls.push_back(static_cast<int>(f.rng() % 3));
                 return [&z, &cz, y, cls](Graph& g) -> Var {
                   BatchOutput b = attribute_batch(g, z, y);
                   b.category_logits = g.param(cz);
                   b.category_labels = cls;
                   return habp_loss(b, 1.2, {}, true).value;
                 };
               }});
  c.push_back({"focal", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({4, 5}, -3.0, 3.0));
                 const Tensor y = f.labels({4, 5});
                 return [&z, y](Graph& g) -> Var { return focal_loss(attribute_batch(g, z, y), 1.2).value; };
               }});
  c.push_back({"weighted_focal", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({4, 5}, -3.0, 3.0));
                 const Tensor y = f.labels({4, 5});
                 const Tensor pri = f.uniform({5}, 0.01, 0.5);
                 const std::vector<double> priors(pri.data().begin(), pri.data().end());
                 return [&z, y, priors](Graph& g) -> Var {
                   return weighted_focal_loss(attribute_batch(g, z, y), 1.2, priors).value;
                 };
               }});
  c.push_back({"ohem", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({4, 5}, -3.0, 3.0));
                 const Tensor y = f.labels({4, 5});
                 return [&z, y](Graph& g) -> Var { return ohem_loss(attribute_batch(g, z, y), 0.3).value; };
               }});
  c.push_back({"deact_multiclass", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 // Logits kept clear of the hinge at T = -1.
                 Tensor v = f.away_from_zero({3, 4});
                 for (double& x : v.data()) x = x * 2.0 - 1.0;
                 Parameter& z = f.param("z", v);
                 return [&z](Graph& g) -> Var { return deact_multiclass(g.param(z), -1.0); };
               }});
  c.push_back({"deact_binary", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({3, 4}, -2.0, 2.0));
                 return [&z](Graph& g) -> Var { return deact_binary(g.param(z)); };
               }});
  c.push_back({"deact_weighted", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& z = f.param("z", f.uniform({3, 4}, -2.0, 2.0));
                 const Tensor s = f.uniform({3, 4}, 0.0, 1.0);
                 return [&z, s](Graph& g) -> Var { return deact_weighted(g.param(z), s); };
               }});
  c.push_back({"decorrelation", 1e-4, [](Fixture& f) -> ScalarBuilder {
                 Parameter& k = f.param("kernel", f.uniform({6, 3, 4, 4}));
                 return [&k](Graph& g) -> Var { return scale(decorrelation_loss(g.param(k), 4), 10.0); };
               }});
  for (const bool variant_a : {true, false}) {
    c.push_back({variant_a ? "weighted_ce_a" : "weighted_ce_b", 1e-4, [variant_a](Fixture& f) -> ScalarBuilder {
                   Parameter& z = f.param("z", f.uniform({6, 4}, -3.0, 3.0));
                   const Tensor y = f.labels({6, 4}, 0.3);
                   const std::vector<std::size_t> pos{5, 20, 80, 300}, neg{995, 980, 920, 700};
                   BaseLossSpec base{BaseLoss::WeightedCE,
                                     variant_a ? ce_weights_per_attribute(pos, neg) : ce_weights_global(pos, neg)};
                   return [&z, y, base](Graph& g) -> Var { return weighted_ce_loss(attribute_batch(g, z, y), base).value; };
                 }});
  }
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const Case& c : make_cases()) names.emplace_back(c.name);
  return names;
}

std::vector<GradCheckCaseResult> run_gradcheck_suite(std::size_t seeds, const std::string& filter) {
  std::vector<GradCheckCaseResult> out;
  for (const Case& c : make_cases()) {
    if (!filter.empty() && std::string(c.name).find(filter) == std::string::npos) continue;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      Fixture f(seed);
      const ScalarBuilder build = c.build(f);
      GradCheckOptions opt;
      opt.tolerance = c.tolerance;
      opt.seed = seed;
      out.push_back({c.name, seed, c.tolerance, grad_check(build, f.list, opt)});
    }
  }
  return out;
}

}  // namespace hardaware
