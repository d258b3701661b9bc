#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "hardaware/graph.hpp"

namespace hardaware {

enum class Mode { Train, Eval };

// Element-wise and reductions -------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);

// Dense algebra -----------------------------------------------------------------

/// [m x k] . [k x n] -> [m x n]
Var matmul(Var a, Var b);
/// x [B x in], weight [in x out], bias [out]
Var linear(Var x, Var weight, std::optional<Var> bias);

// Convolutions ------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation. x [B x C x H x W], kernel [F x C x kh x kw], bias [F].
/// Output spatial size floor((H + 2p - kh) / stride) + 1.
Var conv2d(Var x, Var kernel, std::optional<Var> bias, Conv2dOptions options = {});

/// Adjoint of conv2d with respect to its input. x [B x Cin x H x W],
/// kernel [Cin x Cout x kh x kw], bias [Cout]. Output (H-1)*stride - 2p + kh.
Var conv2d_transposed(Var x, Var kernel, std::optional<Var> bias, Conv2dOptions options = {});

// Normalization -----------------------------------------------------------------

struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean({channels ? channels : 1}, 0.0), running_var({channels ? channels : 1}, 1.0) {}
  Tensor running_mean;
  Tensor running_var;
};

/// Per-channel batch normalization of [B x C x H x W] or [B x C] input.
/// Train mode uses batch statistics and updates `state` (running variance
/// is the unbiased estimate); eval mode uses `state`.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, double eps, double momentum, Mode mode);

// Activations -------------------------------------------------------------------

enum class ActivationKind { Identity, ReLU, LeakyReLU, Sigmoid, Tanh };

struct Activation {
  ActivationKind kind = ActivationKind::Identity;
  double alpha = 0.2;  // leaky slope
};

Var activate(Var x, Activation activation);
inline Var relu(Var x) { return activate(x, {ActivationKind::ReLU}); }
inline Var leaky_relu(Var x, double alpha) { return activate(x, {ActivationKind::LeakyReLU, alpha}); }
inline Var sigmoid(Var x) { return activate(x, {ActivationKind::Sigmoid}); }
inline Var tanh(Var x) { return activate(x, {ActivationKind::Tanh}); }

// Pooling and shape -------------------------------------------------------------

/// Non-overlapping k x k windows (stride k, floor semantics).
Var avgpool2d(Var x, std::size_t k);
Var maxpool2d(Var x, std::size_t k);
/// [B x C x H x W] -> [B x C]
Var global_avgpool(Var x);

/// Inverted dropout: train mode zeroes with probability p and scales
/// survivors by 1/(1-p); eval mode returns x unchanged.
Var dropout(Var x, double p, Mode mode, std::mt19937_64& rng);

Var reshape(Var x, Shape shape);
/// [B x ...] -> [B x rest]
Var flatten(Var x);
Var concat(std::span<const Var> xs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
/// [B x K] -> [B x K x h x w], each value repeated over the spatial grid.
Var tile_spatial(Var x, std::size_t h, std::size_t w);

// Numerics shared by ops and losses ------------------------------------------

double stable_sigmoid(double x);
/// log(1 + exp(x)) without overflow.
double softplus(double x);

}  // namespace hardaware
