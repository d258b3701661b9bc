#include "hardaware/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "hardaware/errors.hpp"
#include "linalg.hpp"

namespace hardaware {

using detail::view;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

namespace {

void accumulate(Tensor* sink, const Tensor& g) {
  if (sink) sink->add_(g);
}

// Element-wise and reductions -------------------------------------------------

Var binary_elementwise(const char* name, Var a, Var b, double sign_b) {
  require_same_shape(a.value(), b.value(), name);
  Tensor out = a.value();
  out.add_scaled_(b.value(), sign_b);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(name, std::move(out), {a, b}, [ia, ib, sign_b](Graph& g, const Tensor& dout) {
    accumulate(g.grad_sink(ia), dout);
    if (Tensor* s = g.grad_sink(ib)) s->add_scaled_(dout, sign_b);
  });
}

}  // namespace

Var add(Var a, Var b) { return binary_elementwise("add", a, b, 1.0); }
Var sub(Var a, Var b) { return binary_elementwise("sub", a, b, -1.0); }

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ia)) {
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += dout[i] * bv[i];
    }
    if (Tensor* s = g.grad_sink(ib)) {
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += dout[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.scale_(factor);
  const auto ia = a.id();
  return a.graph().record("scale", std::move(out), {a}, [ia, factor](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ia)) s->add_scaled_(dout, factor);
  });
}

Var square(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= v;
  const auto ia = a.id();
  return a.graph().record("square", std::move(out), {a}, [ia](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ia)) {
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += 2.0 * av[i] * dout[i];
    }
  });
}

Var sum(Var a) {
  const auto ia = a.id();
  return a.graph().record("sum", Tensor::scalar(a.value().sum()), {a}, [ia](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ia)) {
      for (double& v : s->data()) v += dout[0];
    }
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Dense algebra -----------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  view(out.ptr(), m, n).noalias() = view(av.ptr(), m, k) * view(bv.ptr(), k, n);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, const Tensor& dout) {
    const auto d = view(dout.ptr(), m, n);
    if (Tensor* s = g.grad_sink(ia)) {
      view(s->ptr(), m, k).noalias() += d * view(g.value(ib).ptr(), k, n).transpose();
    }
    if (Tensor* s = g.grad_sink(ib)) {
      view(s->ptr(), k, n).noalias() += view(g.value(ia).ptr(), m, k).transpose() * d;
    }
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    throw DimensionError("linear: input " + to_string(xv.shape()) + " does not fit weight " + to_string(wv.shape()));
  }
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(1);
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + to_string(bias->value().shape()) + " does not fit width " +
                         std::to_string(out_dim));
  }
  Tensor out({batch, out_dim});
  auto o = view(out.ptr(), batch, out_dim);
  o.noalias() = view(xv.ptr(), batch, in) * view(wv.ptr(), in, out_dim);
  std::vector<Var> parents{x, weight};
  std::uint32_t ib = 0;
  if (bias) {
    const auto b = view(bias->value().ptr(), 1, out_dim);
    o.rowwise() += b.row(0);
    parents.push_back(*bias);
    ib = bias->id();
  }
  const bool has_bias = bias.has_value();
  const auto ix = x.id(), iw = weight.id();
  return x.graph().record(
      "linear", std::move(out), parents, [ix, iw, ib, has_bias, batch, in, out_dim](Graph& g, const Tensor& dout) {
        const auto d = view(dout.ptr(), batch, out_dim);
        if (Tensor* s = g.grad_sink(ix)) {
          view(s->ptr(), batch, in).noalias() += d * view(g.value(iw).ptr(), in, out_dim).transpose();
        }
        if (Tensor* s = g.grad_sink(iw)) {
          view(s->ptr(), in, out_dim).noalias() += view(g.value(ix).ptr(), batch, in).transpose() * d;
        }
        if (has_bias) {
          if (Tensor* s = g.grad_sink(ib)) view(s->ptr(), 1, out_dim) += d.colwise().sum();
        }
      });
}

// Convolutions ------------------------------------------------------------------

namespace {

// Geometry of a cross-correlation from an input grid to an output grid.
struct ConvGeometry {
  std::size_t batch, channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return batch * out_h * out_w; }
};

// cols[(c*kh + i)*kw + j][(b*out_h + oh)*out_w + ow] = x[b, c, oh*s - p + i, ow*s - p + j]
void im2col(const ConvGeometry& geo, const double* x, double* cols) {
  const std::size_t ncols = geo.col_cols();
  const std::size_t plane = geo.out_h * geo.out_w;
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        double* row = cols + ((c * geo.kh + i) * geo.kw + j) * ncols;
        for (std::size_t b = 0; b < geo.batch; ++b) {
          const double* xin = x + (b * geo.channels + c) * geo.in_h * geo.in_w;
          double* dst = row + b * plane;
          for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * geo.stride + i) - static_cast<std::ptrdiff_t>(geo.pad);
            double* drow = dst + oh * geo.out_w;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(geo.in_h)) {
              std::fill(drow, drow + geo.out_w, 0.0);
              continue;
            }
            const double* srow = xin + static_cast<std::size_t>(ih) * geo.in_w;
            for (std::size_t ow = 0; ow < geo.out_w; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * geo.stride + j) - static_cast<std::ptrdiff_t>(geo.pad);
              drow[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(geo.in_w)) ? 0.0 : srow[iw];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds cols back onto x.
void col2im(const ConvGeometry& geo, const double* cols, double* x) {
  const std::size_t ncols = geo.col_cols();
  const std::size_t plane = geo.out_h * geo.out_w;
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        const double* row = cols + ((c * geo.kh + i) * geo.kw + j) * ncols;
        for (std::size_t b = 0; b < geo.batch; ++b) {
          double* xout = x + (b * geo.channels + c) * geo.in_h * geo.in_w;
          const double* src = row + b * plane;
          for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * geo.stride + i) - static_cast<std::ptrdiff_t>(geo.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(geo.in_h)) continue;
            double* xrow = xout + static_cast<std::size_t>(ih) * geo.in_w;
            const double* srow = src + oh * geo.out_w;
            for (std::size_t ow = 0; ow < geo.out_w; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * geo.stride + j) - static_cast<std::ptrdiff_t>(geo.pad);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(geo.in_w)) xrow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

// [B x C x P] <-> [C x (B*P)]
void batch_to_channel_major(const double* src, double* dst, std::size_t batch, std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + (b * channels + c) * plane, plane, dst + c * batch * plane + b * plane);
}

void channel_major_to_batch(const double* src, double* dst, std::size_t batch, std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + c * batch * plane + b * plane, plane, dst + (b * channels + c) * plane);
}

void check_bias(const std::optional<Var>& bias, std::size_t channels, const char* op) {
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != channels)) {
    throw DimensionError(std::string(op) + ": bias " + to_string(bias->value().shape()) + " does not fit " +
                         std::to_string(channels) + " channels");
  }
}

}  // namespace

Var conv2d(Var x, Var kernel, std::optional<Var> bias, Conv2dOptions options) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(1)) {
    throw DimensionError("conv2d: input " + to_string(xv.shape()) + " does not fit kernel " + to_string(kv.shape()));
  }
  if (options.stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t ph = xv.dim(2) + 2 * options.padding, pw = xv.dim(3) + 2 * options.padding;
  if (kv.dim(2) > ph || kv.dim(3) > pw) {
    throw DimensionError("conv2d: kernel " + to_string(kv.shape()) + " larger than padded input " +
                         to_string(xv.shape()) + " (padding " + std::to_string(options.padding) + ")");
  }
  check_bias(bias, kv.dim(0), "conv2d");
  const ConvGeometry geo{xv.dim(0),      xv.dim(1),
                         xv.dim(2),      xv.dim(3),
                         kv.dim(2),      kv.dim(3),
                         options.stride, options.padding,
                         (ph - kv.dim(2)) / options.stride + 1,
                         (pw - kv.dim(3)) / options.stride + 1};
  const std::size_t filters = kv.dim(0);
  const std::size_t plane = geo.out_h * geo.out_w;

  auto cols = std::make_shared<AlignedBuffer>(geo.col_rows() * geo.col_cols());
  im2col(geo, xv.ptr(), cols->data());
  AlignedBuffer tmp(filters * geo.col_cols());
  view(tmp.data(), filters, geo.col_cols()).noalias() =
      view(kv.ptr(), filters, geo.col_rows()) * view(cols->data(), geo.col_rows(), geo.col_cols());
  Tensor out({geo.batch, filters, geo.out_h, geo.out_w});
  channel_major_to_batch(tmp.data(), out.ptr(), geo.batch, filters, plane);
  std::vector<Var> parents{x, kernel};
  std::uint32_t ib = 0;
  if (bias) {
    const Tensor& bv = bias->value();
    for (std::size_t b = 0; b < geo.batch; ++b)
      for (std::size_t f = 0; f < filters; ++f) {
        double* p = out.ptr() + (b * filters + f) * plane;
        for (std::size_t q = 0; q < plane; ++q) p[q] += bv[f];
      }
    parents.push_back(*bias);
    ib = bias->id();
  }
  const bool has_bias = bias.has_value();
  const auto ix = x.id(), ik = kernel.id();
  if (!x.graph().recording()) cols.reset();
  return x.graph().record("conv2d", std::move(out), parents,
                          [geo, filters, plane, cols, ix, ik, ib, has_bias](Graph& g, const Tensor& dout) {
                            AlignedBuffer d(filters * geo.col_cols());
                            batch_to_channel_major(dout.ptr(), d.data(), geo.batch, filters, plane);
                            const auto dm = view(d.data(), filters, geo.col_cols());
                            if (Tensor* s = g.grad_sink(ik)) {
                              view(s->ptr(), filters, geo.col_rows()).noalias() +=
                                  dm * view(cols->data(), geo.col_rows(), geo.col_cols()).transpose();
                            }
                            if (Tensor* s = g.grad_sink(ix)) {
                              AlignedBuffer dcols(geo.col_rows() * geo.col_cols());
                              view(dcols.data(), geo.col_rows(), geo.col_cols()).noalias() =
                                  view(g.value(ik).ptr(), filters, geo.col_rows()).transpose() * dm;
                              col2im(geo, dcols.data(), s->ptr());
                            }
                            if (has_bias) {
                              if (Tensor* s = g.grad_sink(ib)) {
                                view(s->ptr(), filters, 1) += dm.rowwise().sum();
                              }
                            }
                          });
}

Var conv2d_transposed(Var x, Var kernel, std::optional<Var> bias, Conv2dOptions options) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(0)) {
    throw DimensionError("conv2d_transposed: input " + to_string(xv.shape()) + " does not fit kernel " +
                         to_string(kv.shape()));
  }
  if (options.stride == 0) throw ConfigError("conv2d_transposed: stride must be positive");
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((xv.dim(2) - 1) * options.stride + kv.dim(2)) -
                            2 * static_cast<std::ptrdiff_t>(options.padding);
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((xv.dim(3) - 1) * options.stride + kv.dim(3)) -
                            2 * static_cast<std::ptrdiff_t>(options.padding);
  if (oh < 1 || ow < 1) {
    throw DimensionError("conv2d_transposed: kernel " + to_string(kv.shape()) + " with padding " +
                         std::to_string(options.padding) + " yields an empty output for input " +
                         to_string(xv.shape()));
  }
  const std::size_t in_ch = kv.dim(0), out_ch = kv.dim(1);
  check_bias(bias, out_ch, "conv2d_transposed");
  // The forward pass is col2im of the equivalent conv2d acting on the output grid.
  const ConvGeometry geo{xv.dim(0),      out_ch,
                         static_cast<std::size_t>(oh),
                         static_cast<std::size_t>(ow),
                         kv.dim(2),      kv.dim(3),
                         options.stride, options.padding,
                         xv.dim(2),      xv.dim(3)};
  const std::size_t plane = geo.out_h * geo.out_w;  // input plane of this op
  const std::size_t out_plane = geo.in_h * geo.in_w;

  auto xm = std::make_shared<AlignedBuffer>(in_ch * geo.col_cols());
  batch_to_channel_major(xv.ptr(), xm->data(), geo.batch, in_ch, plane);
  AlignedBuffer cols(geo.col_rows() * geo.col_cols());
  view(cols.data(), geo.col_rows(), geo.col_cols()).noalias() =
      view(kv.ptr(), in_ch, geo.col_rows()).transpose() * view(xm->data(), in_ch, geo.col_cols());
  Tensor out({geo.batch, out_ch, geo.in_h, geo.in_w}, 0.0);
  col2im(geo, cols.data(), out.ptr());
  std::vector<Var> parents{x, kernel};
  std::uint32_t ib = 0;
  if (bias) {
    const Tensor& bv = bias->value();
    for (std::size_t b = 0; b < geo.batch; ++b)
      for (std::size_t c = 0; c < out_ch; ++c) {
        double* p = out.ptr() + (b * out_ch + c) * out_plane;
        for (std::size_t q = 0; q < out_plane; ++q) p[q] += bv[c];
      }
    parents.push_back(*bias);
    ib = bias->id();
  }
  const bool has_bias = bias.has_value();
  const auto ix = x.id(), ik = kernel.id();
  if (!x.graph().recording()) xm.reset();
  return x.graph().record(
      "conv2d_transposed", std::move(out), parents,
      [geo, in_ch, out_ch, plane, out_plane, xm, ix, ik, ib, has_bias](Graph& g, const Tensor& dout) {
        AlignedBuffer dcols(geo.col_rows() * geo.col_cols());
        im2col(geo, dout.ptr(), dcols.data());
        const auto dc = view(dcols.data(), geo.col_rows(), geo.col_cols());
        if (Tensor* s = g.grad_sink(ik)) {
          view(s->ptr(), in_ch, geo.col_rows()).noalias() += view(xm->data(), in_ch, geo.col_cols()) * dc.transpose();
        }
        if (Tensor* s = g.grad_sink(ix)) {
          AlignedBuffer dx(in_ch * geo.col_cols());
          view(dx.data(), in_ch, geo.col_cols()).noalias() = view(g.value(ik).ptr(), in_ch, geo.col_rows()) * dc;
          AlignedBuffer back(s->size());
          channel_major_to_batch(dx.data(), back.data(), geo.batch, in_ch, plane);
          for (std::size_t i = 0; i < back.size(); ++i) (*s)[i] += back[i];
        }
        if (has_bias) {
          if (Tensor* s = g.grad_sink(ib)) {
            for (std::size_t b = 0; b < geo.batch; ++b)
              for (std::size_t c = 0; c < out_ch; ++c) {
                const double* p = dout.ptr() + (b * out_ch + c) * out_plane;
                double acc = 0.0;
                for (std::size_t q = 0; q < out_plane; ++q) acc += p[q];
                (*s)[c] += acc;
              }
          }
        }
      });
}

// Normalization -----------------------------------------------------------------

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, double eps, double momentum, Mode mode) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 4) {
    throw DimensionError("batchnorm2d: expected [B x C] or [B x C x H x W], got " + to_string(xv.shape()));
  }
  const std::size_t batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t plane = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  const Shape cshape{channels};
  if (gamma.value().shape() != cshape || beta.value().shape() != cshape) {
    throw DimensionError("batchnorm2d: affine parameters must have shape " + to_string(cshape));
  }
  if (state.running_mean.shape() != cshape || state.running_var.shape() != cshape) {
    throw DimensionError("batchnorm2d: running statistics do not match " + std::to_string(channels) + " channels");
  }
  if (mode == Mode::Train && batch < 2) {
    throw ConfigError("batchnorm2d: train mode needs a batch of at least 2, got " + std::to_string(batch));
  }
  const std::size_t count = batch * plane;
  auto mean_v = std::make_shared<AlignedBuffer>(channels);
  auto inv_std = std::make_shared<AlignedBuffer>(channels);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.ptr() + (b * channels + c) * plane;
        for (std::size_t q = 0; q < plane; ++q) s += p[q];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.ptr() + (b * channels + c) * plane;
        for (std::size_t q = 0; q < plane; ++q) v += (p[q] - mu) * (p[q] - mu);
      }
      const double var = v / static_cast<double>(count);
      (*mean_v)[c] = mu;
      (*inv_std)[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = v / static_cast<double>(count - 1);
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      (*mean_v)[c] = state.running_mean[c];
      (*inv_std)[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
    }
  }
  Tensor out(xv.shape());
  auto xhat = std::make_shared<AlignedBuffer>(xv.size());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const double h = (xv[off + q] - (*mean_v)[c]) * (*inv_std)[c];
        (*xhat)[off + q] = h;
        out[off + q] = gv[c] * h + bv[c];
      }
    }
  const auto ix = x.id(), ig = gamma.id(), ibt = beta.id();
  const bool train = mode == Mode::Train;
  return x.graph().record(
      "batchnorm2d", std::move(out), {x, gamma, beta},
      [=](Graph& g, const Tensor& dout) {
        const Tensor& gam = g.value(ig);
        Tensor* sg = g.grad_sink(ig);
        Tensor* sb = g.grad_sink(ibt);
        Tensor* sx = g.grad_sink(ix);
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_d = 0.0, sum_dh = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              sum_d += dout[off + q];
              sum_dh += dout[off + q] * (*xhat)[off + q];
            }
          }
          if (sg) (*sg)[c] += sum_dh;
          if (sb) (*sb)[c] += sum_d;
          if (!sx) continue;
          const double k = gam[c] * (*inv_std)[c];
          const double n = static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              if (train) {
                (*sx)[off + q] += k * (dout[off + q] - sum_d / n - (*xhat)[off + q] * sum_dh / n);
              } else {
                (*sx)[off + q] += k * dout[off + q];
              }
            }
          }
        }
      });
}

// Activations -------------------------------------------------------------------

Var activate(Var x, Activation act) {
  if (act.kind == ActivationKind::Identity) return x;
  Tensor out = x.value();
  auto local = std::make_shared<AlignedBuffer>(out.size());
  auto& d = *local;
  const char* name = "";
  switch (act.kind) {
    case ActivationKind::ReLU:
      name = "relu";
      for (std::size_t i = 0; i < out.size(); ++i) {
        d[i] = out[i] > 0.0 ? 1.0 : 0.0;
        out[i] = out[i] > 0.0 ? out[i] : 0.0;
      }
      break;
    case ActivationKind::LeakyReLU:
      name = "leaky_relu";
      for (std::size_t i = 0; i < out.size(); ++i) {
        d[i] = out[i] > 0.0 ? 1.0 : act.alpha;
        out[i] = out[i] > 0.0 ? out[i] : act.alpha * out[i];
      }
      break;
    case ActivationKind::Sigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = stable_sigmoid(out[i]);
        d[i] = out[i] * (1.0 - out[i]);
      }
      break;
    case ActivationKind::Tanh:
      name = "tanh";
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::tanh(out[i]);
        d[i] = 1.0 - out[i] * out[i];
      }
      break;
    case ActivationKind::Identity:
      break;
  }
  const auto ix = x.id();
  return x.graph().record(name, std::move(out), {x}, [ix, local](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += dout[i] * (*local)[i];
    }
  });
}

}  // namespace hardaware
