#include <algorithm>
#include <memory>

#include "hardaware/errors.hpp"
#include "hardaware/ops.hpp"

namespace hardaware {

namespace {

void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw DimensionError(std::string(op) + ": expected [B x C x H x W], got " + to_string(t.shape()));
}

}  // namespace

Var avgpool2d(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  require_rank4(xv, "avgpool2d");
  if (k == 0 || xv.dim(2) < k || xv.dim(3) < k) {
    throw DimensionError("avgpool2d: window " + std::to_string(k) + " does not fit " + to_string(xv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({xv.dim(0), xv.dim(1), oh, ow}, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) s += xv[(p * h + i * k + a) * w + j * k + b];
        out[(p * oh + i) * ow + j] = s * inv;
      }
  const auto ix = x.id();
  return x.graph().record("avgpool2d", std::move(out), {x}, [=](Graph& g, const Tensor& dout) {
    Tensor* s = g.grad_sink(ix);
    if (!s) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double d = dout[(p * oh + i) * ow + j] * inv;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) (*s)[(p * h + i * k + a) * w + j * k + b] += d;
        }
  });
}

Var maxpool2d(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  require_rank4(xv, "maxpool2d");
  if (k == 0 || xv.dim(2) < k || xv.dim(3) < k) {
    throw DimensionError("maxpool2d: window " + std::to_string(k) + " does not fit " + to_string(xv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (p * h + i * k) * w + j * k;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) {
            const std::size_t idx = (p * h + i * k + a) * w + j * k + b;
            if (xv[idx] > xv[best]) best = idx;  // first maximum wins ties
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  const auto ix = x.id();
  return x.graph().record("maxpool2d", std::move(out), {x}, [ix, argmax](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t o = 0; o < dout.size(); ++o) (*s)[(*argmax)[o]] += dout[o];
    }
  });
}

Var global_avgpool(Var x) {
  const Tensor& xv = x.value();
  require_rank4(xv, "global_avgpool");
  const std::size_t planes = xv.dim(0) * xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor out({xv.dim(0), xv.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t q = 0; q < plane; ++q) s += xv[p * plane + q];
    out[p] = s * inv;
  }
  const auto ix = x.id();
  return x.graph().record("global_avgpool", std::move(out), {x}, [=](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t q = 0; q < plane; ++q) (*s)[p * plane + q] += dout[p] * inv;
    }
  });
}

Var dropout(Var x, double p, Mode mode, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::bernoulli_distribution keep(1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? keep_scale : 0.0;
    out[i] *= (*mask)[i];
  }
  const auto ix = x.id();
  return x.graph().record("dropout", std::move(out), {x}, [ix, mask](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += dout[i] * (*mask)[i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.graph().record("reshape", std::move(out), {x}, [ix](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t i = 0; i < dout.size(); ++i) (*s)[i] += dout[i];
    }
  });
}

Var flatten(Var x) {
  const Tensor& xv = x.value();
  return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
}

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " disagrees with " + to_string(first) + " outside axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;
  Tensor out(out_shape);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets, widths;
  std::size_t offset = 0;
  for (const Var& v : xs) {
    const std::size_t width = v.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.value().ptr() + o * width, width, out.ptr() + o * out_row + offset);
    ids.push_back(v.id());
    offsets.push_back(offset);
    widths.push_back(width);
    offset += width;
  }
  return xs[0].graph().record("concat", std::move(out), std::vector<Var>(xs.begin(), xs.end()),
                              [=](Graph& g, const Tensor& dout) {
                                for (std::size_t k = 0; k < ids.size(); ++k) {
                                  Tensor* s = g.grad_sink(ids[k]);
                                  if (!s) continue;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t q = 0; q < widths[k]; ++q)
                                      (*s)[o * widths[k] + q] += dout[o * out_row + offsets[k] + q];
                                }
                              });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& shape = x.shape();
  if (axis >= shape.size() || begin >= end || end > shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " does not fit " + to_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  Shape out_shape = shape;
  out_shape[axis] = end - begin;
  const std::size_t in_row = shape[axis] * inner, width = (end - begin) * inner, start = begin * inner;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.value().ptr() + o * in_row + start, width, out.ptr() + o * width);
  const auto ix = x.id();
  return x.graph().record("slice", std::move(out), {x}, [=](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t q = 0; q < width; ++q) (*s)[o * in_row + start + q] += dout[o * width + q];
    }
  });
}

Var tile_spatial(Var x, std::size_t h, std::size_t w) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || h == 0 || w == 0) throw DimensionError("tile_spatial: expected [B x K], got " + to_string(xv.shape()));
  const std::size_t rows = xv.size(), plane = h * w;
  Tensor out({xv.dim(0), xv.dim(1), h, w});
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.ptr() + r * plane, plane, xv[r]);
  const auto ix = x.id();
  return x.graph().record("tile_spatial", std::move(out), {x}, [=](Graph& g, const Tensor& dout) {
    if (Tensor* s = g.grad_sink(ix)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t q = 0; q < plane; ++q) acc += dout[r * plane + q];
        (*s)[r] += acc;
      }
    }
  });
}

}  // namespace hardaware
