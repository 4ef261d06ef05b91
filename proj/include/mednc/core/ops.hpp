#pragma once

// Forward and backward kernels for the layer primitives. These are free
// functions over Tensor so they can be checked in isolation; the graph
// executor in graph.hpp only dispatches to them.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mednc/core/errors.hpp"
#include "mednc/core/rng.hpp"
#include "mednc/core/tensor.hpp"

namespace mednc::ops {

enum class Mode { train, eval };

/// Clamp floor for log() inside cross-entropy.
inline constexpr double kLogEpsilon = 1e-12;

/// Row-sum tolerance for cross-entropy inputs.
template <typename Scalar>
constexpr double probability_tolerance() {
  return std::is_same_v<Scalar, float> ? 1e-5 : 1e-9;
}

// ---------------------------------------------------------------------------
// Shape helpers

inline Index conv_output_extent(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

inline Index pool_output_extent(Index in, Index window, Index stride) {
  return (in - window) / stride + 1;
}

inline Index normalize_axis(Index axis, Index rank) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return a;
}

// ---------------------------------------------------------------------------
// relu

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.values().cwiseMax(Scalar(0)));
}

/// Subgradient at exactly zero is 0.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  return Tensor<Scalar>(
      x.shape(), (x.values().array() > Scalar(0)).select(grad_out.values().array(), Scalar(0)).matrix());
}

// ---------------------------------------------------------------------------
// softmax

struct AxisLayout {
  Index outer, extent, inner;
};

inline AxisLayout axis_layout(const Shape& shape, Index axis) {
  AxisLayout l{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) l.inner *= shape[static_cast<std::size_t>(i)];
  return l;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  axis = normalize_axis(axis, x.rank());
  const auto l = axis_layout(x.shape(), axis);
  Tensor<Scalar> y(x.shape());
  const Scalar* in = x.data();
  Scalar* out = y.data();
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      const Index base = o * l.extent * l.inner + i;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < l.extent; ++j) m = std::max(m, in[base + j * l.inner]);
      Scalar total = 0;
      for (Index j = 0; j < l.extent; ++j) {
        const Scalar e = std::exp(in[base + j * l.inner] - m);
        out[base + j * l.inner] = e;
        total += e;
      }
      for (Index j = 0; j < l.extent; ++j) out[base + j * l.inner] /= total;
    }
  }
  return y;
}

/// Jacobian-transpose product using the forward output: s * (g - <g, s>).
template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& grad_out, Index axis) {
  axis = normalize_axis(axis, y.rank());
  const auto l = axis_layout(y.shape(), axis);
  Tensor<Scalar> gx(y.shape());
  const Scalar* s = y.data();
  const Scalar* g = grad_out.data();
  Scalar* out = gx.data();
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      const Index base = o * l.extent * l.inner + i;
      Scalar dot = 0;
      for (Index j = 0; j < l.extent; ++j) dot += g[base + j * l.inner] * s[base + j * l.inner];
      for (Index j = 0; j < l.extent; ++j) {
        const Index k = base + j * l.inner;
        out[k] = s[k] * (g[k] - dot);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// dense

inline void check_dense_shapes(const Shape& x, const Shape& w, const Shape& b) {
  if (x.size() != 2 || w.size() != 2 || b.size() != 1 || x[1] != w[0] || b[0] != w[1]) {
    throw DimensionError("dense: input " + shape_string(x) + " does not conform to weights " +
                         shape_string(w) + " and bias " + shape_string(b));
  }
}

template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  check_dense_shapes(x.shape(), w.shape(), b.shape());
  Tensor<Scalar> y(Shape{x.dim(0), w.dim(1)});
  y.matrix().noalias() = x.matrix() * w.matrix();
  y.matrix().rowwise() += b.values().transpose();
  return y;
}

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> x, w, b;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                  const Tensor<Scalar>& grad_out) {
  DenseGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(w.shape()), Tensor<Scalar>(Shape{w.dim(1)})};
  const auto gy = grad_out.matrix();
  g.x.matrix().noalias() = gy * w.matrix().transpose();
  g.w.matrix().noalias() = x.matrix().transpose() * gy;
  g.b.values() = gy.colwise().sum().transpose();
  return g;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no kernel flip)

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;

  Index patch() const { return in_channels * kernel_h * kernel_w; }
  Index positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, Index stride, Index padding) {
  if (x.size() != 4 || k.size() != 4 || x[1] != k[1]) {
    throw DimensionError("conv2d: input " + shape_string(x) + " does not conform to kernel " +
                         shape_string(k));
  }
  if (stride < 1 || padding < 0) {
    throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  }
  if (k[2] > x[2] + 2 * padding || k[3] > x[3] + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(k) + " larger than padded input " +
                         shape_string(x) + " with padding " + std::to_string(padding));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[2], k[3], stride, padding, 0, 0};
  g.out_h = conv_output_extent(g.height, g.kernel_h, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kernel_w, stride, padding);
  return g;
}

namespace detail {

/// Unfolds one image (C, H, W) into a (C*kh*kw, out_h*out_w) column matrix.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  cols.resize(g.patch(), g.positions());
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Index row = (c * g.kernel_h + ki) * g.kernel_w + kj;
        for (Index oi = 0; oi < g.out_h; ++oi) {
          const Index ii = oi * g.stride - g.padding + ki;
          for (Index oj = 0; oj < g.out_w; ++oj) {
            const Index jj = oj * g.stride - g.padding + kj;
            const bool inside = ii >= 0 && ii < g.height && jj >= 0 && jj < g.width;
            cols(row, oi * g.out_w + oj) = inside ? image[(c * g.height + ii) * g.width + jj] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Index row = (c * g.kernel_h + ki) * g.kernel_w + kj;
        for (Index oi = 0; oi < g.out_h; ++oi) {
          const Index ii = oi * g.stride - g.padding + ki;
          if (ii < 0 || ii >= g.height) continue;
          for (Index oj = 0; oj < g.out_w; ++oj) {
            const Index jj = oj * g.stride - g.padding + kj;
            if (jj < 0 || jj >= g.width) continue;
            image[(c * g.height + ii) * g.width + jj] += cols(row, oi * g.out_w + oj);
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, Index stride, Index padding) {
  const auto g = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  Tensor<Scalar> y(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  const Eigen::Map<const RowMatrix<Scalar>> k(kernel.data(), g.out_channels, g.patch());
  RowMatrix<Scalar> cols;
  const Index in_stride = g.in_channels * g.height * g.width;
  const Index out_stride = g.out_channels * g.positions();
  for (Index b = 0; b < g.batch; ++b) {
    detail::im2col(x.data() + b * in_stride, g, cols);
    Eigen::Map<RowMatrix<Scalar>> out(y.data() + b * out_stride, g.out_channels, g.positions());
    out.noalias() = k * cols;
  }
  return y;
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> x, kernel;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                                  const Tensor<Scalar>& grad_out, Index stride, Index padding,
                                  bool need_input_grad = true) {
  const auto g = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  ConvGrads<Scalar> grads{Tensor<Scalar>(x.shape()), Tensor<Scalar>(kernel.shape())};
  const Eigen::Map<const RowMatrix<Scalar>> k(kernel.data(), g.out_channels, g.patch());
  Eigen::Map<RowMatrix<Scalar>> gk(grads.kernel.data(), g.out_channels, g.patch());
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> gcols;
  const Index in_stride = g.in_channels * g.height * g.width;
  const Index out_stride = g.out_channels * g.positions();
  for (Index b = 0; b < g.batch; ++b) {
    const Eigen::Map<const RowMatrix<Scalar>> gy(grad_out.data() + b * out_stride, g.out_channels,
                                                 g.positions());
    detail::im2col(x.data() + b * in_stride, g, cols);
    gk.noalias() += gy * cols.transpose();
    if (need_input_grad) {
      gcols.noalias() = k.transpose() * gy;
      detail::col2im_add(gcols, g, grads.x.data() + b * in_stride);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// maxpool2d

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // flat input index per output element
};

inline Shape pool_output_shape(const Shape& x, Index window, Index stride) {
  if (x.size() != 4) throw DimensionError("maxpool2d: expected (batch, channels, H, W), got " + shape_string(x));
  if (window < 1 || stride < 1) throw ConfigError("maxpool2d: window and stride must be >= 1");
  if (window > x[2] || window > x[3]) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds spatial extent of " +
                         shape_string(x));
  }
  return {x[0], x[1], pool_output_extent(x[2], window, stride), pool_output_extent(x[3], window, stride)};
}

/// Ties resolve to the first maximal element in row-major window order.
template <typename Scalar>
PoolResult<Scalar> maxpool2d(const Tensor<Scalar>& x, Index window, Index stride) {
  const Shape out_shape = pool_output_shape(x.shape(), window, stride);
  PoolResult<Scalar> r{Tensor<Scalar>(out_shape), std::vector<Index>(static_cast<std::size_t>(shape_size(out_shape)))};
  const Index H = x.dim(2), W = x.dim(3), oh = out_shape[2], ow = out_shape[3];
  const Index planes = x.dim(0) * x.dim(1);
  Index o = 0;
  for (Index p = 0; p < planes; ++p) {
    const Index plane = p * H * W;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j, ++o) {
        Index best = plane + (i * stride) * W + j * stride;
        for (Index di = 0; di < window; ++di) {
          for (Index dj = 0; dj < window; ++dj) {
            const Index idx = plane + (i * stride + di) * W + (j * stride + dj);
            if (x[idx] > x[best]) best = idx;
          }
        }
        r.output[o] = x[best];
        r.argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> maxpool2d_backward(const Shape& input_shape, std::span<const Index> argmax,
                                  const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> gx(input_shape);
  for (Index o = 0; o < grad_out.size(); ++o) gx[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
  return gx;
}

// ---------------------------------------------------------------------------
// flatten

inline Shape flatten_shape(const Shape& x) {
  if (x.empty()) throw DimensionError("flatten: input needs a leading batch dimension");
  Index rest = 1;
  for (std::size_t i = 1; i < x.size(); ++i) rest *= x[i];
  return {x[0], rest};
}

template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x) {
  return x.reshaped(flatten_shape(x.shape()));
}

// ---------------------------------------------------------------------------
// dropout

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

template <typename Scalar>
struct DropoutResult {
  Tensor<Scalar> output;
  Vector<Scalar> mask;  // 0 or 1/(1-rate); empty means identity
};

/// Inverted dropout. Eval mode, or a zero rate, is the identity.
template <typename Scalar>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& x, double rate, Mode mode, Rng* rng) {
  check_dropout_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return {x, {}};
  if (rng == nullptr) throw StateError("dropout in train mode requires a generator");
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  Vector<Scalar> mask(x.size());
  for (Index i = 0; i < x.size(); ++i) mask[i] = rng->uniform() < rate ? Scalar(0) : keep_scale;
  return {Tensor<Scalar>(x.shape(), x.values().cwiseProduct(mask)), std::move(mask)};
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const Vector<Scalar>& mask, const Tensor<Scalar>& grad_out) {
  if (mask.size() == 0) return grad_out;
  return Tensor<Scalar>(grad_out.shape(), grad_out.values().cwiseProduct(mask));
}

// ---------------------------------------------------------------------------
// concatenate

inline Shape concat_shape(std::span<const Shape> parts, Index axis) {
  if (parts.empty()) throw DimensionError("concatenate: no parts");
  const Index rank = static_cast<Index>(parts[0].size());
  axis = normalize_axis(axis, rank);
  Shape out = parts[0];
  out[static_cast<std::size_t>(axis)] = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    bool ok = static_cast<Index>(parts[p].size()) == rank;
    for (Index d = 0; ok && d < rank; ++d) {
      if (d != axis && parts[p][static_cast<std::size_t>(d)] != parts[0][static_cast<std::size_t>(d)]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concatenate: part " + std::to_string(p) + " has shape " + shape_string(parts[p]) +
                           ", incompatible with part 0 shape " + shape_string(parts[0]) + " on axis " +
                           std::to_string(axis));
    }
    out[static_cast<std::size_t>(axis)] += parts[p][static_cast<std::size_t>(axis)];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concatenate(std::span<const Tensor<Scalar>* const> parts, Index axis) {
  std::vector<Shape> shapes;
  for (const auto* p : parts) shapes.push_back(p->shape());
  const Shape out_shape = concat_shape(shapes, axis);
  axis = normalize_axis(axis, static_cast<Index>(out_shape.size()));
  const auto l = axis_layout(out_shape, axis);
  Tensor<Scalar> y(out_shape);
  Index offset = 0;
  for (const auto* p : parts) {
    const Index chunk = p->dim(axis) * l.inner;
    for (Index o = 0; o < l.outer; ++o) {
      y.values().segment(o * l.extent * l.inner + offset, chunk) = p->values().segment(o * chunk, chunk);
    }
    offset += chunk;
  }
  return y;
}

/// Splits gradient (or values) of a concatenation back into part shapes.
template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& joined, std::span<const Shape> part_shapes, Index axis) {
  axis = normalize_axis(axis, joined.rank());
  const auto l = axis_layout(joined.shape(), axis);
  std::vector<Tensor<Scalar>> parts;
  Index offset = 0;
  for (const auto& s : part_shapes) {
    Tensor<Scalar> part(s);
    const Index chunk = s[static_cast<std::size_t>(axis)] * l.inner;
    for (Index o = 0; o < l.outer; ++o) {
      part.values().segment(o * chunk, chunk) = joined.values().segment(o * l.extent * l.inner + offset, chunk);
    }
    offset += chunk;
    parts.push_back(std::move(part));
  }
  return parts;
}

// ---------------------------------------------------------------------------
// cross_entropy

template <typename Scalar>
void check_probability_rows(const Tensor<Scalar>& predicted, const Tensor<Scalar>& target) {
  if (predicted.rank() != 2 || predicted.shape() != target.shape()) {
    throw DimensionError("cross_entropy: predicted " + shape_string(predicted.shape()) + " and target " +
                         shape_string(target.shape()) + " must both be (batch, k)");
  }
  const auto rows = predicted.matrix().rowwise().sum();
  for (Index r = 0; r < rows.size(); ++r) {
    if (std::abs(static_cast<double>(rows[r]) - 1.0) > probability_tolerance<Scalar>()) {
      throw ContractError("cross_entropy: predicted row " + std::to_string(r) + " sums to " +
                          std::to_string(static_cast<double>(rows[r])) + ", not 1");
    }
  }
}

/// Mean over the batch of -sum_c t_c log(max(f_c, eps)).
template <typename Scalar>
Scalar cross_entropy(const Tensor<Scalar>& predicted, const Tensor<Scalar>& target) {
  check_probability_rows(predicted, target);
  const Scalar floor = Scalar(kLogEpsilon);
  Scalar total = 0;
  for (Index i = 0; i < predicted.size(); ++i) {
    if (target[i] != Scalar(0)) total -= target[i] * std::log(std::max(predicted[i], floor));
  }
  return predicted.dim(0) == 0 ? Scalar(0) : total / Scalar(predicted.dim(0));
}

template <typename Scalar>
Tensor<Scalar> cross_entropy_backward(const Tensor<Scalar>& predicted, const Tensor<Scalar>& target,
                                      Scalar grad_out) {
  Tensor<Scalar> g(predicted.shape());
  const Scalar floor = Scalar(kLogEpsilon);
  const Scalar scale = grad_out / Scalar(std::max<Index>(predicted.dim(0), 1));
  for (Index i = 0; i < predicted.size(); ++i) {
    g[i] = predicted[i] > floor ? -scale * target[i] / predicted[i] : Scalar(0);
  }
  return g;
}

}  // namespace mednc::ops
