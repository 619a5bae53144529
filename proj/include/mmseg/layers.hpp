#ifndef MMSEG_LAYERS_HPP
#define MMSEG_LAYERS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "mmseg/tensor.hpp"

namespace mmseg {

inline constexpr double kLeakySlope = 0.01;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Cubic 3D convolution with "same" padding for stride 1. Weight layout is
/// (out, in, k, k, k), matching the im2col row ordering below.
template <typename Scalar>
struct Conv3d {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index dilation = 1;
  Param<Scalar> weight;
  Param<Scalar> bias;

  Conv3d() = default;
  Conv3d(Index in, Index out, Index kernel_size, Index stride_ = 1,
         Index dilation_ = 1)
      : in_channels(in), out_channels(out), kernel(kernel_size),
        stride(stride_), dilation(dilation_),
        weight({out, in, kernel_size, kernel_size, kernel_size}),
        bias({out}) {}

  Index padding() const { return dilation * (kernel - 1) / 2; }
  Index taps() const { return kernel * kernel * kernel; }

  Index output_extent(Index in) const {
    return (in + 2 * padding() - dilation * (kernel - 1) - 1) / stride + 1;
  }

  Shape5 output_shape(const Shape5& in) const {
    return {in.batch, out_channels, output_extent(in.depth),
            output_extent(in.height), output_extent(in.width)};
  }

  template <class Rng>
  void init_he_uniform(Rng& rng) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(in_channels * taps()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < weight.size(); ++i)
      weight.value[i] = static_cast<Scalar>(dist(rng));
    bias.value.setZero();
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

namespace detail {

struct ConvGeometry {
  Index in_d, in_h, in_w;
  Index out_d, out_h, out_w;
  Index kernel, stride, dilation, pad;
};

template <typename Scalar>
ConvGeometry geometry(const Conv3d<Scalar>& conv, const Shape5& in) {
  const Shape5 out = conv.output_shape(in);
  return {in.depth,  in.height,   in.width,      out.depth,
          out.height, out.width,  conv.kernel,   conv.stride,
          conv.dilation, conv.padding()};
}

// Valid output-column range [lo, hi) along w for a given tap offset.
inline void valid_columns(const ConvGeometry& g, Index offset, Index& lo,
                          Index& hi) {
  lo = offset >= 0 ? 0 : (-offset + g.stride - 1) / g.stride;
  const Index last = g.in_w - 1 - offset;
  hi = last < 0 ? 0 : std::min(g.out_w, last / g.stride + 1);
  lo = std::min(lo, hi);
}

// Gather the receptive fields of output rows [row0, row0+rows) into col,
// where an output row is one (od, oh) line of out_w voxels.
template <typename Scalar>
void im2col(const Scalar* x, Index in_channels, const ConvGeometry& g,
            Index row0, Index rows, RowMatrix<Scalar>& col) {
  const Index k = g.kernel;
  const Index n = rows * g.out_w;
  col.resize(in_channels * k * k * k, n);
  Index r = 0;
  for (Index ci = 0; ci < in_channels; ++ci) {
    const Scalar* xc = x + ci * g.in_d * g.in_h * g.in_w;
    for (Index kd = 0; kd < k; ++kd)
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw, ++r) {
          Scalar* dst = col.row(r).data();
          const Index off_w = kw * g.dilation - g.pad;
          Index lo, hi;
          valid_columns(g, off_w, lo, hi);
          for (Index rr = 0; rr < rows; ++rr) {
            const Index line = row0 + rr;
            const Index od = line / g.out_h;
            const Index oh = line % g.out_h;
            const Index id = od * g.stride - g.pad + kd * g.dilation;
            const Index ih = oh * g.stride - g.pad + kh * g.dilation;
            Scalar* out = dst + rr * g.out_w;
            if (id < 0 || id >= g.in_d || ih < 0 || ih >= g.in_h) {
              std::fill(out, out + g.out_w, Scalar(0));
              continue;
            }
            const Scalar* src = xc + (id * g.in_h + ih) * g.in_w;
            std::fill(out, out + lo, Scalar(0));
            if (g.stride == 1) {
              std::copy(src + lo + off_w, src + hi + off_w, out + lo);
            } else {
              for (Index ow = lo; ow < hi; ++ow)
                out[ow] = src[ow * g.stride + off_w];
            }
            std::fill(out + hi, out + g.out_w, Scalar(0));
          }
        }
  }
}

// Scatter-add of im2col.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, Index in_channels,
            const ConvGeometry& g, Index row0, Index rows, Scalar* dx) {
  const Index k = g.kernel;
  Index r = 0;
  for (Index ci = 0; ci < in_channels; ++ci) {
    Scalar* dxc = dx + ci * g.in_d * g.in_h * g.in_w;
    for (Index kd = 0; kd < k; ++kd)
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw, ++r) {
          const Scalar* src_row = col.row(r).data();
          const Index off_w = kw * g.dilation - g.pad;
          Index lo, hi;
          valid_columns(g, off_w, lo, hi);
          for (Index rr = 0; rr < rows; ++rr) {
            const Index line = row0 + rr;
            const Index od = line / g.out_h;
            const Index oh = line % g.out_h;
            const Index id = od * g.stride - g.pad + kd * g.dilation;
            const Index ih = oh * g.stride - g.pad + kh * g.dilation;
            if (id < 0 || id >= g.in_d || ih < 0 || ih >= g.in_h) continue;
            Scalar* dst = dxc + (id * g.in_h + ih) * g.in_w;
            const Scalar* in = src_row + rr * g.out_w;
            for (Index ow = lo; ow < hi; ++ow)
              dst[ow * g.stride + off_w] += in[ow];
          }
        }
  }
}

inline Index rows_per_chunk(Index out_w) {
  return std::max<Index>(1, 512 / std::max<Index>(1, out_w));
}

template <typename Scalar>
bool is_pointwise(const Conv3d<Scalar>& c) {
  return c.kernel == 1 && c.stride == 1;
}

} // namespace detail

template <typename Scalar>
Tensor5<Scalar> conv3d_forward(const Conv3d<Scalar>& conv,
                               const Tensor5<Scalar>& x) {
  if (x.channels() != conv.in_channels)
    throw Error(ErrorCode::ShapeMismatch,
                "conv expects " + std::to_string(conv.in_channels) +
                    " input channels, got " + to_string(x.shape()));
  Tensor5<Scalar> y(conv.output_shape(x.shape()));
  const auto w = Eigen::Map<const RowMatrix<Scalar>>(
      conv.weight.value.data(), conv.out_channels,
      conv.in_channels * conv.taps());

  if (detail::is_pointwise(conv)) {
    for (Index n = 0; n < x.batch(); ++n)
      y.sample(n).noalias() = w * x.sample(n);
  } else {
    const auto g = detail::geometry(conv, x.shape());
    const Index lines = g.out_d * g.out_h;
    const Index chunk = detail::rows_per_chunk(g.out_w);
    RowMatrix<Scalar> col;
    for (Index n = 0; n < x.batch(); ++n) {
      auto yn = y.sample(n);
      const Scalar* xn = x.sample(n).data();
      for (Index line = 0; line < lines; line += chunk) {
        const Index rows = std::min(chunk, lines - line);
        detail::im2col(xn, conv.in_channels, g, line, rows, col);
        yn.middleCols(line * g.out_w, rows * g.out_w).noalias() = w * col;
      }
    }
  }
  for (Index n = 0; n < y.batch(); ++n)
    y.sample(n).colwise() += conv.bias.value;
  return y;
}

/// Accumulates weight/bias gradients into conv and returns the gradient with
/// respect to the input x that produced dy.
template <typename Scalar>
Tensor5<Scalar> conv3d_backward(Conv3d<Scalar>& conv, const Tensor5<Scalar>& x,
                                const Tensor5<Scalar>& dy) {
  Tensor5<Scalar> dx(x.shape());
  const Index fan = conv.in_channels * conv.taps();
  const auto w = Eigen::Map<const RowMatrix<Scalar>>(
      conv.weight.value.data(), conv.out_channels, fan);
  auto dw = Eigen::Map<RowMatrix<Scalar>>(conv.weight.grad.data(),
                                          conv.out_channels, fan);
  for (Index n = 0; n < dy.batch(); ++n)
    conv.bias.grad += dy.sample(n).rowwise().sum();

  if (detail::is_pointwise(conv)) {
    for (Index n = 0; n < x.batch(); ++n) {
      dw.noalias() += dy.sample(n) * x.sample(n).transpose();
      dx.sample(n).noalias() = w.transpose() * dy.sample(n);
    }
    return dx;
  }

  const auto g = detail::geometry(conv, x.shape());
  const Index lines = g.out_d * g.out_h;
  const Index chunk = detail::rows_per_chunk(g.out_w);
  RowMatrix<Scalar> col, dcol;
  for (Index n = 0; n < x.batch(); ++n) {
    const auto dyn = dy.sample(n);
    const Scalar* xn = x.sample(n).data();
    Scalar* dxn = dx.sample(n).data();
    for (Index line = 0; line < lines; line += chunk) {
      const Index rows = std::min(chunk, lines - line);
      const auto dblock = dyn.middleCols(line * g.out_w, rows * g.out_w);
      detail::im2col(xn, conv.in_channels, g, line, rows, col);
      dw.noalias() += dblock * col.transpose();
      dcol.noalias() = w.transpose() * dblock;
      detail::col2im(dcol, conv.in_channels, g, line, rows, dxn);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

template <typename Scalar>
struct InstanceNorm {
  Index channels = 0;
  Scalar eps = Scalar(1e-5);
  Param<Scalar> gamma;
  Param<Scalar> beta;

  InstanceNorm() = default;
  explicit InstanceNorm(Index c) : channels(c), gamma({c}), beta({c}) {
    gamma.value.setOnes();
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <typename Scalar>
struct NormCache {
  Tensor5<Scalar> normalized;
  RowMatrix<Scalar> inv_std; // batch x channels
};

template <typename Scalar>
Tensor5<Scalar> instance_norm_forward(const InstanceNorm<Scalar>& norm,
                                      const Tensor5<Scalar>& x,
                                      NormCache<Scalar>* cache = nullptr) {
  if (x.channels() != norm.channels)
    throw Error(ErrorCode::ShapeMismatch, "instance norm channel mismatch");
  Tensor5<Scalar> xhat(x.shape());
  RowMatrix<Scalar> inv_std(x.batch(), x.channels());
  const Scalar count = static_cast<Scalar>(x.spatial());
  for (Index n = 0; n < x.batch(); ++n) {
    const auto xn = x.sample(n);
    auto hn = xhat.sample(n);
    for (Index c = 0; c < x.channels(); ++c) {
      const Scalar mean = xn.row(c).sum() / count;
      const Scalar var = (xn.row(c).array() - mean).square().sum() / count;
      const Scalar inv = Scalar(1) / std::sqrt(var + norm.eps);
      inv_std(n, c) = inv;
      hn.row(c) = (xn.row(c).array() - mean) * inv;
    }
  }
  Tensor5<Scalar> y(x.shape());
  for (Index n = 0; n < x.batch(); ++n) {
    y.sample(n) = norm.gamma.value.asDiagonal() * xhat.sample(n);
    y.sample(n).colwise() += norm.beta.value;
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
Tensor5<Scalar> instance_norm_backward(InstanceNorm<Scalar>& norm,
                                       const NormCache<Scalar>& cache,
                                       const Tensor5<Scalar>& dy) {
  const auto& xhat = cache.normalized;
  Tensor5<Scalar> dx(dy.shape());
  const Scalar count = static_cast<Scalar>(dy.spatial());
  for (Index n = 0; n < dy.batch(); ++n) {
    const auto dyn = dy.sample(n);
    const auto hn = xhat.sample(n);
    auto dxn = dx.sample(n);
    norm.beta.grad += dyn.rowwise().sum();
    norm.gamma.grad += dyn.cwiseProduct(hn).rowwise().sum();
    for (Index c = 0; c < dy.channels(); ++c) {
      const Scalar gain = norm.gamma.value[c];
      const auto dh = (dyn.row(c).array() * gain).eval();
      const Scalar sum_dh = dh.sum();
      const Scalar sum_dh_h = (dh * hn.row(c).array()).sum();
      dxn.row(c) = (cache.inv_std(n, c) / count) *
                   (count * dh - sum_dh - hn.row(c).array() * sum_dh_h);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Activation and resampling
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor5<Scalar> leaky_relu(Tensor5<Scalar> x) {
  const Scalar slope = static_cast<Scalar>(kLeakySlope);
  x.data() = x.data().unaryExpr(
      [slope](Scalar v) { return v > Scalar(0) ? v : slope * v; });
  return x;
}

/// Backward through LeakyReLU given its output (the sign is preserved).
template <typename Scalar>
Tensor5<Scalar> leaky_relu_backward(const Tensor5<Scalar>& y,
                                    Tensor5<Scalar> dy) {
  const Scalar slope = static_cast<Scalar>(kLeakySlope);
  dy.data() = (y.data().array() > Scalar(0))
                  .select(dy.data().array(), slope * dy.data().array());
  return dy;
}

template <typename Scalar>
Tensor5<Scalar> upsample_nearest(const Tensor5<Scalar>& x, Index factor) {
  if (factor == 1) return x;
  const Shape5 s = x.shape();
  Tensor5<Scalar> y({s.batch, s.channels, s.depth * factor, s.height * factor,
                     s.width * factor});
  for (Index n = 0; n < s.batch; ++n)
    for (Index c = 0; c < s.channels; ++c)
      for (Index d = 0; d < s.depth * factor; ++d)
        for (Index h = 0; h < s.height * factor; ++h)
          for (Index w = 0; w < s.width * factor; ++w)
            y(n, c, d, h, w) = x(n, c, d / factor, h / factor, w / factor);
  return y;
}

template <typename Scalar>
Tensor5<Scalar> upsample_nearest_backward(const Tensor5<Scalar>& dy,
                                          Index factor) {
  if (factor == 1) return dy;
  const Shape5 s = dy.shape();
  Tensor5<Scalar> dx({s.batch, s.channels, s.depth / factor,
                      s.height / factor, s.width / factor});
  for (Index n = 0; n < s.batch; ++n)
    for (Index c = 0; c < s.channels; ++c)
      for (Index d = 0; d < s.depth; ++d)
        for (Index h = 0; h < s.height; ++h)
          for (Index w = 0; w < s.width; ++w)
            dx(n, c, d / factor, h / factor, w / factor) += dy(n, c, d, h, w);
  return dx;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// conv 3x3x3 -> instance norm -> LeakyReLU. A stride of 2 turns it into the
/// encoder's downsampling step.
template <typename Scalar>
struct ConvBlock {
  Conv3d<Scalar> conv;
  InstanceNorm<Scalar> norm;

  ConvBlock() = default;
  ConvBlock(Index in, Index out, Index stride = 1)
      : conv(in, out, 3, stride, 1), norm(out) {}

  template <class Rng>
  void init(Rng& rng) { conv.init_he_uniform(rng); }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    conv.for_each_param(prefix + ".conv", f);
    norm.for_each_param(prefix + ".norm", f);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    conv.for_each_param(prefix + ".conv", f);
    norm.for_each_param(prefix + ".norm", f);
  }
};

template <typename Scalar>
struct ConvBlockCache {
  Tensor5<Scalar> input;
  NormCache<Scalar> norm;
  Tensor5<Scalar> output;
};

template <typename Scalar>
Tensor5<Scalar> conv_block_forward(const ConvBlock<Scalar>& block,
                                   const Tensor5<Scalar>& x,
                                   ConvBlockCache<Scalar>* cache = nullptr) {
  auto y = leaky_relu(instance_norm_forward(
      block.norm, conv3d_forward(block.conv, x), cache ? &cache->norm : nullptr));
  if (cache) {
    cache->input = x;
    cache->output = y;
  }
  return y;
}

template <typename Scalar>
Tensor5<Scalar> conv_block_backward(ConvBlock<Scalar>& block,
                                    const ConvBlockCache<Scalar>& cache,
                                    const Tensor5<Scalar>& dy) {
  auto d = leaky_relu_backward(cache.output, dy);
  d = instance_norm_backward(block.norm, cache.norm, d);
  return conv3d_backward(block.conv, cache.input, d);
}

/// Residual block whose branch stacks a dilation-2 and a dilation-4 3x3x3
/// convolution (13-voxel support per axis). The shortcut is the identity when
/// channel counts agree, otherwise a 1x1x1 projection.
template <typename Scalar>
struct ResDilBlock {
  Conv3d<Scalar> conv_a;
  InstanceNorm<Scalar> norm_a;
  Conv3d<Scalar> conv_b;
  InstanceNorm<Scalar> norm_b;
  std::optional<Conv3d<Scalar>> projection;

  ResDilBlock() = default;
  ResDilBlock(Index in, Index out, Index dilation_a = 2, Index dilation_b = 4)
      : conv_a(in, out, 3, 1, dilation_a), norm_a(out),
        conv_b(out, out, 3, 1, dilation_b), norm_b(out) {
    if (in != out) projection.emplace(in, out, 1);
  }

  template <class Rng>
  void init(Rng& rng) {
    conv_a.init_he_uniform(rng);
    conv_b.init_he_uniform(rng);
    if (projection) projection->init_he_uniform(rng);
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    conv_a.for_each_param(prefix + ".conv_a", f);
    norm_a.for_each_param(prefix + ".norm_a", f);
    conv_b.for_each_param(prefix + ".conv_b", f);
    norm_b.for_each_param(prefix + ".norm_b", f);
    if (projection) projection->for_each_param(prefix + ".projection", f);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    conv_a.for_each_param(prefix + ".conv_a", f);
    norm_a.for_each_param(prefix + ".norm_a", f);
    conv_b.for_each_param(prefix + ".conv_b", f);
    norm_b.for_each_param(prefix + ".norm_b", f);
    if (projection) projection->for_each_param(prefix + ".projection", f);
  }
};

template <typename Scalar>
struct ResDilCache {
  Tensor5<Scalar> input;
  NormCache<Scalar> norm_a;
  Tensor5<Scalar> hidden; // LeakyReLU(norm_a(conv_a(x)))
  NormCache<Scalar> norm_b;
  Tensor5<Scalar> output;
};

template <typename Scalar>
Tensor5<Scalar> res_dil_forward(const ResDilBlock<Scalar>& block,
                                const Tensor5<Scalar>& x,
                                ResDilCache<Scalar>* cache = nullptr) {
  if (x.channels() != block.conv_a.in_channels)
    throw Error(ErrorCode::ShapeMismatch, "res_dil input channel mismatch");
  auto hidden = leaky_relu(instance_norm_forward(
      block.norm_a, conv3d_forward(block.conv_a, x),
      cache ? &cache->norm_a : nullptr));
  auto branch = instance_norm_forward(block.norm_b,
                                      conv3d_forward(block.conv_b, hidden),
                                      cache ? &cache->norm_b : nullptr);
  if (block.projection)
    branch += conv3d_forward(*block.projection, x);
  else
    branch += x;
  auto y = leaky_relu(std::move(branch));
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(hidden);
    cache->output = y;
  }
  return y;
}

template <typename Scalar>
Tensor5<Scalar> res_dil_backward(ResDilBlock<Scalar>& block,
                                 const ResDilCache<Scalar>& cache,
                                 const Tensor5<Scalar>& dy) {
  const auto dsum = leaky_relu_backward(cache.output, dy);
  auto d = instance_norm_backward(block.norm_b, cache.norm_b, dsum);
  d = conv3d_backward(block.conv_b, cache.hidden, d);
  d = leaky_relu_backward(cache.hidden, std::move(d));
  d = instance_norm_backward(block.norm_a, cache.norm_a, d);
  auto dx = conv3d_backward(block.conv_a, cache.input, d);
  if (block.projection)
    dx += conv3d_backward(*block.projection, cache.input, dsum);
  else
    dx += dsum;
  return dx;
}

} // namespace mmseg

#endif
