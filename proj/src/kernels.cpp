// SPDX-License-Identifier: Apache-2.0
#include "qatie/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <type_traits>
#include <vector>

QATIE_BEGIN_NAMESPACE

namespace kernels {

namespace {

// Unfolds one sample into a (IC·KH·KW) × (OH·OW) matrix; taps that fall in
// the zero padding are 0. Every entry of `col` is written.
void im2col(const Real *src, const Shape &is, const Shape &ws, int stride,
            int padding, int oh, int ow, Real *col) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ic = 0; ic < is.c; ++ic) {
    const Real *plane = src + static_cast<std::size_t>(ic) * is.plane();
    for (int kh = 0; kh < ws.h; ++kh) {
      for (int kw = 0; kw < ws.w; ++kw) {
        Real *row = col + ((static_cast<std::size_t>(ic) * ws.h + kh) * ws.w + kw) * p;
        // Output columns whose tap lands inside the input row: [x0, x1).
        const int off = kw - padding;
        const int x0 = std::clamp((-off + stride - 1) / stride, 0, ow);
        const int x1 = std::clamp((is.w - off + stride - 1) / stride, x0, ow);
        for (int y = 0; y < oh; ++y) {
          const int ih = y * stride + kh - padding;
          Real *dst = row + static_cast<std::size_t>(y) * ow;
          if (ih < 0 || ih >= is.h) {
            std::fill(dst, dst + ow, Real(0));
            continue;
          }
          const Real *line = plane + static_cast<std::size_t>(ih) * is.w + off;
          std::fill(dst, dst + x0, Real(0));
          if (stride == 1)
            std::copy(line + x0, line + x1, dst + x0);
          else
            for (int x = x0; x < x1; ++x)
              dst[x] = line[x * stride];
          std::fill(dst + x1, dst + ow, Real(0));
        }
      }
    }
  }
}

bool is_pointwise(const Shape &ws, int stride, int padding) {
  return ws.h == 1 && ws.w == 1 && stride == 1 && padding == 0;
}

// Output plane storage when Acc is Real, a scratch row otherwise.
template <class Acc>
Acc *accumulator(Real *dst, std::vector<Acc> &scratch, std::size_t offset) {
  if constexpr (std::is_same_v<Acc, Real>)
    return dst;
  else
    return scratch.data() + offset;
}

// Adjoint of im2col: scatter-adds columns back onto the input sample.
void col2im(const Real *col, const Shape &is, const Shape &ws, int stride,
            int padding, int oh, int ow, Real *dst) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ic = 0; ic < is.c; ++ic) {
    Real *plane = dst + static_cast<std::size_t>(ic) * is.plane();
    for (int kh = 0; kh < ws.h; ++kh) {
      for (int kw = 0; kw < ws.w; ++kw) {
        const Real *row =
            col + ((static_cast<std::size_t>(ic) * ws.h + kh) * ws.w + kw) * p;
        for (int y = 0; y < oh; ++y) {
          const int ih = y * stride + kh - padding;
          if (ih < 0 || ih >= is.h)
            continue;
          Real *line = plane + static_cast<std::size_t>(ih) * is.w;
          const Real *src = row + static_cast<std::size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) {
            const int iw = x * stride + kw - padding;
            if (iw >= 0 && iw < is.w)
              line[iw] += src[x];
          }
        }
      }
    }
  }
}

} // namespace

Shape conv2d_shape(const Shape &input, const Shape &weight, const Shape &bias,
                   int stride, int padding) {
  if (stride < 1)
    throw ShapeError("conv2d: stride must be positive");
  if (padding < 0)
    throw ShapeError("conv2d: padding must be non-negative");
  if (weight.c != input.c)
    throw ShapeError("conv2d: weight in-channels " + std::to_string(weight.c) +
                     " != input channels " + std::to_string(input.c));
  if (weight.h % 2 == 0 || weight.w % 2 == 0)
    throw ShapeError("conv2d: kernel height/width must be odd, got " +
                     weight.str());
  if (bias.numel() != static_cast<std::size_t>(weight.n) || bias.c != weight.n)
    throw ShapeError("conv2d: bias channels " + std::to_string(bias.c) +
                     " != out-channels " + std::to_string(weight.n));
  const int oh = conv_out_dim(input.h, weight.h, stride, padding);
  const int ow = conv_out_dim(input.w, weight.w, stride, padding);
  if (oh < 1)
    throw ShapeError("conv2d: input height " + std::to_string(input.h) +
                     " too small for kernel height " + std::to_string(weight.h));
  if (ow < 1)
    throw ShapeError("conv2d: input width " + std::to_string(input.w) +
                     " too small for kernel width " + std::to_string(weight.w));
  return {input.n, weight.n, oh, ow};
}

Tensor conv2d(const Tensor &input, const Tensor &weight, const Tensor &bias,
              int stride, int padding) {
  const Shape out_shape =
      conv2d_shape(input.shape(), weight.shape(), bias.shape(), stride, padding);
  const Shape &is = input.shape();
  const Shape &ws = weight.shape();
  const std::size_t p = out_shape.plane();
  const std::size_t k = static_cast<std::size_t>(ws.c) * ws.h * ws.w;
  // A 1×1, stride-1, unpadded conv reads the input planes directly.
  const bool direct = is_pointwise(ws, stride, padding);
  std::unique_ptr<Real[]> col(direct ? nullptr : new Real[k * p]);
  // Double accumulation keeps the f32 fake-quant simulation close to the exact
  // int32 sums of the integer engine.
  using Acc = double;
  constexpr int kBlock = 4; // output channels sharing one pass over col
  std::vector<Acc> scratch(std::is_same_v<Acc, Real> ? 0 : kBlock * p);
  Tensor out(out_shape);
  for (int n = 0; n < out_shape.n; ++n) {
    const Real *cols = input.plane(n, 0);
    if (!direct) {
      im2col(cols, is, ws, stride, padding, out_shape.h, out_shape.w, col.get());
      cols = col.get();
    }
    for (int oc0 = 0; oc0 < out_shape.c; oc0 += kBlock) {
      const int nb = std::min(kBlock, out_shape.c - oc0);
      std::array<Acc *, kBlock> acc{};
      std::array<const Real *, kBlock> wk{};
      for (int b = 0; b < nb; ++b) {
        acc[b] = accumulator(out.plane(n, oc0 + b), scratch, b * p);
        std::fill(acc[b], acc[b] + p, static_cast<Acc>(bias[oc0 + b]));
        wk[b] = weight.plane(oc0 + b, 0);
      }
      for (std::size_t t = 0; t < k; ++t) {
        const Real *row = cols + t * p;
        if (nb == kBlock) {
          const Acc w0 = wk[0][t], w1 = wk[1][t], w2 = wk[2][t], w3 = wk[3][t];
          Acc *a0 = acc[0], *a1 = acc[1], *a2 = acc[2], *a3 = acc[3];
          for (std::size_t i = 0; i < p; ++i) {
            const Acc r = row[i];
            a0[i] += w0 * r;
            a1[i] += w1 * r;
            a2[i] += w2 * r;
            a3[i] += w3 * r;
          }
        } else {
          for (int b = 0; b < nb; ++b) {
            const Acc wv = wk[b][t];
            Acc *a = acc[b];
            for (std::size_t i = 0; i < p; ++i)
              a[i] += wv * row[i];
          }
        }
      }
      if constexpr (!std::is_same_v<Acc, Real>)
        for (int b = 0; b < nb; ++b)
          std::transform(acc[b], acc[b] + p, out.plane(n, oc0 + b),
                         [](Acc v) { return static_cast<Real>(v); });
    }
  }
  return out;
}

void conv2d_backward(const Tensor &input, const Tensor &weight,
                     std::span<const Real> grad_out, const Shape &out_shape,
                     int stride, int padding, std::span<Real> grad_input,
                     std::span<Real> grad_weight, std::span<Real> grad_bias) {
  const Shape &is = input.shape();
  const Shape &ws = weight.shape();
  const std::size_t p = out_shape.plane();
  const std::size_t k = static_cast<std::size_t>(ws.c) * ws.h * ws.w;
  std::vector<Real> col(grad_weight.empty() ? 0 : k * p);
  std::vector<Real> gcol(grad_input.empty() ? 0 : k * p);
  for (int n = 0; n < out_shape.n; ++n) {
    const Real *gy_n =
        grad_out.data() + static_cast<std::size_t>(n) * out_shape.c * p;
    if (!grad_weight.empty())
      im2col(input.plane(n, 0), is, ws, stride, padding, out_shape.h,
             out_shape.w, col.data());
    if (!grad_input.empty())
      std::fill(gcol.begin(), gcol.end(), Real(0));
    for (int oc = 0; oc < out_shape.c; ++oc) {
      const Real *gy = gy_n + static_cast<std::size_t>(oc) * p;
      if (!grad_bias.empty()) {
        Real s = 0;
        for (std::size_t i = 0; i < p; ++i)
          s += gy[i];
        grad_bias[oc] += s;
      }
      const Real *wk = weight.plane(oc, 0);
      for (std::size_t t = 0; t < k; ++t) {
        if (!grad_weight.empty()) {
          const Real *row = col.data() + t * p;
          Real gw = 0;
          for (std::size_t i = 0; i < p; ++i)
            gw += gy[i] * row[i];
          grad_weight[static_cast<std::size_t>(oc) * k + t] += gw;
        }
        if (!grad_input.empty()) {
          const Real wv = wk[t];
          Real *grow = gcol.data() + t * p;
          for (std::size_t i = 0; i < p; ++i)
            grow[i] += wv * gy[i];
        }
      }
    }
    if (!grad_input.empty())
      col2im(gcol.data(), is, ws, stride, padding, out_shape.h, out_shape.w,
             grad_input.data() + static_cast<std::size_t>(n) * is.c * is.plane());
  }
}

Tensor instance_norm(const Tensor &input, const Tensor &gamma,
                     const Tensor &beta, Real eps, NormStats *stats) {
  const Shape &s = input.shape();
  if (gamma.numel() != static_cast<std::size_t>(s.c) ||
      beta.numel() != static_cast<std::size_t>(s.c))
    throw ShapeError("instance_norm: affine parameters need " +
                     std::to_string(s.c) + " channels");
  if (!(eps > 0))
    throw ShapeError("instance_norm: eps must be positive");
  Tensor out(s);
  const std::size_t plane = s.plane();
  if (stats) {
    stats->normalized.assign(s.numel(), Real(0));
    stats->inv_std.assign(static_cast<std::size_t>(s.n) * s.c, Real(0));
  }
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Real *x = input.plane(n, c);
      double mean = 0;
      for (std::size_t i = 0; i < plane; ++i)
        mean += x[i];
      mean /= static_cast<double>(plane);
      double var = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = x[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(plane);
      const Real inv = static_cast<Real>(1.0 / std::sqrt(var + eps));
      const Real m = static_cast<Real>(mean);
      Real *y = out.plane(n, c);
      const std::size_t off = input.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        const Real xhat = (x[i] - m) * inv;
        y[i] = xhat * gamma[c] + beta[c];
        if (stats)
          stats->normalized[off + i] = xhat;
      }
      if (stats)
        stats->inv_std[static_cast<std::size_t>(n) * s.c + c] = inv;
    }
  }
  return out;
}

void instance_norm_backward(const Shape &s, const NormStats &stats,
                            const Tensor &gamma, std::span<const Real> grad_out,
                            std::span<Real> grad_input,
                            std::span<Real> grad_gamma,
                            std::span<Real> grad_beta) {
  const std::size_t plane = s.plane();
  const Real count = static_cast<Real>(plane);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
      const Real *gy = grad_out.data() + off;
      const Real *xhat = stats.normalized.data() + off;
      double sum_g = 0;
      double sum_gx = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gy[i];
        sum_gx += gy[i] * xhat[i];
      }
      if (!grad_gamma.empty())
        grad_gamma[c] += static_cast<Real>(sum_gx);
      if (!grad_beta.empty())
        grad_beta[c] += static_cast<Real>(sum_g);
      if (grad_input.empty())
        continue;
      // d x = inv/N * gamma * (N*gy - sum(gy) - x̂ * sum(gy*x̂))
      const Real inv = stats.inv_std[static_cast<std::size_t>(n) * s.c + c];
      const Real k = gamma[c] * inv / count;
      const Real sg = static_cast<Real>(sum_g);
      const Real sgx = static_cast<Real>(sum_gx);
      Real *gx = grad_input.data() + off;
      for (std::size_t i = 0; i < plane; ++i)
        gx[i] += k * (count * gy[i] - sg - xhat[i] * sgx);
    }
  }
}

Tensor leaky_relu(const Tensor &input, Real slope) {
  Tensor out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] >= 0 ? x[i] : slope * x[i];
  return out;
}

Tensor upsample_nearest2x(const Tensor &input) {
  const Shape &s = input.shape();
  Tensor out({s.n, s.c, 2 * s.h, 2 * s.w});
  const int ow = 2 * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Real *src = input.plane(n, c);
      Real *dst = out.plane(n, c);
      for (int h = 0; h < s.h; ++h) {
        Real *r0 = dst + (2 * h) * ow;
        Real *r1 = r0 + ow;
        for (int w = 0; w < s.w; ++w) {
          const Real v = src[h * s.w + w];
          r0[2 * w] = r0[2 * w + 1] = v;
          r1[2 * w] = r1[2 * w + 1] = v;
        }
      }
    }
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor *const> parts) {
  if (parts.empty())
    throw ShapeError("concat_channels: no parts");
  Shape s = parts.front()->shape();
  int channels = 0;
  for (const Tensor *p : parts) {
    const Shape &ps = p->shape();
    if (ps.n != s.n)
      throw ShapeError("concat_channels: batch mismatch (" + ps.str() +
                       " vs " + s.str() + ")");
    if (ps.h != s.h || ps.w != s.w)
      throw ShapeError("concat_channels: spatial mismatch (" + ps.str() +
                       " vs " + s.str() + ")");
    channels += ps.c;
  }
  s.c = channels;
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const Tensor *p : parts) {
      const int pc = p->shape().c;
      std::copy_n(p->plane(n, 0), static_cast<std::size_t>(pc) * s.plane(),
                  out.plane(n, c0));
      c0 += pc;
    }
  }
  return out;
}

} // namespace kernels

QATIE_END_NAMESPACE
