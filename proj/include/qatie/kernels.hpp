// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.hpp
 * @brief  Tape-free forward and adjoint kernels for the network primitives.
 *
 * The tape ops in tape.hpp and the float islands of the integer engine both
 * call into these, so QAT simulation and INT8 inference share bit-identical
 * float arithmetic.
 */
#pragma once

#include <span>
#include <vector>

#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

namespace kernels {

/// Output spatial extent of a convolution along one axis.
inline int conv_out_dim(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

/// Checks conv operand shapes; returns the output shape.
Shape conv2d_shape(const Shape &input, const Shape &weight, const Shape &bias,
                   int stride, int padding);

/**
 * Cross-correlation with zero padding. weight is OC×IC×KH×KW, bias is
 * 1×OC×1×1.
 */
Tensor conv2d(const Tensor &input, const Tensor &weight, const Tensor &bias,
              int stride, int padding);

/// Accumulates conv adjoints into whichever of the outputs are non-null.
void conv2d_backward(const Tensor &input, const Tensor &weight,
                     std::span<const Real> grad_out, const Shape &out_shape,
                     int stride, int padding, std::span<Real> grad_input,
                     std::span<Real> grad_weight, std::span<Real> grad_bias);

struct NormStats {
  std::vector<Real> normalized; // x̂, same layout as the input
  std::vector<Real> inv_std;    // one per (n, c) plane
};

/// Per-(sample, channel) normalization with affine gamma/beta (1×C×1×1).
Tensor instance_norm(const Tensor &input, const Tensor &gamma,
                     const Tensor &beta, Real eps, NormStats *stats = nullptr);

void instance_norm_backward(const Shape &shape, const NormStats &stats,
                            const Tensor &gamma, std::span<const Real> grad_out,
                            std::span<Real> grad_input,
                            std::span<Real> grad_gamma,
                            std::span<Real> grad_beta);

Tensor leaky_relu(const Tensor &input, Real slope);

Tensor upsample_nearest2x(const Tensor &input);

Tensor concat_channels(std::span<const Tensor *const> parts);

} // namespace kernels

QATIE_END_NAMESPACE
