// SPDX-License-Identifier: Apache-2.0
/**
 * @file   int8_graph.hpp
 * @brief  Integer-only inference: UINT8 activations, per-channel INT8
 *         weights, INT32 biases and fixed-point requantization.
 *
 * Instance-norm + LeakyReLU pairs run as float islands (dequantize, compute,
 * quantize with the consumer's parameters) using the same kernels as the
 * fake-quant simulation.
 *
 * Accumulator bound: |acc| <= taps·255·127 + |bias| with taps = IC·KH·KW.
 * The widest layer here (2·4c input channels, 3×3, c <= 64) gives
 * 4608·255·127 ≈ 1.5e8, well inside int32; products with m0 < 2^31 stay
 * inside int64.
 */
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "qatie/model.hpp"
#include "qatie/qat.hpp"
#include "qatie/quant.hpp"

QATIE_BEGIN_NAMESPACE

// Integer kernels.

/// acc = Σ (q_in - z_in)·q_w + q_bias; q_out = clamp(z_out + rq[oc](acc)).
U8Tensor int8_conv2d(const U8Tensor &input, const I8Tensor &weight,
                     const I32Tensor &bias,
                     std::span<const RequantMultiplier> rq,
                     const QuantParams &out_qp, int stride, int padding);

U8Tensor int8_hadamard(const U8Tensor &a, const U8Tensor &b,
                       const RequantMultiplier &rq, const QuantParams &out_qp);

/// Both operands are rescaled by s_x/s_out, summed exactly in 128-bit fixed
/// point and rounded once.
U8Tensor int8_add(const U8Tensor &a, const U8Tensor &b,
                  const RequantMultiplier &rq_a, const RequantMultiplier &rq_b,
                  const QuantParams &out_qp);

/// Maps values to out_qp with multiplier s_in/s_out.
U8Tensor int8_requantize(const U8Tensor &x, const RequantMultiplier &rq,
                         const QuantParams &out_qp);

/// Entry i = quantize(tanh(dequantize(i))).
std::array<std::uint8_t, 256> build_tanh_lut(const QuantParams &in_qp,
                                             const QuantParams &out_qp);
U8Tensor tanh_lut(const U8Tensor &x, const std::array<std::uint8_t, 256> &lut,
                  const QuantParams &out_qp);

U8Tensor int8_upsample2x(const U8Tensor &x);

// Graph.

enum class Int8OpKind : std::uint8_t {
  Quantize, ///< float input -> UINT8
  Conv,
  TanhLut,
  Hadamard,
  Add,
  Concat, ///< each part requantized to the output parameters
  Upsample,
  NormAct, ///< float island: instance norm + LeakyReLU
};

const char *int8_op_name(Int8OpKind kind);
Int8OpKind int8_op_from_name(const std::string &name);

struct Int8Op {
  Int8OpKind kind = Int8OpKind::Quantize;
  std::string name;
  std::vector<int> inputs; ///< slot ids; Quantize reads the float input
  int output = -1;
  QuantParams out_qp;

  // Conv
  int stride = 1;
  int padding = 0;
  I8Tensor weight;
  I32Tensor bias;
  /// Conv: one per output channel. Hadamard: one. Add/Concat: one per input.
  std::vector<RequantMultiplier> multipliers;

  // NormAct
  Tensor gamma;
  Tensor beta;
  Real slope = Real(0.2);

  // TanhLut
  std::array<std::uint8_t, 256> lut{};
};

class Int8Graph {
public:
  ModelConfig config;
  std::vector<Int8Op> ops;
  int slot_count = 0;
  int output_slot = -1;

  /// Runs the integer program; returns the dequantized output.
  Tensor run(const Tensor &x) const;
  U8Tensor run_quantized(const Tensor &x) const;

  std::size_t weight_bytes() const;
};

/**
 * Emits the integer program for an instrumented network whose observers are
 * all initialized. Throws naming the first layer without calibration data.
 */
Int8Graph convert_int8(const QatNetwork &qnet);

QATIE_END_NAMESPACE
