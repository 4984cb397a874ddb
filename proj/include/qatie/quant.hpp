// SPDX-License-Identifier: Apache-2.0
/**
 * @file   quant.hpp
 * @brief  Quantization parameters, observers, fake quantization with a
 *         straight-through estimator, and fixed-point requantization.
 *
 * Rounding is half-away-from-zero everywhere: in quantize(), in the
 * fake-quant forward pass and in fixedpoint_mul().
 */
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qatie/tape.hpp"
#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

/**
 * Affine map q = clamp(round(x / scale) + zero_point, qmin, qmax).
 * Per-tensor parameters hold one scale; per-channel parameters hold one scale
 * and zero point per index of `axis` (0 = N for OC×IC×KH×KW weights, 1 = C).
 */
struct QuantParams {
  std::vector<Real> scale{Real(1)};
  std::vector<std::int32_t> zero_point{0};
  std::int64_t qmin = 0;
  std::int64_t qmax = 255;
  bool is_signed = false;
  bool symmetric = false;
  std::optional<int> axis;

  bool per_channel() const { return axis.has_value(); }
  std::size_t channels() const { return scale.size(); }
  Real scale_at(std::size_t ch) const { return scale[per_channel() ? ch : 0]; }
  std::int32_t zero_point_at(std::size_t ch) const {
    return zero_point[per_channel() ? ch : 0];
  }
  /// Throws if scales are non-positive or zero points leave [qmin, qmax].
  void validate() const;
  bool operator==(const QuantParams &) const = default;
};

/// Signed symmetric [-127, 127] or unsigned affine [0, 255] parameters.
QuantParams qparams_from_minmax(double min, double max, bool is_signed,
                                bool symmetric);

/// Per-output-channel symmetric signed parameters from a weight's values.
QuantParams weight_qparams(const Tensor &weight);

/// Signed 32-bit parameters for a bias at scale s_in·s_w[oc], zero point 0.
QuantParams bias_qparams(const QuantParams &input, const QuantParams &weight);

/// Fixed unsigned parameters covering [lo, hi] (tanh outputs, final image).
QuantParams fixed_qparams(double lo, double hi);

/// Half-away-from-zero rounding of x/scale + zp, before clamping.
std::int64_t quantize_unclamped(Real x, Real scale, std::int32_t zero_point);
std::int64_t quantize_value(Real x, Real scale, std::int32_t zero_point,
                            std::int64_t qmin, std::int64_t qmax);
inline Real dequantize_value(std::int64_t q, Real scale,
                             std::int32_t zero_point) {
  return static_cast<Real>(q - zero_point) * scale;
}

/// Integer tensor with its quantization parameters.
template <class T> struct QuantTensor {
  Shape shape;
  std::vector<T> data;
  QuantParams qp;

  std::size_t numel() const { return data.size(); }
};

using U8Tensor = QuantTensor<std::uint8_t>;
using I8Tensor = QuantTensor<std::int8_t>;
using I32Tensor = QuantTensor<std::int32_t>;

/// Index of the quantization channel of flat element i.
std::size_t quant_channel(const Shape &shape, const QuantParams &qp,
                          std::size_t i);

U8Tensor quantize_u8(const Tensor &x, const QuantParams &qp);
I8Tensor quantize_i8(const Tensor &x, const QuantParams &qp);
I32Tensor quantize_i32(const Tensor &x, const QuantParams &qp);

template <class T> Tensor dequantize(const QuantTensor<T> &q) {
  Tensor out(q.shape);
  auto y = out.data();
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    const std::size_t ch = quant_channel(q.shape, q.qp, i);
    y[i] = dequantize_value(q.data[i], q.qp.scale_at(ch),
                            q.qp.zero_point_at(ch));
  }
  return out;
}

/// dequantize(quantize(x)) without materializing integers.
Tensor fake_quant_values(const Tensor &x, const QuantParams &qp);

/**
 * Tape-aware fake quantization. Forward projects onto the lattice; backward
 * passes the upstream gradient where the unclamped integer lies in
 * [qmin, qmax] and zeroes it elsewhere.
 */
Var fake_quant(Var x, const QuantParams &qp);

/**
 * Exponential moving-average min/max tracker. The first update copies the
 * batch range; later ones blend with `momentum` weight on history.
 */
struct Observer {
  double running_min = 0;
  double running_max = 0;
  double momentum = 0.99;
  bool initialized = false;

  void update(const Tensor &x);
  void update(double batch_min, double batch_max);
  QuantParams qparams(bool is_signed = false, bool symmetric = false) const;
};

/// Real multiplier M represented as m0 · 2^(-31-shift), m0 ∈ [2^30, 2^31).
struct RequantMultiplier {
  std::int32_t m0 = 0;
  std::int32_t shift = 0;

  static RequantMultiplier from_real(double m);
  double value() const;
  bool operator==(const RequantMultiplier &) const = default;
};

/// round(acc · m0 · 2^(-31-shift)) with 64-bit intermediates.
std::int64_t fixedpoint_mul(std::int64_t acc, const RequantMultiplier &rq);

QATIE_END_NAMESPACE
