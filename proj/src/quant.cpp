// SPDX-License-Identifier: Apache-2.0
#include "qatie/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

QATIE_BEGIN_NAMESPACE

namespace {

constexpr double kScaleFloor = 1e-8;

template <class T>
QuantTensor<T> quantize_as(const Tensor &x, const QuantParams &qp) {
  qp.validate();
  QuantTensor<T> q{x.shape(), std::vector<T>(x.numel()), qp};
  auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t ch = quant_channel(x.shape(), qp, i);
    q.data[i] = static_cast<T>(quantize_value(v[i], qp.scale_at(ch),
                                              qp.zero_point_at(ch), qp.qmin,
                                              qp.qmax));
  }
  return q;
}

} // namespace

void QuantParams::validate() const {
  if (scale.empty() || scale.size() != zero_point.size())
    throw Error("quant params: scale/zero-point count mismatch");
  if (qmin >= qmax)
    throw Error("quant params: empty integer range");
  for (std::size_t i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0) || !std::isfinite(scale[i]))
      throw Error("quant params: scale must be positive and finite");
    if (zero_point[i] < qmin || zero_point[i] > qmax)
      throw Error("quant params: zero point outside [qmin, qmax]");
    if (symmetric && zero_point[i] != 0)
      throw Error("quant params: symmetric parameters need zero point 0");
  }
}

QuantParams qparams_from_minmax(double min, double max, bool is_signed,
                                bool symmetric) {
  if (max < min)
    throw Error("qparams_from_minmax: max < min");
  min = std::min(min, 0.0);
  max = std::max(max, 0.0);
  QuantParams qp;
  qp.is_signed = is_signed;
  qp.symmetric = symmetric;
  if (symmetric) {
    if (!is_signed)
      throw Error("qparams_from_minmax: symmetric quantization must be signed");
    qp.qmin = -127;
    qp.qmax = 127;
    const double bound = std::max(std::abs(min), std::abs(max));
    qp.scale = {static_cast<Real>(std::max(bound / 127.0, kScaleFloor))};
    qp.zero_point = {0};
    return qp;
  }
  qp.qmin = is_signed ? -128 : 0;
  qp.qmax = is_signed ? 127 : 255;
  const double levels = static_cast<double>(qp.qmax - qp.qmin);
  const double range = max - min;
  qp.scale = {static_cast<Real>(std::max(range / levels, kScaleFloor))};
  // qmin - min·levels/range keeps exact halves exact, e.g. (-1, 1) -> 127.5.
  const double zp = range > 0 ? qp.qmin - min * levels / range
                              : static_cast<double>(qp.qmin);
  qp.zero_point = {static_cast<std::int32_t>(
      std::clamp(std::round(zp), static_cast<double>(qp.qmin),
                 static_cast<double>(qp.qmax)))};
  return qp;
}

QuantParams weight_qparams(const Tensor &weight) {
  const Shape &s = weight.shape();
  const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
  QuantParams qp;
  qp.is_signed = true;
  qp.symmetric = true;
  qp.qmin = -127;
  qp.qmax = 127;
  qp.axis = 0;
  qp.scale.assign(static_cast<std::size_t>(s.n), Real(1));
  qp.zero_point.assign(static_cast<std::size_t>(s.n), 0);
  auto v = weight.data();
  for (int oc = 0; oc < s.n; ++oc) {
    double bound = 0;
    for (std::size_t i = 0; i < per; ++i)
      bound = std::max(bound, static_cast<double>(std::abs(v[oc * per + i])));
    qp.scale[oc] = static_cast<Real>(std::max(bound / 127.0, kScaleFloor));
  }
  return qp;
}

QuantParams bias_qparams(const QuantParams &input, const QuantParams &weight) {
  QuantParams qp;
  qp.is_signed = true;
  qp.symmetric = true;
  qp.qmin = std::numeric_limits<std::int32_t>::min() + 1;
  qp.qmax = std::numeric_limits<std::int32_t>::max();
  qp.axis = 1;
  qp.scale.resize(weight.channels());
  qp.zero_point.assign(weight.channels(), 0);
  for (std::size_t oc = 0; oc < weight.channels(); ++oc)
    qp.scale[oc] = input.scale_at(0) * weight.scale_at(oc);
  return qp;
}

QuantParams fixed_qparams(double lo, double hi) {
  return qparams_from_minmax(lo, hi, false, false);
}

std::int64_t quantize_unclamped(Real x, Real scale, std::int32_t zero_point) {
  const double r = std::round(static_cast<double>(x) / static_cast<double>(scale));
  constexpr double lim = 4e18;
  return static_cast<std::int64_t>(std::clamp(r, -lim, lim)) + zero_point;
}

std::int64_t quantize_value(Real x, Real scale, std::int32_t zero_point,
                            std::int64_t qmin, std::int64_t qmax) {
  return std::clamp(quantize_unclamped(x, scale, zero_point), qmin, qmax);
}

std::size_t quant_channel(const Shape &shape, const QuantParams &qp,
                          std::size_t i) {
  if (!qp.axis)
    return 0;
  switch (*qp.axis) {
  case 0:
    return i / (static_cast<std::size_t>(shape.c) * shape.h * shape.w);
  case 1:
    return (i / shape.plane()) % static_cast<std::size_t>(shape.c);
  default:
    throw Error("quant params: unsupported channel axis");
  }
}

U8Tensor quantize_u8(const Tensor &x, const QuantParams &qp) {
  if (qp.qmin < 0 || qp.qmax > 255)
    throw Error("quantize_u8: parameters exceed the unsigned 8-bit range");
  return quantize_as<std::uint8_t>(x, qp);
}

I8Tensor quantize_i8(const Tensor &x, const QuantParams &qp) {
  if (qp.qmin < -128 || qp.qmax > 127)
    throw Error("quantize_i8: parameters exceed the signed 8-bit range");
  return quantize_as<std::int8_t>(x, qp);
}

I32Tensor quantize_i32(const Tensor &x, const QuantParams &qp) {
  return quantize_as<std::int32_t>(x, qp);
}

Tensor fake_quant_values(const Tensor &x, const QuantParams &qp) {
  Tensor out(x.shape());
  auto v = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t ch = quant_channel(x.shape(), qp, i);
    const Real s = qp.scale_at(ch);
    const std::int32_t zp = qp.zero_point_at(ch);
    y[i] = dequantize_value(quantize_value(v[i], s, zp, qp.qmin, qp.qmax), s, zp);
  }
  return out;
}

Var fake_quant(Var x, const QuantParams &qp) {
  qp.validate();
  const Tensor &xv = x.value();
  Tensor out(xv.shape());
  auto v = xv.data();
  auto y = out.data();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t ch = quant_channel(xv.shape(), qp, i);
    const Real s = qp.scale_at(ch);
    const std::int32_t zp = qp.zero_point_at(ch);
    const std::int64_t raw = quantize_unclamped(v[i], s, zp);
    (*mask)[i] = raw >= qp.qmin && raw <= qp.qmax;
    y[i] = dequantize_value(std::clamp(raw, qp.qmin, qp.qmax), s, zp);
  }
  return x.tape->push(Primitive::FakeQuant, std::move(out), {x},
                      [mask](Tape &t, int self) {
                        auto gy = t.grad(self);
                        auto gx = t.input_grad(self, 0);
                        for (std::size_t i = 0; i < gx.size(); ++i)
                          if ((*mask)[i])
                            gx[i] += gy[i];
                      });
}

void Observer::update(const Tensor &x) {
  if (x.empty())
    return;
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  update(static_cast<double>(*lo), static_cast<double>(*hi));
}

void Observer::update(double batch_min, double batch_max) {
  if (!initialized) {
    running_min = batch_min;
    running_max = batch_max;
    initialized = true;
    return;
  }
  running_min = momentum * running_min + (1 - momentum) * batch_min;
  running_max = momentum * running_max + (1 - momentum) * batch_max;
}

QuantParams Observer::qparams(bool is_signed, bool symmetric) const {
  if (!initialized)
    throw Error("observer has not seen any data");
  return qparams_from_minmax(running_min, running_max, is_signed, symmetric);
}

RequantMultiplier RequantMultiplier::from_real(double m) {
  if (!(m > 0) || !std::isfinite(m))
    throw Error("requantization multiplier must be positive and finite");
  int exp = 0;
  const double q = std::frexp(m, &exp); // m = q · 2^exp, q ∈ [0.5, 1)
  auto m0 = static_cast<std::int64_t>(std::round(q * 2147483648.0));
  if (m0 == (std::int64_t{1} << 31)) {
    m0 /= 2;
    ++exp;
  }
  if (exp > 30)
    throw Error("requantization multiplier too large");
  RequantMultiplier rq;
  rq.m0 = static_cast<std::int32_t>(m0);
  rq.shift = -exp;
  return rq;
}

double RequantMultiplier::value() const {
  return std::ldexp(static_cast<double>(m0), -31 - shift);
}

std::int64_t fixedpoint_mul(std::int64_t acc, const RequantMultiplier &rq) {
  const std::int64_t prod = acc * static_cast<std::int64_t>(rq.m0);
  const int total = 31 + rq.shift;
  if (total <= 0)
    return prod << -total;
  if (total > 62) // |prod| < 2^62 rounds to zero
    return 0;
  const std::int64_t half = std::int64_t{1} << (total - 1);
  if (prod >= 0)
    return (prod + half) >> total;
  return -((-prod + half) >> total);
}

QATIE_END_NAMESPACE
