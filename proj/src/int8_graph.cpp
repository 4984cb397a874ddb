// SPDX-License-Identifier: Apache-2.0
#include "qatie/int8_graph.hpp"

#include <algorithm>
#include <climits>
#include <cmath>

#include "qatie/kernels.hpp"

QATIE_BEGIN_NAMESPACE

namespace {

std::uint8_t saturate(std::int64_t v, const QuantParams &qp) {
  return static_cast<std::uint8_t>(std::clamp(v, qp.qmin, qp.qmax));
}

// round(a·Ma + b·Mb) from the exact sum of both fixed-point products,
// rounding half away from zero once.
std::int64_t fixedpoint_sum(std::int64_t a, const RequantMultiplier &ra,
                            std::int64_t b, const RequantMultiplier &rb) {
  using Wide = __int128;
  const int ta = 31 + ra.shift;
  const int tb = 31 + rb.shift;
  const int e = std::max(ta, tb);
  if (e - std::min(ta, tb) > 80)
    throw Error("int8_add: operand scales differ by more than 2^80");
  const Wide sum = (Wide{a} * ra.m0 << (e - ta)) + (Wide{b} * rb.m0 << (e - tb));
  if (e <= 0)
    return static_cast<std::int64_t>(sum << -e);
  const Wide half = Wide{1} << (e - 1);
  const Wide r = sum >= 0 ? (sum + half) >> e : -((-sum + half) >> e);
  return static_cast<std::int64_t>(std::clamp<Wide>(r, INT64_MIN, INT64_MAX));
}

void require_activation_qp(const QuantParams &qp, const char *what) {
  qp.validate();
  if (qp.per_channel() || qp.qmin < 0 || qp.qmax > 255)
    throw Error(std::string(what) + ": activations must be per-tensor UINT8");
}

} // namespace

U8Tensor int8_conv2d(const U8Tensor &input, const I8Tensor &weight,
                     const I32Tensor &bias,
                     std::span<const RequantMultiplier> rq,
                     const QuantParams &out_qp, int stride, int padding) {
  require_activation_qp(out_qp, "int8_conv2d");
  const Shape &is = input.shape;
  const Shape &ws = weight.shape;
  const Shape os = kernels::conv2d_shape(is, ws, bias.shape, stride, padding);
  if (!weight.qp.symmetric)
    throw Error("int8_conv2d: weights must be symmetric (zero point 0)");
  if (rq.size() != static_cast<std::size_t>(ws.n))
    throw Error("int8_conv2d: need one multiplier per output channel");
  const std::int32_t z_in = input.qp.zero_point_at(0);
  const std::int32_t z_out = out_qp.zero_point_at(0);

  std::vector<std::int16_t> centered(input.data.size());
  for (std::size_t i = 0; i < centered.size(); ++i)
    centered[i] = static_cast<std::int16_t>(input.data[i] - z_in);

  U8Tensor out{os, std::vector<std::uint8_t>(os.numel()), out_qp};
  std::vector<std::int32_t> acc(os.plane());
  for (int n = 0; n < os.n; ++n) {
    for (int oc = 0; oc < os.c; ++oc) {
      std::fill(acc.begin(), acc.end(), bias.data[oc]);
      for (int ic = 0; ic < is.c; ++ic) {
        const std::int16_t *src =
            centered.data() + (static_cast<std::size_t>(n) * is.c + ic) * is.plane();
        const std::int8_t *wk =
            weight.data.data() +
            (static_cast<std::size_t>(oc) * ws.c + ic) * ws.h * ws.w;
        for (int kh = 0; kh < ws.h; ++kh) {
          for (int kw = 0; kw < ws.w; ++kw) {
            const std::int32_t wv = wk[kh * ws.w + kw];
            if (wv == 0)
              continue;
            for (int oh = 0; oh < os.h; ++oh) {
              const int ih = oh * stride + kh - padding;
              if (ih < 0 || ih >= is.h)
                continue;
              std::int32_t *arow = acc.data() + oh * os.w;
              for (int ow = 0; ow < os.w; ++ow) {
                const int iw = ow * stride + kw - padding;
                if (iw < 0 || iw >= is.w)
                  continue;
                arow[ow] += wv * src[ih * is.w + iw];
              }
            }
          }
        }
      }
      std::uint8_t *dst =
          out.data.data() + (static_cast<std::size_t>(n) * os.c + oc) * os.plane();
      for (std::size_t i = 0; i < acc.size(); ++i)
        dst[i] = saturate(z_out + fixedpoint_mul(acc[i], rq[oc]), out_qp);
    }
  }
  return out;
}

U8Tensor int8_hadamard(const U8Tensor &a, const U8Tensor &b,
                       const RequantMultiplier &rq, const QuantParams &out_qp) {
  require_same_shape(a.shape, b.shape, "int8_hadamard");
  require_activation_qp(out_qp, "int8_hadamard");
  const std::int32_t za = a.qp.zero_point_at(0);
  const std::int32_t zb = b.qp.zero_point_at(0);
  const std::int32_t zo = out_qp.zero_point_at(0);
  U8Tensor out{a.shape, std::vector<std::uint8_t>(a.data.size()), out_qp};
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const std::int64_t prod =
        static_cast<std::int64_t>(a.data[i] - za) * (b.data[i] - zb);
    out.data[i] = saturate(zo + fixedpoint_mul(prod, rq), out_qp);
  }
  return out;
}

U8Tensor int8_add(const U8Tensor &a, const U8Tensor &b,
                  const RequantMultiplier &rq_a, const RequantMultiplier &rq_b,
                  const QuantParams &out_qp) {
  require_same_shape(a.shape, b.shape, "int8_add");
  require_activation_qp(out_qp, "int8_add");
  const std::int32_t za = a.qp.zero_point_at(0);
  const std::int32_t zb = b.qp.zero_point_at(0);
  const std::int32_t zo = out_qp.zero_point_at(0);
  U8Tensor out{a.shape, std::vector<std::uint8_t>(a.data.size()), out_qp};
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    out.data[i] = saturate(
        zo + fixedpoint_sum(a.data[i] - za, rq_a, b.data[i] - zb, rq_b), out_qp);
  }
  return out;
}

U8Tensor int8_requantize(const U8Tensor &x, const RequantMultiplier &rq,
                         const QuantParams &out_qp) {
  require_activation_qp(out_qp, "int8_requantize");
  const std::int32_t zx = x.qp.zero_point_at(0);
  const std::int32_t zo = out_qp.zero_point_at(0);
  U8Tensor out{x.shape, std::vector<std::uint8_t>(x.data.size()), out_qp};
  for (std::size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = saturate(zo + fixedpoint_mul(x.data[i] - zx, rq), out_qp);
  return out;
}

std::array<std::uint8_t, 256> build_tanh_lut(const QuantParams &in_qp,
                                             const QuantParams &out_qp) {
  require_activation_qp(in_qp, "tanh_lut");
  require_activation_qp(out_qp, "tanh_lut");
  std::array<std::uint8_t, 256> lut{};
  for (int i = 0; i < 256; ++i) {
    const Real x = dequantize_value(i, in_qp.scale_at(0), in_qp.zero_point_at(0));
    const Real y = std::tanh(x);
    lut[i] = static_cast<std::uint8_t>(quantize_value(
        y, out_qp.scale_at(0), out_qp.zero_point_at(0), out_qp.qmin, out_qp.qmax));
  }
  return lut;
}

U8Tensor tanh_lut(const U8Tensor &x, const std::array<std::uint8_t, 256> &lut,
                  const QuantParams &out_qp) {
  U8Tensor out{x.shape, std::vector<std::uint8_t>(x.data.size()), out_qp};
  for (std::size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = lut[x.data[i]];
  return out;
}

U8Tensor int8_upsample2x(const U8Tensor &x) {
  const Shape &s = x.shape;
  U8Tensor out{{s.n, s.c, 2 * s.h, 2 * s.w},
               std::vector<std::uint8_t>(4 * s.numel()),
               x.qp};
  const int ow = 2 * s.w;
  for (std::size_t p = 0; p < static_cast<std::size_t>(s.n) * s.c; ++p) {
    const std::uint8_t *src = x.data.data() + p * s.plane();
    std::uint8_t *dst = out.data.data() + p * 4 * s.plane();
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        const std::uint8_t v = src[h * s.w + w];
        std::uint8_t *r0 = dst + 2 * h * ow + 2 * w;
        r0[0] = r0[1] = r0[ow] = r0[ow + 1] = v;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------

const char *int8_op_name(Int8OpKind kind) {
  switch (kind) {
  case Int8OpKind::Quantize:
    return "quantize";
  case Int8OpKind::Conv:
    return "conv";
  case Int8OpKind::TanhLut:
    return "tanh_lut";
  case Int8OpKind::Hadamard:
    return "hadamard";
  case Int8OpKind::Add:
    return "add";
  case Int8OpKind::Concat:
    return "concat";
  case Int8OpKind::Upsample:
    return "upsample";
  case Int8OpKind::NormAct:
    return "norm_act";
  }
  return "?";
}

Int8OpKind int8_op_from_name(const std::string &name) {
  for (auto k : {Int8OpKind::Quantize, Int8OpKind::Conv, Int8OpKind::TanhLut,
                 Int8OpKind::Hadamard, Int8OpKind::Add, Int8OpKind::Concat,
                 Int8OpKind::Upsample, Int8OpKind::NormAct})
    if (name == int8_op_name(k))
      return k;
  throw FormatError("unknown integer op kind '" + name + "'");
}

U8Tensor Int8Graph::run_quantized(const Tensor &x) const {
  require_multiple_of_8(x.shape());
  std::vector<U8Tensor> slots(static_cast<std::size_t>(slot_count));
  auto in = [&](const Int8Op &op, std::size_t k) -> const U8Tensor & {
    return slots.at(static_cast<std::size_t>(op.inputs.at(k)));
  };
  for (const Int8Op &op : ops) {
    U8Tensor result;
    switch (op.kind) {
    case Int8OpKind::Quantize:
      result = quantize_u8(x, op.out_qp);
      break;
    case Int8OpKind::Conv:
      result = int8_conv2d(in(op, 0), op.weight, op.bias, op.multipliers,
                           op.out_qp, op.stride, op.padding);
      break;
    case Int8OpKind::TanhLut:
      result = tanh_lut(in(op, 0), op.lut, op.out_qp);
      break;
    case Int8OpKind::Hadamard:
      result = int8_hadamard(in(op, 0), in(op, 1), op.multipliers.at(0),
                             op.out_qp);
      break;
    case Int8OpKind::Add:
      result = int8_add(in(op, 0), in(op, 1), op.multipliers.at(0),
                        op.multipliers.at(1), op.out_qp);
      break;
    case Int8OpKind::Concat: {
      std::vector<U8Tensor> parts;
      for (std::size_t k = 0; k < op.inputs.size(); ++k)
        parts.push_back(int8_requantize(in(op, k), op.multipliers.at(k), op.out_qp));
      Shape s = parts.front().shape;
      s.c = 0;
      for (const U8Tensor &p : parts) {
        if (p.shape.h != s.h || p.shape.w != s.w || p.shape.n != s.n)
          throw ShapeError("int8 concat: spatial mismatch");
        s.c += p.shape.c;
      }
      result = {s, std::vector<std::uint8_t>(s.numel()), op.out_qp};
      for (int n = 0; n < s.n; ++n) {
        std::size_t dst = static_cast<std::size_t>(n) * s.c * s.plane();
        for (const U8Tensor &p : parts) {
          const std::size_t chunk = static_cast<std::size_t>(p.shape.c) * s.plane();
          std::copy_n(p.data.begin() + static_cast<std::ptrdiff_t>(n * chunk),
                      chunk, result.data.begin() + static_cast<std::ptrdiff_t>(dst));
          dst += chunk;
        }
      }
      break;
    }
    case Int8OpKind::Upsample:
      result = int8_upsample2x(in(op, 0));
      break;
    case Int8OpKind::NormAct: {
      const Tensor h = kernels::instance_norm(dequantize(in(op, 0)), op.gamma,
                                              op.beta, Real(1e-5));
      result = quantize_u8(kernels::leaky_relu(h, op.slope), op.out_qp);
      break;
    }
    }
    slots.at(static_cast<std::size_t>(op.output)) = std::move(result);
  }
  return slots.at(static_cast<std::size_t>(output_slot));
}

Tensor Int8Graph::run(const Tensor &x) const {
  return dequantize(run_quantized(x));
}

std::size_t Int8Graph::weight_bytes() const {
  std::size_t bytes = 0;
  for (const Int8Op &op : ops) {
    bytes += op.weight.data.size() * sizeof(std::int8_t);
    bytes += op.bias.data.size() * sizeof(std::int32_t);
    bytes += (op.gamma.numel() + op.beta.numel()) * sizeof(float);
  }
  return bytes;
}

// ---------------------------------------------------------------------------

namespace {

RequantMultiplier ratio(double num, double den) {
  return RequantMultiplier::from_real(num / den);
}

// Runs the shared topology and emits one integer op per primitive.
class Int8Builder {
public:
  struct Value {
    int slot = -1;
    QuantParams qp;
    bool float_input = false;
    const InstanceNormParams *norm = nullptr; // pending float island
  };

  Int8Builder(const QatNetwork &qnet, Int8Graph &graph)
      : qnet_(qnet), graph_(graph) {}

  template <class C>
  Value conv(const std::string &name, const C &p, const Value &x) {
    const Value in = materialized(x, name);
    Int8Op op;
    op.kind = Int8OpKind::Conv;
    op.name = name;
    op.stride = p.stride;
    op.padding = p.padding;
    const QuantParams wqp = weight_qparams(p.weight);
    op.weight = quantize_i8(p.weight, wqp);
    op.bias = quantize_i32(p.bias, bias_qparams(in.qp, wqp));
    op.out_qp = qnet_.activation_qparams(name);
    for (std::size_t oc = 0; oc < wqp.channels(); ++oc)
      op.multipliers.push_back(ratio(
          static_cast<double>(in.qp.scale_at(0)) * wqp.scale_at(oc),
          op.out_qp.scale_at(0)));
    return emit(std::move(op), {in});
  }

  Value tanh(const Value &x) {
    Int8Op op;
    op.kind = Int8OpKind::TanhLut;
    op.name = "tanh";
    op.out_qp = tanh_qparams();
    op.lut = build_tanh_lut(x.qp, op.out_qp);
    return emit(std::move(op), {x});
  }

  Value mul(const Value &a, const Value &b, const std::string &name) {
    Int8Op op;
    op.kind = Int8OpKind::Hadamard;
    op.name = name;
    op.out_qp = qnet_.activation_qparams(name);
    op.multipliers.push_back(
        ratio(static_cast<double>(a.qp.scale_at(0)) * b.qp.scale_at(0),
              op.out_qp.scale_at(0)));
    return emit(std::move(op), {a, b});
  }

  template <class P> Value norm_act(const Value &x, const P &p) {
    Value pending = x;
    pending.norm = &p;
    return pending;
  }

  Value concat(const std::vector<Value> &parts, const std::string &name) {
    const QuantParams out_qp = qnet_.activation_qparams(name);
    std::vector<Value> ins;
    for (const Value &p : parts)
      ins.push_back(p.norm ? island(p, out_qp, name) : p);
    return join(ins, out_qp, name);
  }

  Value upsample(const Value &x) {
    Int8Op op;
    op.kind = Int8OpKind::Upsample;
    op.name = "upsample";
    op.out_qp = x.qp;
    return emit(std::move(op), {x});
  }

  Value add(const Value &a, const Value &b, const std::string &name) {
    return add_into(a, b, qnet_.activation_qparams(name), name);
  }

  Value quant(const Value &x, const std::string &name) {
    const QuantParams qp = qnet_.activation_qparams(name);
    if (x.float_input) {
      Int8Op op;
      op.kind = Int8OpKind::Quantize;
      op.name = name;
      op.out_qp = qp;
      Value v = emit(std::move(op), {});
      return v;
    }
    if (x.norm)
      return island(x, qp, name);
    return join({x}, qp, name);
  }

  Value output(const Value &in, const Value &delta, bool residual) {
    if (residual)
      return add_into(in, delta, output_qparams(), "output");
    return join({delta}, output_qparams(), "output");
  }

private:
  Value materialized(const Value &x, const std::string &consumer) const {
    if (x.norm || x.float_input || x.slot < 0)
      throw Error("int8 conversion: input of '" + consumer +
                  "' is not quantized");
    return x;
  }

  Value island(const Value &x, const QuantParams &out_qp,
               const std::string &name) {
    Int8Op op;
    op.kind = Int8OpKind::NormAct;
    op.name = name + ".norm";
    op.out_qp = out_qp;
    op.gamma = x.norm->gamma;
    op.beta = x.norm->beta;
    op.slope = qnet_.network().config.leaky_slope;
    Value src = x;
    src.norm = nullptr;
    return emit(std::move(op), {src});
  }

  Value join(const std::vector<Value> &parts, const QuantParams &out_qp,
             const std::string &name) {
    Int8Op op;
    op.kind = Int8OpKind::Concat;
    op.name = name;
    op.out_qp = out_qp;
    for (const Value &p : parts)
      op.multipliers.push_back(
          ratio(p.qp.scale_at(0), out_qp.scale_at(0)));
    return emit(std::move(op), parts);
  }

  Value add_into(const Value &a, const Value &b, const QuantParams &out_qp,
                 const std::string &name) {
    Int8Op op;
    op.kind = Int8OpKind::Add;
    op.name = name;
    op.out_qp = out_qp;
    op.multipliers = {ratio(a.qp.scale_at(0), out_qp.scale_at(0)),
                      ratio(b.qp.scale_at(0), out_qp.scale_at(0))};
    return emit(std::move(op), {a, b});
  }

  Value emit(Int8Op op, const std::vector<Value> &inputs) {
    for (const Value &v : inputs)
      op.inputs.push_back(materialized(v, op.name).slot);
    op.output = graph_.slot_count++;
    Value out;
    out.slot = op.output;
    out.qp = op.out_qp;
    graph_.ops.push_back(std::move(op));
    return out;
  }

  const QatNetwork &qnet_;
  Int8Graph &graph_;
};

} // namespace

Int8Graph convert_int8(const QatNetwork &qnet) {
  Int8Graph graph;
  graph.config = qnet.network().config;
  Int8Builder builder(qnet, graph);
  Int8Builder::Value input;
  input.float_input = true;
  const Int8Builder::Value out =
      arch::network(builder, qnet.network(), input);
  graph.output_slot = out.slot;
  return graph;
}

QATIE_END_NAMESPACE
