// SPDX-License-Identifier: Apache-2.0
#include "qatie/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "qatie/kernels.hpp"

QATIE_BEGIN_NAMESPACE

const char *primitive_name(Primitive p) {
  switch (p) {
  case Primitive::Leaf:
    return "leaf";
  case Primitive::Conv2d:
    return "conv2d";
  case Primitive::Tanh:
    return "tanh";
  case Primitive::Hadamard:
    return "hadamard";
  case Primitive::LeakyRelu:
    return "leaky_relu";
  case Primitive::InstanceNorm:
    return "instance_norm";
  case Primitive::Upsample:
    return "upsample";
  case Primitive::Concat:
    return "concat";
  case Primitive::Add:
    return "add";
  case Primitive::Clip01:
    return "clip01";
  case Primitive::SliceBatch:
    return "slice_batch";
  case Primitive::FakeQuant:
    return "fake_quant";
  case Primitive::Loss:
    return "loss";
  case Primitive::Combine:
    return "combine";
  }
  return "?";
}

const Tensor &Var::value() const { return tape->value(id); }

Tape::Node &Tape::append(Primitive prim) {
  if (frozen_)
    throw Error("tape is frozen after backward(); record a new tape");
  nodes_.emplace_back();
  nodes_.back().prim = prim;
  return nodes_.back();
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node &node = append(Primitive::Leaf);
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Tensor &param) {
  Node &node = append(Primitive::Leaf);
  node.ref = &param;
  node.param = &param;
  node.requires_grad = grad_enabled_;
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant_ref(const Tensor &value) {
  Node &node = append(Primitive::Leaf);
  node.ref = &value;
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Primitive prim, Tensor value, std::initializer_list<Var> inputs,
               Backward backward) {
  return push(prim, std::move(value),
              std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(backward));
}

Var Tape::push(Primitive prim, Tensor value, std::span<const Var> inputs,
               Backward backward) {
  const int self = static_cast<int>(nodes_.size());
  bool needs = false;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Var &v : inputs) {
    if (v.tape != this || v.id < 0 || v.id >= self)
      throw Error("tape: input is not an earlier node of this tape");
    ids.push_back(v.id);
    needs = needs || nodes_[v.id].requires_grad;
  }
  Node &node = append(prim);
  node.value = std::move(value);
  node.inputs = std::move(ids);
  node.requires_grad = needs && grad_enabled_;
  if (node.requires_grad)
    node.backward = std::move(backward);
  return {this, self};
}

const Tensor &Tape::value(int id) const {
  const Node &node = nodes_.at(static_cast<std::size_t>(id));
  return node.ref ? *node.ref : node.value;
}

std::span<Real> Tape::input_grad(int node, std::size_t k) {
  Node &input = nodes_[nodes_[node].inputs[k]];
  if (!input.requires_grad)
    return {};
  if (input.grad.empty())
    input.grad.assign(value(nodes_[node].inputs[k]).numel(), Real(0));
  return input.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this)
    throw Error("backward: loss belongs to another tape");
  if (value(loss.id).numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     value(loss.id).shape().str());
  frozen_ = true;
  for (Node &node : nodes_)
    node.grad.clear();
  if (!nodes_[loss.id].requires_grad)
    return;
  nodes_[loss.id].grad.assign(1, Real(1));
  for (int id = loss.id; id >= 0; --id) {
    Node &node = nodes_[id];
    if (node.grad.empty() || !node.backward)
      continue;
    if (node.prim == corrupt_prim_ && corrupt_factor_ != Real(1)) {
      // Scale the adjoints this node emits.
      std::vector<std::vector<Real>> before;
      for (int in : node.inputs)
        before.push_back(nodes_[in].grad);
      node.backward(*this, id);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        auto &g = nodes_[node.inputs[k]].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const Real prev = before[k].empty() ? Real(0) : before[k][i];
          g[i] = prev + (g[i] - prev) * corrupt_factor_;
        }
      }
      continue;
    }
    node.backward(*this, id);
  }
  for (Node &node : nodes_) {
    if (!node.param || node.grad.empty())
      continue;
    auto g = node.param->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += node.grad[i];
  }
}

// ---------------------------------------------------------------------------

namespace {

void require_same_tape(const Var &a, const Var &b) {
  if (a.tape != b.tape || a.tape == nullptr)
    throw Error("operands live on different tapes");
}

} // namespace

Var conv2d(Var input, Var weight, Var bias, int stride, int padding) {
  require_same_tape(input, weight);
  require_same_tape(input, bias);
  Tensor out = kernels::conv2d(input.value(), weight.value(), bias.value(),
                               stride, padding);
  const Shape out_shape = out.shape();
  return input.tape->push(
      Primitive::Conv2d, std::move(out), {input, weight, bias},
      [stride, padding, out_shape](Tape &t, int self) {
        const auto ins = t.inputs(self);
        kernels::conv2d_backward(t.value(ins[0]), t.value(ins[1]), t.grad(self),
                                 out_shape, stride, padding,
                                 t.input_grad(self, 0), t.input_grad(self, 1),
                                 t.input_grad(self, 2));
      });
}

Var tanh_map(Var input) {
  Tensor out(input.shape());
  auto x = input.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = std::tanh(x[i]);
  return input.tape->push(Primitive::Tanh, std::move(out), {input},
                          [](Tape &t, int self) {
                            auto gx = t.input_grad(self, 0);
                            auto gy = t.grad(self);
                            auto y = t.value(self).data();
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              gx[i] += gy[i] * (Real(1) - y[i] * y[i]);
                          });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "hadamard");
  Tensor out(a.shape());
  auto x = a.value().data();
  auto z = b.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = x[i] * z[i];
  return a.tape->push(Primitive::Hadamard, std::move(out), {a, b},
                      [](Tape &t, int self) {
                        const auto ins = t.inputs(self);
                        auto av = t.value(ins[0]).data();
                        auto bv = t.value(ins[1]).data();
                        auto gy = t.grad(self);
                        auto ga = t.input_grad(self, 0);
                        auto gb = t.input_grad(self, 1);
                        for (std::size_t i = 0; i < ga.size(); ++i)
                          ga[i] += gy[i] * bv[i];
                        for (std::size_t i = 0; i < gb.size(); ++i)
                          gb[i] += gy[i] * av[i];
                      });
}

Var leaky_relu(Var input, Real slope) {
  if (!(slope > 0 && slope < 1))
    throw Error("leaky_relu: slope must lie in (0, 1)");
  return input.tape->push(Primitive::LeakyRelu,
                          kernels::leaky_relu(input.value(), slope), {input},
                          [slope](Tape &t, int self) {
                            auto x = t.value(t.inputs(self)[0]).data();
                            auto gy = t.grad(self);
                            auto gx = t.input_grad(self, 0);
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              gx[i] += x[i] >= 0 ? gy[i] : slope * gy[i];
                          });
}

Var instance_norm(Var input, Var gamma, Var beta, Real eps) {
  require_same_tape(input, gamma);
  require_same_tape(input, beta);
  auto stats = std::make_shared<kernels::NormStats>();
  Tensor out = kernels::instance_norm(input.value(), gamma.value(),
                                      beta.value(), eps, stats.get());
  return input.tape->push(
      Primitive::InstanceNorm, std::move(out), {input, gamma, beta},
      [stats](Tape &t, int self) {
        kernels::instance_norm_backward(
            t.value(self).shape(), *stats, t.value(t.inputs(self)[1]),
            t.grad(self), t.input_grad(self, 0), t.input_grad(self, 1),
            t.input_grad(self, 2));
      });
}

Var upsample_nearest2x(Var input) {
  return input.tape->push(
      Primitive::Upsample, kernels::upsample_nearest2x(input.value()), {input},
      [](Tape &t, int self) {
        auto gx = t.input_grad(self, 0);
        auto gy = t.grad(self);
        const Shape s = t.value(t.inputs(self)[0]).shape();
        const int ow = 2 * s.w;
        for (std::size_t p = 0; p < static_cast<std::size_t>(s.n) * s.c; ++p) {
          const Real *src = gy.data() + p * 4 * s.plane();
          Real *dst = gx.data() + p * s.plane();
          for (int h = 0; h < s.h; ++h) {
            const Real *r0 = src + (2 * h) * ow;
            const Real *r1 = r0 + ow;
            for (int w = 0; w < s.w; ++w)
              dst[h * s.w + w] +=
                  r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
          }
        }
      });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty())
    throw ShapeError("concat_channels: no parts");
  std::vector<const Tensor *> values;
  for (const Var &p : parts) {
    require_same_tape(parts.front(), p);
    values.push_back(&p.value());
  }
  Tensor out = kernels::concat_channels(values);
  return parts.front().tape->push(
      Primitive::Concat, std::move(out), parts, [](Tape &t, int self) {
        const Shape s = t.value(self).shape();
        const auto ins = t.inputs(self);
        auto gy = t.grad(self);
        int c0 = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const int pc = t.value(ins[k]).shape().c;
          auto gx = t.input_grad(self, k);
          if (!gx.empty()) {
            const std::size_t chunk = static_cast<std::size_t>(pc) * s.plane();
            for (int n = 0; n < s.n; ++n) {
              const Real *src =
                  gy.data() + (static_cast<std::size_t>(n) * s.c + c0) * s.plane();
              Real *dst = gx.data() + static_cast<std::size_t>(n) * chunk;
              for (std::size_t i = 0; i < chunk; ++i)
                dst[i] += src[i];
            }
          }
          c0 += pc;
        }
      });
}

Var concat_channels(std::initializer_list<Var> parts) {
  return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor out(a.shape());
  auto x = a.value().data();
  auto z = b.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = x[i] + z[i];
  return a.tape->push(Primitive::Add, std::move(out), {a, b},
                      [](Tape &t, int self) {
                        auto gy = t.grad(self);
                        for (std::size_t k = 0; k < 2; ++k) {
                          auto gx = t.input_grad(self, k);
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            gx[i] += gy[i];
                        }
                      });
}

Var clip01(Var input) {
  Tensor out(input.shape());
  auto x = input.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = std::clamp(x[i], Real(0), Real(1));
  return input.tape->push(Primitive::Clip01, std::move(out), {input},
                          [](Tape &t, int self) {
                            auto x = t.value(t.inputs(self)[0]).data();
                            auto gy = t.grad(self);
                            auto gx = t.input_grad(self, 0);
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              if (x[i] >= 0 && x[i] <= 1)
                                gx[i] += gy[i];
                          });
}

Var slice_batch(Var input, int first, int count) {
  Tensor out = input.value().samples(first, count);
  return input.tape->push(
      Primitive::SliceBatch, std::move(out), {input},
      [first](Tape &t, int self) {
        auto gy = t.grad(self);
        auto gx = t.input_grad(self, 0);
        const std::size_t offset = static_cast<std::size_t>(first) * gy.size() /
                                   static_cast<std::size_t>(t.value(self).shape().n);
        for (std::size_t i = 0; i < gy.size(); ++i)
          gx[offset + i] += gy[i];
      });
}

Var combine(std::span<const Var> terms, std::span<const Real> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size())
    throw Error("combine: need one coefficient per term");
  Real total = 0;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].value().numel() != 1)
      throw ShapeError("combine: terms must be scalars");
    total += coeffs[k] * terms[k].value()[0];
  }
  std::vector<Real> cs(coeffs.begin(), coeffs.end());
  return terms.front().tape->push(
      Primitive::Combine, Tensor({1, 1, 1, 1}, total), terms,
      [cs](Tape &t, int self) {
        const Real g = t.grad(self)[0];
        for (std::size_t k = 0; k < cs.size(); ++k) {
          auto gx = t.input_grad(self, k);
          if (!gx.empty())
            gx[0] += cs[k] * g;
        }
      });
}

QATIE_END_NAMESPACE
