// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Three-scale gated enhancement network.
 *
 * Encoder: three gated down-sampling blocks (S -> S/2 -> S/4 -> S/8), each
 * followed by a refinement block. Decoder: fusion at S/4 and S/2 of the
 * upsampled deeper feature, the refined encoder feature and the (x_a, x_b)
 * skip pair, then a head that upsamples to S and predicts a residual δ.
 *
 * The topology is written once, in namespace arch, against a backend
 * interface. The tape backend below runs it for training, calibration and
 * fake-quant simulation; the INT8 converter runs the same code to emit its
 * integer program.
 */
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qatie/quant.hpp"
#include "qatie/tape.hpp"
#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

struct ModelConfig {
  int base_width = 8;
  int in_channels = 3;
  int out_channels = 3;
  Real leaky_slope = Real(0.2);
  bool residual_head = true;

  /// Widths at S/2, S/4, S/8.
  std::array<int, 3> stage_widths() const {
    return {base_width, 2 * base_width, 4 * base_width};
  }
  void validate() const;
};

struct Conv2d {
  Tensor weight; // OC×IC×KH×KW
  Tensor bias;   // 1×OC×1×1
  int stride = 1;
  int padding = 0;

  int in_channels() const { return weight.shape().c; }
  int out_channels() const { return weight.shape().n; }
};

struct InstanceNormParams {
  Tensor gamma; // 1×C×1×1
  Tensor beta;
};

struct GatedBlockParams {
  Conv2d branch_a;
  Conv2d branch_b;
};

struct RefineBlockParams {
  Conv2d conv1;
  InstanceNormParams norm1;
  Conv2d conv_side;
  Conv2d conv2;
  InstanceNormParams norm2;
  Conv2d conv3;
  Conv2d shortcut;
};

struct FuseBlockParams {
  Conv2d up_conv;
  Conv2d reduce;
  RefineBlockParams refine;
};

struct Network {
  ModelConfig config;
  GatedBlockParams down1, down2, down3;
  RefineBlockParams enc_refine1, enc_refine2, bottleneck_refine;
  FuseBlockParams fuse_s4, fuse_s2;
  Conv2d head;

  /// Visits every parameter tensor with a stable dotted name.
  void visit(const std::function<void(const std::string &, Tensor &)> &fn);
  void visit(
      const std::function<void(const std::string &, const Tensor &)> &fn) const;
  std::vector<Tensor *> parameters();
  std::size_t param_count() const;
  void zero_grad();
};

/// Zero-filled network with every tensor shaped for `config`.
Network build_network(const ModelConfig &config);

/**
 * Seeded initialization: conv weights ~ U(-1/√fan_in, 1/√fan_in), biases 0,
 * instance-norm gamma 1 and beta 0.
 */
Network init_network(const ModelConfig &config, std::uint64_t seed);

std::size_t param_count(const ModelConfig &config);

// ---------------------------------------------------------------------------
// Topology.

namespace arch {

template <class B> using Value = typename B::Value;

template <class B, class G>
std::array<Value<B>, 3> gated_down(B &be, G &p, const std::string &name,
                                   const Value<B> &x) {
  Value<B> xa = be.tanh(be.conv(name + ".a", p.branch_a, x));
  Value<B> xb = be.tanh(be.conv(name + ".b", p.branch_b, x));
  Value<B> xg = be.mul(xa, xb, name + ".gate");
  return {xa, xg, xb};
}

template <class B, class R>
Value<B> refine(B &be, R &p, const std::string &name, const Value<B> &f) {
  Value<B> h1 = be.norm_act(be.conv(name + ".conv1", p.conv1, f), p.norm1);
  Value<B> side = be.conv(name + ".side", p.conv_side, f);
  Value<B> cat = be.concat({h1, side}, name + ".cat");
  Value<B> h2 = be.quant(
      be.norm_act(be.conv(name + ".conv2", p.conv2, cat), p.norm2),
      name + ".act2");
  Value<B> body = be.conv(name + ".conv3", p.conv3, h2);
  Value<B> shortcut = be.conv(name + ".short", p.shortcut, f);
  return be.add(body, shortcut, name + ".out");
}

/// `skips` is the (x_a, x_b) pair, or both already joined along channels.
template <class B, class F>
Value<B> fuse(B &be, F &p, const std::string &name, const Value<B> &deep,
              const Value<B> &enc, const std::vector<Value<B>> &skips) {
  Value<B> up = be.conv(name + ".up", p.up_conv, be.upsample(deep));
  std::vector<Value<B>> streams{up, enc};
  streams.insert(streams.end(), skips.begin(), skips.end());
  Value<B> cat = be.concat(streams, name + ".cat");
  Value<B> reduced = be.conv(name + ".reduce", p.reduce, cat);
  return refine(be, p.refine, name + ".refine", reduced);
}

template <class B, class N> Value<B> network(B &be, N &net, const Value<B> &x) {
  Value<B> in = be.quant(x, "input");
  auto [a1, g1, b1] = gated_down(be, net.down1, "down1", in);
  Value<B> e1 = refine(be, net.enc_refine1, "enc1", g1);
  auto [a2, g2, b2] = gated_down(be, net.down2, "down2", e1);
  Value<B> e2 = refine(be, net.enc_refine2, "enc2", g2);
  // The S/8 block's (x_a, x_b) pair has no fusion partner.
  auto [a3, g3, b3] = gated_down(be, net.down3, "down3", e2);
  Value<B> bottleneck = refine(be, net.bottleneck_refine, "bottleneck", g3);
  Value<B> d4 = fuse(be, net.fuse_s4, "fuse4", bottleneck, e2, {a2, b2});
  Value<B> d2 = fuse(be, net.fuse_s2, "fuse2", d4, e1, {a1, b1});
  Value<B> delta = be.conv("head", net.head, be.upsample(d2));
  return be.output(in, delta, net.config.residual_head);
}

} // namespace arch

// ---------------------------------------------------------------------------
// Tape backend.

/// A tape value together with the lattice it lies on, if quantized.
struct QValue {
  Var var;
  std::optional<QuantParams> qp;
};

enum class FixedRange { Tanh, Output };

/**
 * Quantization insertion points consulted by the tape backend. A null hooks
 * pointer runs the plain FP32 network.
 */
class QuantHooks {
public:
  virtual ~QuantHooks() = default;
  virtual QValue activation(const std::string &point, Var v) = 0;
  virtual QValue fixed(FixedRange range, Var v) = 0;
  /// Returns the (possibly fake-quantized) weight and bias leaves.
  virtual std::pair<Var, Var>
  conv_params(Var weight, Var bias, const std::optional<QuantParams> &input) = 0;
};

class TapeBackend {
public:
  using Value = QValue;

  TapeBackend(Tape &tape, Real leaky_slope, QuantHooks *hooks = nullptr)
      : tape_(tape), slope_(leaky_slope), hooks_(hooks) {}

  Var leaf(Tensor &t) { return tape_.param(t); }
  Var leaf(const Tensor &t) { return tape_.constant_ref(t); }

  template <class C>
  Value conv(const std::string &name, C &p, const Value &x) {
    Var w = leaf(p.weight);
    Var b = leaf(p.bias);
    if (hooks_)
      std::tie(w, b) = hooks_->conv_params(w, b, x.qp);
    return quant({conv2d(x.var, w, b, p.stride, p.padding), std::nullopt},
                 name);
  }
  Value tanh(const Value &x) { return fixed(tanh_map(x.var), FixedRange::Tanh); }
  Value mul(const Value &a, const Value &b, const std::string &name) {
    return quant({hadamard(a.var, b.var), std::nullopt}, name);
  }
  template <class P> Value norm_act(const Value &x, P &p) {
    Var y = instance_norm(x.var, leaf(p.gamma), leaf(p.beta));
    return {leaky_relu(y, slope_), std::nullopt};
  }
  Value concat(const std::vector<Value> &parts, const std::string &name) {
    std::vector<Var> vars;
    for (const Value &p : parts)
      vars.push_back(p.var);
    return quant({concat_channels(vars), std::nullopt}, name);
  }
  Value upsample(const Value &x) { return {upsample_nearest2x(x.var), x.qp}; }
  Value add(const Value &a, const Value &b, const std::string &name) {
    return quant({qatie::add(a.var, b.var), std::nullopt}, name);
  }
  Value quant(const Value &x, const std::string &name) {
    return hooks_ ? hooks_->activation(name, x.var) : x;
  }
  Value output(const Value &in, const Value &delta, bool residual) {
    Var y = clip01(residual ? qatie::add(in.var, delta.var) : delta.var);
    return fixed(y, FixedRange::Output);
  }

private:
  Value fixed(Var v, FixedRange r) {
    return hooks_ ? hooks_->fixed(r, v) : Value{v, std::nullopt};
  }

  Tape &tape_;
  Real slope_;
  QuantHooks *hooks_;
};

// ---------------------------------------------------------------------------
// Forward entry points.

struct GatedOutputs {
  Var x_a;
  Var x_g;
  Var x_b;
};

/// Rejects odd spatial dimensions.
GatedOutputs gated_down_forward(Tape &tape, GatedBlockParams &params, Var x);
Var refine_forward(Tape &tape, RefineBlockParams &params, Var f,
                   Real leaky_slope = Real(0.2));
/// skip_ab holds x_a and x_b concatenated along channels.
Var fuse_forward(Tape &tape, FuseBlockParams &params, Var f_deep,
                 Var f_enc_refined, Var skip_ab, Real leaky_slope = Real(0.2));

/// Records the network on `tape`; H and W must be multiples of 8.
Var network_forward(Tape &tape, Network &net, Var x,
                    QuantHooks *hooks = nullptr);

/// Gradient-free forward of a batch.
Tensor network_infer(const Network &net, const Tensor &x);

/// Names of every observer-driven activation quantization point, in
/// execution order.
std::vector<std::string> activation_points(const ModelConfig &config);

struct CropRecord {
  int height = 0;
  int width = 0;
  bool padded = false;
};

/// Reflect-pads right/bottom up to the next multiple of m.
std::pair<Tensor, CropRecord> pad_to_multiple(const Tensor &x, int m);
Tensor crop(const Tensor &x, const CropRecord &record);

void require_multiple_of_8(const Shape &s);

QATIE_END_NAMESPACE
