// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tape.hpp
 * @brief  Reverse-mode automatic differentiation over a recorded tape.
 *
 * Forward ops append nodes in execution order; backward() replays the
 * adjoint rules in reverse. Leaves are either constants (inputs, targets) or
 * parameters whose gradient is accumulated into Tensor::grad of the referenced
 * tensor when backward() finishes.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

class Tape;

enum class Primitive : std::uint8_t {
  Leaf,
  Conv2d,
  Tanh,
  Hadamard,
  LeakyRelu,
  InstanceNorm,
  Upsample,
  Concat,
  Add,
  Clip01,
  SliceBatch,
  FakeQuant,
  Loss,
  Combine,
};

const char *primitive_name(Primitive p);

/// Handle to a tape node.
struct Var {
  Tape *tape = nullptr;
  int id = -1;

  const Tensor &value() const;
  const Shape &shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
  /// Adjoint rule: reads the node's output gradient and accumulates into the
  /// gradients of its inputs through Tape::input_grad().
  using Backward = std::function<void(Tape &, int node)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  bool frozen() const { return frozen_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf owning a copy of `value`. Its gradient is readable via grad().
  Var leaf(Tensor value, bool requires_grad = false);
  /// Leaf referencing a parameter; backward() accumulates into param.grad.
  Var param(Tensor &param);
  /// Leaf referencing a tensor without gradient tracking.
  Var constant_ref(const Tensor &value);

  /**
   * Appends an op node. `backward` is dropped when gradients are disabled or
   * none of the inputs requires a gradient.
   */
  Var push(Primitive prim, Tensor value, std::initializer_list<Var> inputs,
           Backward backward);
  Var push(Primitive prim, Tensor value, std::span<const Var> inputs,
           Backward backward);

  const Tensor &value(int id) const;
  Primitive primitive(int id) const { return nodes_[id].prim; }
  std::span<const int> inputs(int id) const { return nodes_[id].inputs; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Output adjoint of node `id` (empty span before backward reaches it).
  std::span<const Real> grad(int id) const { return nodes_[id].grad; }
  /// Adjoint buffer of the k-th input of `node`; empty if it needs none.
  std::span<Real> input_grad(int node, std::size_t k);

  /**
   * Reverse pass from a scalar (single element) node. Node adjoints are
   * recomputed from scratch on every call; parameter gradients accumulate, so
   * a second call without zeroing doubles them. The tape is frozen afterwards.
   */
  void backward(Var loss);

  /// Test hook: scale the adjoint emitted by one primitive kind.
  void corrupt_adjoint(Primitive prim, Real factor) {
    corrupt_prim_ = prim;
    corrupt_factor_ = factor;
  }

private:
  struct Node {
    Primitive prim = Primitive::Leaf;
    Tensor value;
    const Tensor *ref = nullptr;
    Tensor *param = nullptr;
    std::vector<int> inputs;
    Backward backward;
    bool requires_grad = false;
    std::vector<Real> grad;
  };

  Node &append(Primitive prim);

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool frozen_ = false;
  Primitive corrupt_prim_ = Primitive::Leaf;
  Real corrupt_factor_ = 1;
};

// Differentiable primitives.

Var conv2d(Var input, Var weight, Var bias, int stride, int padding);
Var tanh_map(Var input);
Var hadamard(Var a, Var b);
Var leaky_relu(Var input, Real slope);
/// eps defaults to 1e-5. A 1×1 plane has zero variance and yields beta.
Var instance_norm(Var input, Var gamma, Var beta, Real eps = Real(1e-5));
Var upsample_nearest2x(Var input);
Var concat_channels(std::span<const Var> parts);
Var concat_channels(std::initializer_list<Var> parts);
Var add(Var a, Var b);
/// Clamp to [0, 1]; the adjoint passes through on the closed interval.
Var clip01(Var input);
/// Samples [first, first + count) along the batch axis.
Var slice_batch(Var input, int first, int count);
/// Σ coeffs[i]·terms[i] over scalar nodes.
Var combine(std::span<const Var> terms, std::span<const Real> coeffs);

QATIE_END_NAMESPACE
