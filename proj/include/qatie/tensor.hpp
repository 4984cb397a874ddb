// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense 4-D tensor in N,C,H,W row-major layout.
 */
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qatie/common.hpp"

QATIE_BEGIN_NAMESPACE

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape &) const = default;
  std::string str() const;
};

/**
 * Owning tensor of Real values with an optional gradient buffer of the same
 * shape. The gradient is absent until ensure_grad() is called.
 */
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  const Shape &shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  const std::vector<Real> &values() const { return data_; }

  Real &operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }
  Real &at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  Real at(int n, int c, int h, int w) const {
    return data_[offset(n, c, h, w)];
  }

  /// Pointer to the start of plane (n, c).
  Real *plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const Real *plane(int n, int c) const {
    return data_.data() + offset(n, c, 0, 0);
  }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates a zero gradient if none is present.
  std::span<Real> ensure_grad();
  std::span<Real> grad() { return grad_; }
  std::span<const Real> grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); }

  /// Sample n as a 1×C×H×W tensor.
  Tensor sample(int n) const;
  /// Samples [first, first + count).
  Tensor samples(int first, int count) const;

  bool all_finite() const;

private:
  Shape shape_;
  std::vector<Real> data_;
  std::vector<Real> grad_;
};

/// Stacks equally shaped tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> parts);

/// Throws ShapeError naming `what` when the shapes differ.
void require_same_shape(const Shape &a, const Shape &b, const char *what);

QATIE_END_NAMESPACE
