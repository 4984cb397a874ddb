// SPDX-License-Identifier: Apache-2.0
#include "qatie/tensor.hpp"

#include <algorithm>
#include <cmath>

QATIE_BEGIN_NAMESPACE

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" +
         std::to_string(h) + "x" + std::to_string(w);
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
    throw ShapeError("negative tensor dimension in " + shape.str());
}

Tensor::Tensor(Shape shape, std::vector<Real> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape.str());
}

std::span<Real> Tensor::ensure_grad() {
  if (grad_.size() != data_.size())
    grad_.assign(data_.size(), Real(0));
  return grad_;
}

void Tensor::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), Real(0));
}

Tensor Tensor::sample(int n) const { return samples(n, 1); }

Tensor Tensor::samples(int first, int count) const {
  if (first < 0 || count < 0 || first + count > shape_.n)
    throw ShapeError("sample range out of bounds for " + shape_.str());
  Shape s = shape_;
  s.n = count;
  const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
  auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * per);
  return Tensor(s, std::vector<Real>(begin, begin + static_cast<std::ptrdiff_t>(count * per)));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](Real v) { return std::isfinite(v); });
}

Tensor stack_batch(std::span<const Tensor> parts) {
  if (parts.empty())
    throw ShapeError("stack_batch: no tensors given");
  Shape s = parts.front().shape();
  std::vector<Real> values;
  values.reserve(s.numel() * parts.size());
  int total = 0;
  for (const Tensor &t : parts) {
    Shape ts = t.shape();
    if (ts.c != s.c || ts.h != s.h || ts.w != s.w)
      throw ShapeError("stack_batch: " + ts.str() + " does not match " +
                       s.str());
    values.insert(values.end(), t.data().begin(), t.data().end());
    total += ts.n;
  }
  s.n = total;
  return Tensor(s, std::move(values));
}

void require_same_shape(const Shape &a, const Shape &b, const char *what) {
  if (a == b)
    return;
  const char *dim = a.n != b.n   ? "batch"
                    : a.c != b.c ? "channel"
                    : a.h != b.h ? "height"
                                 : "width";
  throw ShapeError(std::string(what) + ": " + dim + " mismatch (" + a.str() +
                   " vs " + b.str() + ")");
}

QATIE_END_NAMESPACE
