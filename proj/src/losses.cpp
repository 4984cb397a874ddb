// SPDX-License-Identifier: Apache-2.0
#include "qatie/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>

QATIE_BEGIN_NAMESPACE

namespace {

double sum_sq_diff(const Tensor &pred, const Tensor &target) {
  require_same_shape(pred.shape(), target.shape(), "loss");
  if (pred.empty())
    throw ShapeError("loss: empty tensors");
  auto p = pred.data();
  auto t = target.data();
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    s += d * d;
  }
  return s;
}

struct CosineParts {
  double dot = 0;
  double pp = 0;
  double tt = 0;
};

CosineParts cosine_parts(const Tensor &pred, const Tensor &target) {
  require_same_shape(pred.shape(), target.shape(), "cosine_loss");
  CosineParts c;
  auto p = pred.data();
  auto t = target.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    c.dot += static_cast<double>(p[i]) * t[i];
    c.pp += static_cast<double>(p[i]) * p[i];
    c.tt += static_cast<double>(t[i]) * t[i];
  }
  return c;
}

Tensor scalar(double v) { return Tensor({1, 1, 1, 1}, static_cast<Real>(v)); }

} // namespace

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0)
    throw DataError("loss weights must be non-negative");
}

double rmse(const Tensor &pred, const Tensor &target) {
  return std::sqrt(sum_sq_diff(pred, target) /
                   static_cast<double>(pred.numel()));
}

double psnr_from_rmse(double r, const PsnrConfig &cfg) {
  return 20.0 * std::log10(cfg.max_value /
                           std::max(r, static_cast<double>(cfg.rmse_floor)));
}

double psnr(const Tensor &pred, const Tensor &target, const PsnrConfig &cfg) {
  return psnr_from_rmse(rmse(pred, target), cfg);
}

double psnr_loss_value(const Tensor &pred, const Tensor &target,
                       const PsnrConfig &cfg) {
  return (50.0 - psnr(pred, target, cfg)) / 100.0;
}

double cosine_loss_value(const Tensor &pred, const Tensor &target) {
  const CosineParts c = cosine_parts(pred, target);
  return 1.0 - c.dot / (std::sqrt(c.pp) * std::sqrt(c.tt) + kCosineEps);
}

std::vector<Real> outlier_weights(const Tensor &pred, const Tensor &target) {
  require_same_shape(pred.shape(), target.shape(), "outlier_loss");
  auto p = pred.data();
  auto t = target.data();
  const std::size_t n = p.size();
  std::vector<double> e(n);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = std::abs(static_cast<double>(p[i]) - t[i]);
    mean += e[i];
  }
  mean /= static_cast<double>(n);
  double var = 0;
  for (double v : e)
    var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / static_cast<double>(n));
  std::vector<Real> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<Real>(
        std::exp(-std::max(0.0, (e[i] - mean) / (sigma + 1e-8))));
  return w;
}

double outlier_loss_value(const Tensor &pred, const Tensor &target) {
  const std::vector<Real> w = outlier_weights(pred, target);
  auto p = pred.data();
  auto t = target.data();
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    s += w[i] * std::abs(static_cast<double>(p[i]) - t[i]);
  return s / static_cast<double>(p.size());
}

LossTerms loss_terms(const Tensor &pred, const Tensor &target,
                     const LossWeights &w, const PsnrConfig &cfg) {
  LossTerms terms;
  terms.psnr = psnr(pred, target, cfg);
  terms.psnr_loss = (50.0 - terms.psnr) / 100.0;
  terms.cosine = cosine_loss_value(pred, target);
  terms.outlier = outlier_loss_value(pred, target);
  terms.total = w.alpha * terms.psnr_loss + w.beta * terms.cosine +
                w.gamma * terms.outlier;
  return terms;
}

// ---------------------------------------------------------------------------

Var rmse(Var pred, const Tensor &target) {
  const double r = rmse(pred.value(), target);
  const Tensor *tgt = &target;
  return pred.tape->push(
      Primitive::Loss, scalar(r), {pred}, [tgt, r](Tape &t, int self) {
        if (r <= 0)
          return;
        auto p = t.value(t.inputs(self)[0]).data();
        auto y = tgt->data();
        auto gx = t.input_grad(self, 0);
        const double k = t.grad(self)[0] / (static_cast<double>(p.size()) * r);
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += static_cast<Real>(k * (static_cast<double>(p[i]) - y[i]));
      });
}

Var psnr_loss(Var pred, const Tensor &target, const PsnrConfig &cfg) {
  const double r = rmse(pred.value(), target);
  const double value = (50.0 - psnr_from_rmse(r, cfg)) / 100.0;
  const bool active = r > cfg.rmse_floor;
  const Tensor *tgt = &target;
  return pred.tape->push(
      Primitive::Loss, scalar(value), {pred},
      [tgt, r, active](Tape &t, int self) {
        if (!active)
          return;
        // dL/dr = 20/(100·ln10·r); dr/dp_i = (p_i - y_i)/(N·r).
        auto p = t.value(t.inputs(self)[0]).data();
        auto y = tgt->data();
        auto gx = t.input_grad(self, 0);
        const double n = static_cast<double>(p.size());
        const double k =
            t.grad(self)[0] * 20.0 / (100.0 * std::numbers::ln10 * r * r * n);
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += static_cast<Real>(k * (static_cast<double>(p[i]) - y[i]));
      });
}

Var cosine_loss(Var pred, const Tensor &target) {
  const CosineParts c = cosine_parts(pred.value(), target);
  const double np = std::sqrt(c.pp);
  const double nt = std::sqrt(c.tt);
  const double denom = np * nt + kCosineEps;
  const Tensor *tgt = &target;
  return pred.tape->push(
      Primitive::Loss, scalar(1.0 - c.dot / denom), {pred},
      [tgt, c, np, nt, denom](Tape &t, int self) {
        // d/dp [dot/D] = y/D - dot·nt·p/(np·D²)
        auto p = t.value(t.inputs(self)[0]).data();
        auto y = tgt->data();
        auto gx = t.input_grad(self, 0);
        const double g = t.grad(self)[0];
        const double radial = np > 0 ? c.dot * nt / (np * denom * denom) : 0.0;
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += static_cast<Real>(
              -g * (y[i] / denom - radial * static_cast<double>(p[i])));
      });
}

Var outlier_loss(Var pred, const Tensor &target) {
  auto w = std::make_shared<std::vector<Real>>(
      outlier_weights(pred.value(), target));
  auto p = pred.value().data();
  auto y = target.data();
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    s += (*w)[i] * std::abs(static_cast<double>(p[i]) - y[i]);
  const Tensor *tgt = &target;
  return pred.tape->push(
      Primitive::Loss, scalar(s / static_cast<double>(p.size())), {pred},
      [tgt, w](Tape &t, int self) {
        auto p = t.value(t.inputs(self)[0]).data();
        auto y = tgt->data();
        auto gx = t.input_grad(self, 0);
        const double k = t.grad(self)[0] / static_cast<double>(p.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const double d = static_cast<double>(p[i]) - y[i];
          const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
          gx[i] += static_cast<Real>(k * (*w)[i] * sign);
        }
      });
}

Var total_loss(Var pred, const Tensor &target, const LossWeights &w,
               const PsnrConfig &cfg) {
  w.validate();
  const std::array<Var, 3> terms{psnr_loss(pred, target, cfg),
                                 cosine_loss(pred, target),
                                 outlier_loss(pred, target)};
  const std::array<Real, 3> coeffs{w.alpha, w.beta, w.gamma};
  return combine(terms, coeffs);
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double s = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    g[i] = std::exp(-x * x / (2 * 1.5 * 1.5));
    s += g[i];
  }
  for (double &v : g)
    v /= s;
  return g;
}

// Separable valid-mode Gaussian filter of an H×W plane.
std::vector<double> filter_valid(const std::vector<double> &in, int h, int w,
                                 const std::array<double, kWindow> &g) {
  const int oh = h - kWindow + 1;
  const int ow = w - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kWindow; ++k)
        s += g[k] * in[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kWindow; ++k)
        s += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

} // namespace

double ssim(const Tensor &pred, const Tensor &target, Real max_value) {
  require_same_shape(pred.shape(), target.shape(), "ssim");
  const Shape &s = pred.shape();
  if (s.h < kWindow || s.w < kWindow)
    throw ShapeError("ssim: image " + std::to_string(s.h) + "x" +
                     std::to_string(s.w) + " is smaller than the 11x11 window");
  const double c1 = std::pow(0.01 * max_value, 2);
  const double c2 = std::pow(0.03 * max_value, 2);
  const auto g = gaussian_window();
  const std::size_t plane = s.plane();
  double total = 0;
  int planes = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Real *x = pred.plane(n, c);
      const Real *y = target.plane(n, c);
      std::vector<double> xs(x, x + plane), ys(y, y + plane), xx(plane),
          yy(plane), xy(plane);
      for (std::size_t i = 0; i < plane; ++i) {
        xx[i] = xs[i] * xs[i];
        yy[i] = ys[i] * ys[i];
        xy[i] = xs[i] * ys[i];
      }
      const auto mx = filter_valid(xs, s.h, s.w, g);
      const auto my = filter_valid(ys, s.h, s.w, g);
      const auto sxx = filter_valid(xx, s.h, s.w, g);
      const auto syy = filter_valid(yy, s.h, s.w, g);
      const auto sxy = filter_valid(xy, s.h, s.w, g);
      double acc = 0;
      for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += acc / static_cast<double>(mx.size());
      ++planes;
    }
  }
  return total / planes;
}

QATIE_END_NAMESPACE
