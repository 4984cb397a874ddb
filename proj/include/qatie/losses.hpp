// SPDX-License-Identifier: Apache-2.0
/**
 * @file   losses.hpp
 * @brief  Training objective (PSNR, cosine and outlier-aware terms) and the
 *         PSNR/SSIM evaluation metrics.
 */
#pragma once

#include "qatie/tape.hpp"
#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

struct LossWeights {
  Real alpha = 2; // PSNR term
  Real beta = 1;  // cosine term
  Real gamma = 1; // outlier-aware term

  void validate() const;
};

struct PsnrConfig {
  Real max_value = 1;
  Real rmse_floor = Real(1e-8);
};

inline constexpr double kCosineEps = 1e-12;

// Plain evaluations.

double rmse(const Tensor &pred, const Tensor &target);
/// 20·log10(MAX / max(rmse, floor)).
double psnr(const Tensor &pred, const Tensor &target, const PsnrConfig &cfg = {});
double psnr_from_rmse(double rmse, const PsnrConfig &cfg = {});
double psnr_loss_value(const Tensor &pred, const Tensor &target,
                       const PsnrConfig &cfg = {});
double cosine_loss_value(const Tensor &pred, const Tensor &target);
double outlier_loss_value(const Tensor &pred, const Tensor &target);

/**
 * Per-element weights w = exp(-max(0, (e - μ)/(σ + 1e-8))) for e = |pred -
 * target| with μ, σ the mean and population deviation of e.
 */
std::vector<Real> outlier_weights(const Tensor &pred, const Tensor &target);

struct LossTerms {
  double psnr_loss = 0;
  double cosine = 0;
  double outlier = 0;
  double total = 0;
  double psnr = 0;
};

LossTerms loss_terms(const Tensor &pred, const Tensor &target,
                     const LossWeights &w, const PsnrConfig &cfg = {});

// Tape ops; `target` is treated as a constant.

Var rmse(Var pred, const Tensor &target);
/// (50 - PSNR)/100; zero gradient once rmse sits at the floor.
Var psnr_loss(Var pred, const Tensor &target, const PsnrConfig &cfg = {});
/// 1 - <pred, target>/(‖pred‖‖target‖ + eps) over all elements.
Var cosine_loss(Var pred, const Tensor &target);
/// mean(w ⊙ |pred - target|) with the weights held constant in backward.
Var outlier_loss(Var pred, const Tensor &target);
Var total_loss(Var pred, const Tensor &target, const LossWeights &w,
               const PsnrConfig &cfg = {});

/**
 * Mean SSIM with an 11×11 Gaussian window (σ = 1.5), valid windows only,
 * C1 = (0.01·MAX)², C2 = (0.03·MAX)², averaged over samples and channels.
 */
double ssim(const Tensor &pred, const Tensor &target, Real max_value = 1);

QATIE_END_NAMESPACE
