// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.hpp
 * @brief  Full-precision training, QAT fine-tuning, PTQ calibration and
 *         evaluation.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qatie/data.hpp"
#include "qatie/int8_graph.hpp"
#include "qatie/losses.hpp"
#include "qatie/model.hpp"
#include "qatie/qat.hpp"

QATIE_BEGIN_NAMESPACE

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  int grad_accum_steps = 2;
  Real base_lr = Real(1e-4);
  int warmup_epochs = 5;
  Real warmup_start_lr = Real(1e-5);
  Real min_lr = Real(1e-6);
  Real clip_lo = -1;
  Real clip_hi = 1;
  LossWeights loss_weights;
  std::uint64_t seed = 1;

  /// Throws DataError naming the first offending field.
  void validate() const;

  /// 50 epochs, batch 64 × 2 accumulation steps, lr 1e-4 after a 5-epoch
  /// warmup from 1e-5.
  static TrainConfig paper();
  /// c=8 overfit run: 16 pairs at batch 8 for 250 epochs (500 steps).
  static TrainConfig desk();
};

/// Optimizer steps per epoch: floor(N / (batch · accum)), at least 1.
int steps_per_epoch(std::size_t samples, const TrainConfig &cfg);

/**
 * Linear warmup from warmup_start_lr (step 0) to base_lr (first post-warmup
 * step), then cosine decay reaching min_lr at the last step.
 */
Real lr_at(int step, int steps_per_epoch, const TrainConfig &cfg);

/// Element-wise clamp to [lo, hi].
void grad_clip(std::span<Real> grads, Real lo, Real hi);
void grad_clip(std::span<Tensor *const> params, Real lo, Real hi);

struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update from each parameter's gradient (absent = 0).
void adam_step(std::span<Tensor *const> params, AdamState &state, Real lr);

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double lr = 0;
  LossTerms loss; // means over the samples of the step
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double psnr = 0;
};

struct History {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// One JSON object per line: step, epoch, lr, loss components, psnr.
std::string to_json_line(const StepRecord &r);

using StepCallback = std::function<void(const StepRecord &)>;

/**
 * Trains in place. Each micro-batch loss is the mean of the per-sample total
 * losses; grad_accum_steps micro-batches are averaged before clipping and the
 * Adam step. Throws NumericError naming the step on a non-finite loss.
 */
History train(Network &net, std::span<const ImagePair> data,
              const TrainConfig &cfg, const StepCallback &on_step = {});

struct QatConfig {
  int steps = 200;
  Real lr = Real(1e-5);
  int batch_size = 8;
  Real clip_lo = -1;
  Real clip_hi = 1;
  LossWeights loss_weights;
  std::uint64_t seed = 1;
  double observer_momentum = 0.99;

  void validate() const;
};

/**
 * Instruments a copy of `net` with every quantization point, fine-tunes it
 * at a constant learning rate with observers updating, and returns it in
 * Frozen mode.
 */
QatNetwork qat_finetune(const Network &net, std::span<const ImagePair> data,
                        const QatConfig &cfg, History *history = nullptr,
                        const StepCallback &on_step = {});

/// Post-training calibration: observers see `data` once, then freeze.
QatNetwork calibrate_ptq(const Network &net, std::span<const ImagePair> data,
                         int batch_size = 8, double momentum = 0.99);

struct EvalResult {
  double psnr = 0;
  double ssim = 0;
  std::size_t count = 0;
};

/// Runs `model` on each low image (padded to a multiple of 8, then cropped)
/// and averages PSNR/SSIM against the targets. Empty data is rejected.
EvalResult evaluate(const std::function<Tensor(const Tensor &)> &model,
                    std::span<const ImagePair> data);
EvalResult eval_model(const Network &net, std::span<const ImagePair> data);
EvalResult eval_model(QatNetwork &net, std::span<const ImagePair> data);
EvalResult eval_model(const Int8Graph &graph, std::span<const ImagePair> data);

/// Pads to a multiple of 8, runs `model` and crops back.
Tensor run_padded(const std::function<Tensor(const Tensor &)> &model,
                  const Tensor &x);

QATIE_END_NAMESPACE
