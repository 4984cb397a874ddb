// SPDX-License-Identifier: Apache-2.0
/**
 * @file   qat.hpp
 * @brief  Fake-quant instrumentation of the network for calibration (PTQ) and
 *         quantization-aware fine-tuning (QAT).
 *
 * Weights are fake-quantized per output channel (symmetric INT8), biases to
 * INT32 at s_in·s_w, and activations per tensor (affine UINT8) from
 * moving-average observers. tanh outputs and the final image use fixed
 * [-1, 1] and [0, 1] parameters.
 */
#pragma once

#include <map>
#include <string>
#include <vector>

#include "qatie/model.hpp"
#include "qatie/quant.hpp"

QATIE_BEGIN_NAMESPACE

/// Activation insertion points to instrument.
struct QatPlan {
  std::vector<std::string> points;

  /// Every observer-driven point of the architecture.
  static QatPlan full(const ModelConfig &config);
};

enum class QatMode {
  Disabled,  ///< plain FP32 forward
  Calibrate, ///< observers update, values untouched
  Train,     ///< observers update, then fake-quant
  Frozen,    ///< fake-quant with fixed observer state
};

QuantParams tanh_qparams();
QuantParams output_qparams();

class QatNetwork : public QuantHooks {
public:
  QatNetwork(Network net, const QatPlan &plan, double momentum = 0.99);

  Network &network() { return net_; }
  const Network &network() const { return net_; }

  QatMode mode() const { return mode_; }
  void set_mode(QatMode mode) { mode_ = mode; }

  const std::map<std::string, Observer> &observers() const {
    return observers_;
  }
  std::map<std::string, Observer> &observers() { return observers_; }
  /// Throws naming `point` if it is not instrumented or has seen no data.
  const Observer &observer(const std::string &point) const;
  QuantParams activation_qparams(const std::string &point) const;

  /**
   * Test mode: divide every scale by `factor` and widen the integer ranges by
   * the same factor, approaching the float network as factor grows.
   */
  void set_lattice_refinement(int factor) { refine_ = factor; }

  Var forward(Tape &tape, Var x);
  /// Gradient-free forward in the current mode.
  Tensor infer(const Tensor &x);

  // QuantHooks
  QValue activation(const std::string &point, Var v) override;
  QValue fixed(FixedRange range, Var v) override;
  std::pair<Var, Var> conv_params(Var weight, Var bias,
                                  const std::optional<QuantParams> &input) override;

private:
  QuantParams refined(QuantParams qp) const;
  bool observing() const {
    return mode_ == QatMode::Calibrate || mode_ == QatMode::Train;
  }
  bool quantizing() const {
    return mode_ == QatMode::Train || mode_ == QatMode::Frozen;
  }

  Network net_;
  std::map<std::string, Observer> observers_;
  QatMode mode_ = QatMode::Train;
  int refine_ = 1;
};

/// Instruments a copy of `net`; rejects plan entries naming unknown layers.
QatNetwork attach_fakequant(Network net, const QatPlan &plan);

QATIE_END_NAMESPACE
