// SPDX-License-Identifier: Apache-2.0
#include "qatie/qat.hpp"

#include <algorithm>

QATIE_BEGIN_NAMESPACE

QatPlan QatPlan::full(const ModelConfig &config) {
  return {activation_points(config)};
}

QuantParams tanh_qparams() { return fixed_qparams(-1.0, 1.0); }
QuantParams output_qparams() { return fixed_qparams(0.0, 1.0); }

QatNetwork::QatNetwork(Network net, const QatPlan &plan, double momentum)
    : net_(std::move(net)) {
  const std::vector<std::string> known = activation_points(net_.config);
  for (const std::string &p : plan.points) {
    if (std::find(known.begin(), known.end(), p) == known.end())
      throw DataError("qat plan: unknown layer '" + p + "'");
    Observer obs;
    obs.momentum = momentum;
    observers_.emplace(p, obs);
  }
}

const Observer &QatNetwork::observer(const std::string &point) const {
  auto it = observers_.find(point);
  if (it == observers_.end())
    throw DataError("layer '" + point + "' has no activation observer");
  if (!it->second.initialized)
    throw DataError("observer for layer '" + point +
                    "' is uninitialized; run calibration or fine-tuning first");
  return it->second;
}

QuantParams QatNetwork::activation_qparams(const std::string &point) const {
  return observer(point).qparams(false, false);
}

QuantParams QatNetwork::refined(QuantParams qp) const {
  if (refine_ == 1)
    return qp;
  for (Real &s : qp.scale)
    s /= static_cast<Real>(refine_);
  for (std::int32_t &z : qp.zero_point)
    z *= refine_;
  qp.qmin *= refine_;
  qp.qmax *= refine_;
  return qp;
}

Var QatNetwork::forward(Tape &tape, Var x) {
  return network_forward(tape, net_, x, this);
}

Tensor QatNetwork::infer(const Tensor &x) {
  Tape tape(false);
  return forward(tape, tape.constant_ref(x)).value();
}

QValue QatNetwork::activation(const std::string &point, Var v) {
  auto it = observers_.find(point);
  if (it == observers_.end() || mode_ == QatMode::Disabled)
    return {v, std::nullopt};
  if (observing())
    it->second.update(v.value());
  if (!quantizing())
    return {v, std::nullopt};
  QuantParams qp = refined(it->second.qparams(false, false));
  return {fake_quant(v, qp), qp};
}

QValue QatNetwork::fixed(FixedRange range, Var v) {
  if (!quantizing())
    return {v, std::nullopt};
  QuantParams qp =
      refined(range == FixedRange::Tanh ? tanh_qparams() : output_qparams());
  return {fake_quant(v, qp), qp};
}

std::pair<Var, Var>
QatNetwork::conv_params(Var weight, Var bias,
                        const std::optional<QuantParams> &input) {
  if (!quantizing())
    return {weight, bias};
  const QuantParams wqp = refined(weight_qparams(weight.value()));
  Var w = fake_quant(weight, wqp);
  if (!input)
    return {w, bias};
  return {w, fake_quant(bias, bias_qparams(*input, wqp))};
}

QatNetwork attach_fakequant(Network net, const QatPlan &plan) {
  return QatNetwork(std::move(net), plan);
}

QATIE_END_NAMESPACE
