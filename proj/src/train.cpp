// SPDX-License-Identifier: Apache-2.0
#include "qatie/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

QATIE_BEGIN_NAMESPACE

void TrainConfig::validate() const {
  auto fail = [](const std::string &field, const std::string &why) {
    throw DataError("train config: " + field + " " + why);
  };
  if (epochs < 0)
    fail("epochs", "must be >= 0");
  if (batch_size < 1)
    fail("batch_size", "must be >= 1");
  if (grad_accum_steps < 1)
    fail("grad_accum_steps", "must be >= 1");
  if (!(base_lr > 0))
    fail("base_lr", "must be positive");
  if (!(warmup_start_lr > 0))
    fail("warmup_start_lr", "must be positive");
  if (!(min_lr > 0))
    fail("min_lr", "must be positive");
  if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs > epochs))
    fail("warmup_epochs", "must lie in [0, epochs]");
  if (!(clip_lo < clip_hi))
    fail("clip_range", "needs lo < hi");
  loss_weights.validate();
}

TrainConfig TrainConfig::paper() { return {}; }

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.epochs = 250;
  cfg.batch_size = 8;
  cfg.grad_accum_steps = 1;
  cfg.base_lr = Real(2e-3);
  cfg.warmup_epochs = 5;
  cfg.warmup_start_lr = cfg.base_lr / 10;
  cfg.min_lr = cfg.base_lr / 100;
  return cfg;
}

int steps_per_epoch(std::size_t samples, const TrainConfig &cfg) {
  const std::size_t per_step =
      static_cast<std::size_t>(cfg.batch_size) * cfg.grad_accum_steps;
  return std::max<int>(1, static_cast<int>(samples / per_step));
}

Real lr_at(int step, int steps_per_epoch, const TrainConfig &cfg) {
  if (step < 0)
    throw DataError("lr_at: negative step");
  const long warm = static_cast<long>(cfg.warmup_epochs) * steps_per_epoch;
  const long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
  const double base = cfg.base_lr;
  if (step < warm) {
    const double start = cfg.warmup_start_lr;
    return static_cast<Real>(start + (base - start) * step / static_cast<double>(warm));
  }
  const long span = total - 1 - warm;
  if (span <= 0)
    return cfg.base_lr;
  const double t = std::min(1.0, static_cast<double>(step - warm) / span);
  const double lo = cfg.min_lr;
  return static_cast<Real>(lo + (base - lo) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
}

void grad_clip(std::span<Real> grads, Real lo, Real hi) {
  if (!(lo < hi))
    throw DataError("grad_clip: needs lo < hi");
  for (Real &g : grads)
    g = std::clamp(g, lo, hi);
}

void grad_clip(std::span<Tensor *const> params, Real lo, Real hi) {
  for (Tensor *p : params)
    if (p->has_grad())
      grad_clip(p->grad(), lo, hi);
}

void adam_step(std::span<Tensor *const> params, AdamState &state, Real lr) {
  if (state.m.empty()) {
    for (Tensor *p : params) {
      state.m.emplace_back(p->numel(), Real(0));
      state.v.emplace_back(p->numel(), Real(0));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: optimizer state built for other parameters");
  ++state.step;
  const double c1 = 1 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor &p = *params[k];
    auto &m = state.m[k];
    auto &v = state.v[k];
    if (m.size() != p.numel())
      throw ShapeError("adam_step: moment buffer shape mismatch");
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m[i] = static_cast<Real>(state.beta1 * m[i] + (1 - state.beta1) * gi);
      v[i] = static_cast<Real>(state.beta2 * v[i] + (1 - state.beta2) * gi * gi);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<Real>(w[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

std::string to_json_line(const StepRecord &r) {
  nlohmann::json j{{"step", r.step},
                   {"epoch", r.epoch},
                   {"lr", r.lr},
                   {"loss", r.loss.total},
                   {"psnr_loss", r.loss.psnr_loss},
                   {"cosine", r.loss.cosine},
                   {"outlier", r.loss.outlier},
                   {"psnr", r.loss.psnr}};
  return j.dump();
}

namespace {

struct Loop {
  int total_steps = 0;
  int batch_size = 1;
  int accum = 1;
  Real clip_lo = -1;
  Real clip_hi = 1;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::function<Real(int)> lr;
  std::function<Var(Tape &, Var)> forward;
  std::vector<Tensor *> params;
};

History run_loop(const Loop &loop, std::span<const ImagePair> data,
                 const StepCallback &on_step) {
  History history;
  if (loop.total_steps == 0)
    return history;
  if (data.empty())
    throw DataError("training data is empty");
  for (const ImagePair &p : data) {
    p.validate();
    require_multiple_of_8(p.low.shape());
  }
  const std::size_t per_step = static_cast<std::size_t>(loop.batch_size) * loop.accum;
  // Small datasets use every sample each step.
  const std::size_t batch = std::min<std::size_t>(loop.batch_size, data.size());
  const std::size_t step_samples = std::min(per_step, data.size() / batch * batch);
  const int spe = std::max<int>(1, static_cast<int>(data.size() / step_samples));

  std::mt19937_64 rng(loop.seed);
  std::vector<std::size_t> order(data.size());
  AdamState adam;
  EpochRecord epoch_acc;
  int epoch_steps = 0;

  for (int step = 0; step < loop.total_steps; ++step) {
    const int epoch = step / spe;
    const int slot = step % spe;
    if (slot == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (Tensor *p : loop.params)
      p->zero_grad();

    StepRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.lr = loop.lr(step);
    const std::size_t micro_count = step_samples / batch;
    for (std::size_t mb = 0; mb < micro_count; ++mb) {
      std::vector<Tensor> lows;
      std::vector<const Tensor *> highs;
      for (std::size_t i = 0; i < batch; ++i) {
        const ImagePair &pair =
            data[order[slot * step_samples + mb * batch + i]];
        lows.push_back(pair.low);
        highs.push_back(&pair.high);
      }
      Tape tape;
      Var pred = loop.forward(tape, tape.leaf(stack_batch(lows)));
      std::vector<Var> terms;
      std::vector<Real> coeffs;
      const Real share = Real(1) / static_cast<Real>(step_samples);
      for (std::size_t i = 0; i < batch; ++i) {
        Var pi = slice_batch(pred, static_cast<int>(i), 1);
        terms.push_back(total_loss(pi, *highs[i], loop.weights));
        coeffs.push_back(share);
        const LossTerms lt = loss_terms(pi.value(), *highs[i], loop.weights);
        rec.loss.psnr_loss += lt.psnr_loss * share;
        rec.loss.cosine += lt.cosine * share;
        rec.loss.outlier += lt.outlier * share;
        rec.loss.total += lt.total * share;
        rec.loss.psnr += lt.psnr * share;
      }
      Var loss = combine(terms, coeffs);
      if (!std::isfinite(loss.value()[0]))
        throw NumericError("non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
    }
    grad_clip(loop.params, loop.clip_lo, loop.clip_hi);
    adam_step(loop.params, adam, static_cast<Real>(rec.lr));

    history.steps.push_back(rec);
    if (on_step)
      on_step(rec);
    epoch_acc.loss += rec.loss.total;
    epoch_acc.psnr += rec.loss.psnr;
    ++epoch_steps;
    if (slot == spe - 1 || step == loop.total_steps - 1) {
      epoch_acc.epoch = epoch;
      epoch_acc.loss /= epoch_steps;
      epoch_acc.psnr /= epoch_steps;
      history.epochs.push_back(epoch_acc);
      epoch_acc = {};
      epoch_steps = 0;
    }
  }
  for (Tensor *p : loop.params)
    p->drop_grad();
  return history;
}

} // namespace

History train(Network &net, std::span<const ImagePair> data,
              const TrainConfig &cfg, const StepCallback &on_step) {
  cfg.validate();
  if (cfg.epochs == 0)
    return {};
  if (data.empty())
    throw DataError("training data is empty");
  const int spe = steps_per_epoch(data.size(), cfg);
  Loop loop;
  loop.total_steps = cfg.epochs * spe;
  loop.batch_size = cfg.batch_size;
  loop.accum = cfg.grad_accum_steps;
  loop.clip_lo = cfg.clip_lo;
  loop.clip_hi = cfg.clip_hi;
  loop.weights = cfg.loss_weights;
  loop.seed = cfg.seed;
  loop.lr = [&cfg, spe](int step) { return lr_at(step, spe, cfg); };
  loop.forward = [&net](Tape &tape, Var x) {
    return network_forward(tape, net, x);
  };
  loop.params = net.parameters();
  return run_loop(loop, data, on_step);
}

void QatConfig::validate() const {
  if (steps < 0)
    throw DataError("qat config: steps must be >= 0");
  if (!(lr >= 0))
    throw DataError("qat config: lr must be non-negative");
  if (batch_size < 1)
    throw DataError("qat config: batch_size must be >= 1");
  if (!(clip_lo < clip_hi))
    throw DataError("qat config: clip_range needs lo < hi");
  if (!(observer_momentum >= 0 && observer_momentum < 1))
    throw DataError("qat config: observer_momentum must lie in [0, 1)");
  loss_weights.validate();
}

QatNetwork qat_finetune(const Network &net, std::span<const ImagePair> data,
                        const QatConfig &cfg, History *history,
                        const StepCallback &on_step) {
  cfg.validate();
  QatNetwork qnet(net, QatPlan::full(net.config), cfg.observer_momentum);
  qnet.set_mode(QatMode::Train);
  Loop loop;
  loop.total_steps = cfg.steps;
  loop.batch_size = cfg.batch_size;
  loop.clip_lo = cfg.clip_lo;
  loop.clip_hi = cfg.clip_hi;
  loop.weights = cfg.loss_weights;
  loop.seed = cfg.seed;
  loop.lr = [&cfg](int) { return cfg.lr; };
  loop.forward = [&qnet](Tape &tape, Var x) { return qnet.forward(tape, x); };
  loop.params = qnet.network().parameters();
  History h = run_loop(loop, data, on_step);
  if (history)
    *history = std::move(h);
  qnet.set_mode(QatMode::Frozen);
  return qnet;
}

QatNetwork calibrate_ptq(const Network &net, std::span<const ImagePair> data,
                         int batch_size, double momentum) {
  if (data.empty())
    throw DataError("PTQ calibration needs calibration data");
  if (batch_size < 1)
    throw DataError("calibration batch_size must be >= 1");
  QatNetwork qnet(net, QatPlan::full(net.config), momentum);
  qnet.set_mode(QatMode::Calibrate);
  for (std::size_t first = 0; first < data.size();
       first += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(data.size(), first + static_cast<std::size_t>(batch_size));
    std::vector<Tensor> lows;
    for (std::size_t i = first; i < end; ++i)
      lows.push_back(data[i].low);
    run_padded([&qnet](const Tensor &x) { return qnet.infer(x); },
               stack_batch(lows));
  }
  qnet.set_mode(QatMode::Frozen);
  return qnet;
}

Tensor run_padded(const std::function<Tensor(const Tensor &)> &model,
                  const Tensor &x) {
  const Shape &s = x.shape();
  if (s.h < 8 || s.w < 8)
    throw DataError("image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                    " is smaller than 8 pixels on a side");
  auto [padded, record] = pad_to_multiple(x, 8);
  return crop(model(padded), record);
}

EvalResult evaluate(const std::function<Tensor(const Tensor &)> &model,
                    std::span<const ImagePair> data) {
  if (data.empty())
    throw DataError("evaluation data is empty");
  EvalResult r;
  for (const ImagePair &pair : data) {
    pair.validate();
    const Tensor out = run_padded(model, pair.low);
    r.psnr += psnr(out, pair.high);
    r.ssim += ssim(out, pair.high);
  }
  r.count = data.size();
  r.psnr /= static_cast<double>(r.count);
  r.ssim /= static_cast<double>(r.count);
  return r;
}

EvalResult eval_model(const Network &net, std::span<const ImagePair> data) {
  return evaluate([&net](const Tensor &x) { return network_infer(net, x); },
                  data);
}

EvalResult eval_model(QatNetwork &net, std::span<const ImagePair> data) {
  const QatMode saved = net.mode();
  if (saved == QatMode::Train || saved == QatMode::Calibrate)
    net.set_mode(QatMode::Frozen);
  EvalResult r =
      evaluate([&net](const Tensor &x) { return net.infer(x); }, data);
  net.set_mode(saved);
  return r;
}

EvalResult eval_model(const Int8Graph &graph, std::span<const ImagePair> data) {
  return evaluate([&graph](const Tensor &x) { return graph.run(x); }, data);
}

QATIE_END_NAMESPACE
