// SPDX-License-Identifier: Apache-2.0
#include "qatie/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>

#include "qatie/losses.hpp"
#include "qatie/model.hpp"

namespace qatie {

#ifndef QATIE_REAL_DOUBLE
void GradcheckOptions::validate() const {
  if (width < 1 || width > 8)
    throw DataError("gradcheck: width must lie in [1, 8], got " +
                    std::to_string(width));
  if (size < 8 || size > 32 || size % 8 != 0)
    throw DataError("gradcheck: size must be 8, 16, 24 or 32, got " +
                    std::to_string(size));
  if (!(step > 0))
    throw DataError("gradcheck: step must be positive");
  if (!(min_step > 0) || min_step > step)
    throw DataError("gradcheck: min_step must lie in (0, step]");
  if (max_per_group < 0)
    throw DataError("gradcheck: max_per_group must be >= 0");
}
#endif

} // namespace qatie

QATIE_BEGIN_NAMESPACE

namespace {

// Conv biases feeding an instance norm have an exactly zero gradient; the
// floor keeps their round-off from reading as a relative error.
constexpr double kNormFloor = 1e-6;

struct Problem {
  Network net;
  Tensor input;
  Tensor target;
  // The outlier term's weights are constants in backward, so it is left out.
  LossWeights weights{2, 1, 0};
};

// Which side of each LeakyReLU / clip kink every activation sits on.
std::vector<std::uint8_t> kink_pattern(const Tape &tape) {
  std::vector<std::uint8_t> out;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto node = static_cast<int>(id);
    const Primitive prim = tape.primitive(node);
    if (prim != Primitive::LeakyRelu && prim != Primitive::Clip01)
      continue;
    for (Real v : tape.value(tape.inputs(node)[0]).data())
      out.push_back(v < 0 ? 0 : (prim == Primitive::Clip01 && v > 1 ? 2 : 1));
  }
  return out;
}

struct Probe {
  double loss = 0;
  std::vector<std::uint8_t> pattern;
};

Probe probe(Problem &p) {
  Tape tape(false);
  Var y = network_forward(tape, p.net, tape.constant_ref(p.input));
  const double loss =
      static_cast<double>(total_loss(y, p.target, p.weights).value()[0]);
  return {loss, kink_pattern(tape)};
}

GradcheckResult check(const GradcheckOptions &opts, const char *precision) {
  opts.validate();
  ModelConfig config;
  config.base_width = opts.width;
  Problem p{init_network(config, opts.seed), Tensor({1, 3, opts.size, opts.size}),
            Tensor({1, 3, opts.size, opts.size})};
  std::mt19937_64 rng(opts.seed + 1);
  std::uniform_real_distribution<double> in_dist(0.2, 0.8), tgt_dist(0.0, 1.0);
  for (Real &v : p.input.data())
    v = static_cast<Real>(in_dist(rng));
  for (Real &v : p.target.data())
    v = static_cast<Real>(tgt_dist(rng));
  // A nonzero head keeps every upstream group on the gradient path.
  for (Real &v : p.net.head.weight.data())
    v = static_cast<Real>(std::uniform_real_distribution<double>(-0.1, 0.1)(rng));

  p.net.zero_grad();
  {
    Tape tape;
    if (opts.corrupt_adjoint)
      tape.corrupt_adjoint(Primitive::Conv2d, Real(1.5));
    Var y = network_forward(tape, p.net, tape.leaf(p.input));
    tape.backward(total_loss(y, p.target, p.weights));
  }

  const std::vector<std::uint8_t> base = probe(p).pattern;
  GradcheckResult result;
  result.precision = precision;
  p.net.visit([&](const std::string &name, Tensor &t) {
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i)
      idx[i] = i;
    if (opts.max_per_group > 0 &&
        idx.size() > static_cast<std::size_t>(opts.max_per_group)) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opts.max_per_group));
    }
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    double diff = 0, na = 0, nn = 0;
    std::size_t used = 0;
    for (std::size_t i : idx) {
      const Real saved = t[i];
      // A step that moves any activation across a kink measures a secant of
      // a piecewise function, not the derivative; shrink it until it doesn't.
      double h = opts.step;
      std::optional<double> numeric;
      while (h >= opts.min_step) {
        t[i] = static_cast<Real>(saved + h);
        const Probe up = probe(p);
        t[i] = static_cast<Real>(saved - h);
        const Probe down = probe(p);
        t[i] = saved;
        if (up.pattern == base && down.pattern == base) {
          numeric = (up.loss - down.loss) / (2 * h);
          break;
        }
        h /= 10;
      }
      if (!numeric) {
        ++result.excluded;
        continue;
      }
      if (h < opts.step)
        ++result.refined;
      ++used;
      const double a = analytic.empty() ? 0.0 : analytic[i];
      diff += (a - *numeric) * (a - *numeric);
      na += a * a;
      nn += *numeric * *numeric;
    }
    const double rel =
        std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), kNormFloor});
    result.groups.push_back({name, used, rel, std::sqrt(na)});
    result.checked += used;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_group = name;
    }
  });
  p.net.zero_grad();
  result.passed = result.max_rel_error < opts.tolerance;
  return result;
}

} // namespace

QATIE_END_NAMESPACE

namespace qatie {
#ifdef QATIE_REAL_DOUBLE
GradcheckResult run_gradcheck_f64(const GradcheckOptions &opts) {
  return f64::check(opts, "f64");
}
#else
GradcheckResult run_gradcheck_f32(const GradcheckOptions &opts) {
  return f32::check(opts, "f32");
}
#endif
} // namespace qatie
