// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "qatie/qat.hpp"
#include "qatie/quant.hpp"

using namespace qatie;

namespace {

Tensor uniform(Shape s, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (Real &v : t.data())
    v = static_cast<Real>(d(rng));
  return t;
}

// Round-half-away-from-zero of x/scale + zp, computed without the library.
std::int64_t raw_code(Real x, Real scale, std::int32_t zp) {
  const double r = double(x) / double(scale);
  const double a = std::floor(std::abs(r) + 0.5);
  return static_cast<std::int64_t>(r < 0 ? -a : a) + zp;
}

} // namespace

TEST_CASE("observer recurrence") {
  Observer obs;
  obs.momentum = 0.9;
  obs.update(-1, 2);
  CHECK(obs.initialized);
  CHECK(obs.running_min == -1);
  CHECK(obs.running_max == 2);

  Observer o2;
  o2.momentum = 0.9;
  o2.update(0, 1);
  o2.update(0, 2);
  CHECK(o2.running_min == 0);
  CHECK(o2.running_max == doctest::Approx(1.1).epsilon(1e-12));

  Observer o3;
  o3.momentum = 0.99;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(-3, 3);
  double lo = 0, hi = 0;
  for (int i = 0; i < 200; ++i) {
    double a = d(rng), b = d(rng);
    if (a > b)
      std::swap(a, b);
    if (i == 0) {
      lo = a;
      hi = b;
    } else {
      lo = 0.99 * lo + (1 - 0.99) * a;
      hi = 0.99 * hi + (1 - 0.99) * b;
    }
    o3.update(a, b);
    REQUIRE(o3.running_min == lo);
    REQUIRE(o3.running_max == hi);
    REQUIRE(o3.running_min <= o3.running_max);
  }

  Observer o4;
  for (int i = 0; i < 3000; ++i)
    o4.update(-0.25, 0.75);
  CHECK(o4.running_min == doctest::Approx(-0.25).epsilon(1e-12));
  CHECK(o4.running_max == doctest::Approx(0.75).epsilon(1e-12));

  Observer o5;
  o5.update(Tensor({1, 1, 1, 3}, std::vector<Real>{0.5f, -2, 4}));
  CHECK(o5.running_min == -2);
  CHECK(o5.running_max == 4);
}

TEST_CASE("qparams from min/max") {
  QuantParams s = qparams_from_minmax(-0.5, 1.0, true, true);
  CHECK(s.scale[0] == doctest::Approx(1.0 / 127).epsilon(1e-7));
  CHECK(s.zero_point[0] == 0);
  CHECK(s.qmin == -127);
  CHECK(s.qmax == 127);

  QuantParams a = qparams_from_minmax(0, 1, false, false);
  CHECK(a.scale[0] == doctest::Approx(1.0 / 255).epsilon(1e-7));
  CHECK(a.zero_point[0] == 0);

  QuantParams b = qparams_from_minmax(-1, 1, false, false);
  CHECK(b.scale[0] == doctest::Approx(2.0 / 255).epsilon(1e-7));
  CHECK(b.zero_point[0] == 128);

  // The range is widened to include zero.
  QuantParams c = qparams_from_minmax(0.5, 1, false, false);
  CHECK(c.zero_point[0] == 0);
  CHECK(c.scale[0] == doctest::Approx(1.0 / 255).epsilon(1e-7));
  QuantParams n = qparams_from_minmax(-2, -1, false, false);
  CHECK(n.zero_point[0] == 255);

  QuantParams z = qparams_from_minmax(0, 0, false, false);
  CHECK(z.scale[0] > 0);
  CHECK(z.scale[0] == doctest::Approx(1e-8).epsilon(1e-6));
  CHECK_NOTHROW(z.validate());
}

TEST_CASE("quantize and dequantize examples") {
  CHECK(quantize_value(0, 1, 0, -127, 127) == 0);
  CHECK(dequantize_value(0, 1, 0) == 0);
  const Real s = Real(1.0 / 255);
  CHECK(quantize_value(1, s, 0, 0, 255) == 255);
  CHECK(quantize_value(2, s, 0, 0, 255) == 255);
  CHECK(quantize_value(Real(0.34), Real(0.1), 0, 0, 255) == 3);
  CHECK(dequantize_value(3, Real(0.1), 0) == doctest::Approx(0.3).epsilon(1e-6));
  // Ties round away from zero.
  CHECK(quantize_unclamped(Real(2.5), 1, 0) == 3);
  CHECK(quantize_unclamped(Real(-2.5), 1, 0) == -3);
}

TEST_CASE("lattice round trip is exact") {
  QuantParams qp = qparams_from_minmax(-0.7, 1.3, false, false);
  for (std::int64_t q = qp.qmin; q <= qp.qmax; ++q) {
    const Real x = dequantize_value(q, qp.scale[0], qp.zero_point[0]);
    CHECK(quantize_value(x, qp.scale[0], qp.zero_point[0], qp.qmin, qp.qmax) == q);
  }
}

TEST_CASE("fake quant laws on 1e5 scalars") {
  const QuantParams qp = qparams_from_minmax(-0.8, 1.7, false, false);
  const Real s = qp.scale[0];
  const std::int32_t zp = qp.zero_point[0];
  Tensor x = uniform({1, 1, 100, 1000}, 7, -2, 3);
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var y = fake_quant(xv, qp);
  Tape t2(false);
  Var yy = fake_quant(t2.leaf(y.value()), qp);
  CHECK(yy.value().values() == y.value().values());

  const double lo = (qp.qmin - zp) * double(s), hi = (qp.qmax - zp) * double(s);
  std::size_t in_range = 0, worst_bound = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] >= lo && x[i] <= hi) {
      ++in_range;
      if (std::abs(double(y.value()[i]) - x[i]) > double(s) / 2 * (1 + 1e-6))
        ++worst_bound;
    }
  }
  CHECK(in_range > 40000);
  CHECK(worst_bound == 0);

  // Adjoint of sum(fq(x)) is the in-range mask.
  Var total = tape.push(Primitive::Loss, Tensor({1, 1, 1, 1}), {y},
                        [](Tape &t, int node) {
                          auto gx = t.input_grad(node, 0);
                          for (Real &g : gx)
                            g += t.grad(node)[0];
                        });
  tape.backward(total);
  std::size_t mismatches = 0, passed = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::int64_t raw = raw_code(x[i], s, zp);
    const Real expect = raw >= qp.qmin && raw <= qp.qmax ? Real(1) : Real(0);
    mismatches += tape.grad(xv.id)[i] != expect;
    passed += expect == 1;
  }
  CHECK(mismatches == 0);
  CHECK(passed > 0);
  CHECK(passed < x.numel());
}

TEST_CASE("per-channel weight quantization error") {
  Tensor w = uniform({6, 4, 3, 3}, 9, -0.4, 0.4);
  for (int i = 0; i < 36; ++i)
    w[5 * 36 + i] *= Real(0.01); // one narrow channel
  const QuantParams qp = weight_qparams(w);
  REQUIRE(qp.per_channel());
  CHECK(qp.channels() == 6);
  CHECK(qp.symmetric);
  I8Tensor q = quantize_i8(w, qp);
  Tensor back = dequantize(q);
  for (int oc = 0; oc < 6; ++oc) {
    const double s = qp.scale[oc];
    CHECK(qp.zero_point[oc] == 0);
    for (int i = 0; i < 36; ++i) {
      const std::size_t k = oc * 36 + i;
      CHECK(std::abs(double(back[k]) - w[k]) <= s / 2 * (1 + 1e-6));
      CHECK(std::abs(int(q.data[k])) <= 127);
    }
  }
  CHECK(qp.scale[5] < qp.scale[0] * 0.1);

  const QuantParams in = qparams_from_minmax(0, 2, false, false);
  const QuantParams bq = bias_qparams(in, qp);
  CHECK(bq.channels() == 6);
  for (int oc = 0; oc < 6; ++oc)
    CHECK(bq.scale[oc] == doctest::Approx(in.scale[0] * qp.scale[oc]).epsilon(1e-6));
}

TEST_CASE("requantization multiplier") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> e(-20, 3);
  for (int i = 0; i < 2000; ++i) {
    const double m = std::pow(2.0, e(rng));
    const RequantMultiplier rq = RequantMultiplier::from_real(m);
    REQUIRE(rq.m0 >= (1 << 30));
    REQUIRE(std::int64_t(rq.m0) < (std::int64_t{1} << 31));
    REQUIRE(std::abs(rq.value() - m) / m < std::ldexp(1.0, -29));
  }
  CHECK_THROWS(RequantMultiplier::from_real(0));
  CHECK_THROWS(RequantMultiplier::from_real(-1));
  // Multipliers >= 1 use a negative shift.
  CHECK(RequantMultiplier::from_real(3.0).shift < 0);
}

TEST_CASE("fixed-point multiply rounds half away from zero") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int64_t> acc(-(1 << 28), 1 << 28);
  std::uniform_real_distribution<double> e(-16, 2);
  for (int i = 0; i < 20000; ++i) {
    const RequantMultiplier rq = RequantMultiplier::from_real(std::pow(2.0, e(rng)));
    const std::int64_t a = acc(rng);
    // Exact product in 128 bits, then the rounding rule.
    const __int128 prod = static_cast<__int128>(a) * rq.m0;
    const int total = 31 + rq.shift;
    __int128 expect;
    if (total <= 0) {
      expect = prod << -total;
    } else {
      const __int128 mag = prod < 0 ? -prod : prod;
      const __int128 r = (mag + (__int128{1} << (total - 1))) >> total;
      expect = prod < 0 ? -r : r;
    }
    REQUIRE(fixedpoint_mul(a, rq) == static_cast<std::int64_t>(expect));
  }
  RequantMultiplier half{1 << 30, 0}; // 0.5
  CHECK(fixedpoint_mul(3, half) == 2);
  CHECK(fixedpoint_mul(-3, half) == -2);
  CHECK(fixedpoint_mul(5, RequantMultiplier{1 << 30, 40}) == 0);
}

TEST_CASE("instrumentation modes") {
  ModelConfig cfg;
  cfg.base_width = 4;
  Network net = init_network(cfg, 3);
  QatNetwork q = attach_fakequant(net, QatPlan::full(cfg));
  Tensor x = uniform({2, 3, 16, 16}, 12, 0, 1);
  const Tensor plain = network_infer(net, x);

  q.set_mode(QatMode::Disabled);
  CHECK(q.infer(x).values() == plain.values());

  q.set_mode(QatMode::Calibrate);
  CHECK(q.infer(x).values() == plain.values());
  for (const auto &[name, obs] : q.observers()) {
    INFO(name);
    CHECK(obs.initialized);
    CHECK(obs.running_min <= obs.running_max);
  }

  q.set_mode(QatMode::Frozen);
  const Tensor quant = q.infer(x);
  CHECK(quant.values() != plain.values());
  const auto before = q.observers().at("input").running_max;
  q.infer(uniform({1, 3, 16, 16}, 13, 0, 0.5));
  CHECK(q.observers().at("input").running_max == before);

  // Finer lattices approach the float network.
  auto gap = [&](int factor) {
    q.set_lattice_refinement(factor);
    const Tensor y = q.infer(x);
    double worst = 0;
    for (std::size_t i = 0; i < y.numel(); ++i)
      worst = std::max(worst, std::abs(double(y[i]) - plain[i]));
    return worst;
  };
  const double g1 = gap(1), g256 = gap(256);
  CHECK(g256 < g1 / 20);
  CHECK(g256 < 2e-3);
  q.set_lattice_refinement(1);

  QatPlan bad = QatPlan::full(cfg);
  bad.points.push_back("no.such.layer");
  CHECK_THROWS_AS(attach_fakequant(net, bad), Error);
  CHECK_THROWS(q.observer("no.such.layer"));
}

TEST_CASE("fixed tanh and output parameters") {
  const QuantParams t = tanh_qparams();
  CHECK(t.scale[0] == doctest::Approx(2.0 / 255).epsilon(1e-6));
  CHECK(t.zero_point[0] == 128);
  const QuantParams o = output_qparams();
  CHECK(o.scale[0] == doctest::Approx(1.0 / 255).epsilon(1e-6));
  CHECK(o.zero_point[0] == 0);
}
