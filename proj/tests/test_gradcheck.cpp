// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "qatie/gradcheck.hpp"

using namespace qatie;

TEST_CASE("network gradcheck passes at c=4 on 16x16") {
  GradcheckOptions opts;
  const GradcheckResult r = run_gradcheck_f64(opts);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-3);
  CHECK(r.precision == "f64");
  CHECK(r.checked + r.excluded > 20000);
  // Nearly every entry yields a measurement; crossings that survive the
  // smallest step are rare.
  CHECK(r.excluded * 100 < r.checked);
  CHECK_FALSE(r.worst_group.empty());
}

TEST_CASE("a corrupted conv adjoint fails the check") {
  GradcheckOptions opts;
  opts.max_per_group = 6;
  opts.corrupt_adjoint = true;
  const GradcheckResult r = run_gradcheck_f64(opts);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error > 0.1);
}

TEST_CASE("tighter step meets the 64-bit tolerance on sampled entries") {
  GradcheckOptions opts;
  opts.step = 1e-4;
  opts.max_per_group = 12;
  opts.tolerance = 1e-6;
  const GradcheckResult r = run_gradcheck_f64(opts);
  // Conv biases feeding an instance norm have a zero gradient; their entry is
  // pure round-off and says nothing about the adjoints.
  for (const GroupError &g : r.groups) {
    INFO(g.name);
    if (g.analytic_norm > 1e-8)
      CHECK(g.rel_error < 1e-6);
    else
      CHECK(g.analytic_norm < 1e-12);
  }
}

TEST_CASE("guard rails") {
  GradcheckOptions opts;
  opts.width = 9;
  CHECK_THROWS_AS(run_gradcheck_f64(opts), DataError);
  opts.width = 4;
  opts.size = 40;
  CHECK_THROWS_AS(run_gradcheck_f32(opts), DataError);
  opts.size = 12;
  CHECK_THROWS_AS(run_gradcheck_f64(opts), DataError);
}
