// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gradcheck.hpp
 * @brief  Central-difference check of the tape's parameter gradients.
 *
 * Options and results are precision independent; run_gradcheck_f64() runs
 * the float64 build of the library and run_gradcheck_f32() the default one.
 */
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qatie/common.hpp"

namespace qatie {

struct GradcheckOptions {
  int width = 4;
  int size = 16;
  double step = 1e-3;
  double tolerance = 1e-3;
  /// Entries whose ±step probe crosses a LeakyReLU or clip kink are retried
  /// with step/10, step/100, ... down to this floor, then excluded.
  double min_step = 1e-6;
  std::uint64_t seed = 7;
  /// Checked entries per parameter tensor; 0 checks every entry.
  int max_per_group = 0;
  /// Test hook: scale the conv adjoint so the check must fail.
  bool corrupt_adjoint = false;

  /// Guard rails: width in [1, 8], size a multiple of 8 in [8, 32].
  void validate() const;
};

struct GroupError {
  std::string name;
  std::size_t checked = 0;
  double rel_error = 0;
  /// L2 norm of the tape gradient over the checked entries.
  double analytic_norm = 0;
};

struct GradcheckResult {
  std::string precision;
  std::vector<GroupError> groups;
  double max_rel_error = 0;
  std::string worst_group;
  std::size_t checked = 0;
  /// Entries measured with a step below the requested one.
  std::size_t refined = 0;
  /// Entries that still crossed a kink at min_step.
  std::size_t excluded = 0;
  bool passed = false;
};

GradcheckResult run_gradcheck_f64(const GradcheckOptions &opts);
GradcheckResult run_gradcheck_f32(const GradcheckOptions &opts);

} // namespace qatie
