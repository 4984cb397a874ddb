// SPDX-License-Identifier: Apache-2.0
// Integer graph vs fake-quant simulation on seeded random networks. Included
// once per numeric lane.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <random>

#include "qatie/train.hpp"

namespace {

struct EquivalenceStats {
  int worst = 0;     ///< largest gap in output steps over all networks
  int over_one = 0;  ///< networks with a gap above one step
};

inline EquivalenceStats probe_equivalence(int nets, std::uint64_t seed) {
  using namespace qatie;
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape s) {
    std::uniform_real_distribution<double> d(0, 1);
    Tensor t(s);
    for (Real &v : t.data())
      v = static_cast<Real>(d(rng));
    return t;
  };
  EquivalenceStats stats;
  for (int i = 0; i < nets; ++i) {
    ModelConfig mc;
    mc.base_width = 1 + i % 8;
    const Network net = init_network(mc, seed * 1000 + static_cast<std::uint64_t>(i));
    std::vector<ImagePair> calib;
    for (int k = 0; k < 4; ++k) {
      Tensor t = uniform({1, 3, 32, 32});
      calib.push_back({t, t});
    }
    QatNetwork q = calibrate_ptq(net, calib, 2);
    const Int8Graph g = convert_int8(q);
    const Tensor x = uniform({2, 3, 32, 32});
    const U8Tensor ints = g.run_quantized(x);
    const U8Tensor sim = quantize_u8(q.infer(x), output_qparams());
    int worst = 0;
    for (std::size_t k = 0; k < ints.numel(); ++k)
      worst = std::max(worst, std::abs(int(ints.data[k]) - int(sim.data[k])));
    stats.worst = std::max(stats.worst, worst);
    stats.over_one += worst > 1;
  }
  return stats;
}

} // namespace
