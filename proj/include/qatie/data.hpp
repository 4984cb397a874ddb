// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Paired images, PNG I/O, patch extraction and the seeded synthetic
 *         degradation generator.
 */
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "qatie/tensor.hpp"

QATIE_BEGIN_NAMESPACE

/// Degraded input and target, both 1×3×H×W in [0, 1].
struct ImagePair {
  Tensor low;
  Tensor high;

  /// Throws DataError unless shapes match and every value lies in [0, 1].
  void validate() const;
};

struct SyntheticConfig {
  int count = 16;
  int size = 32;
  Real blur_sigma = Real(0.5);
  Real noise_sigma = Real(0.01);
  std::array<Real, 3> color_gain{Real(1.1), Real(0.95), Real(0.85)};
  /// low = high^(1 + gamma_shift) before the other degradations.
  Real gamma_shift = Real(0.2);
  std::uint64_t seed = 1;

  void validate() const;
  /// No degradation: low equals high.
  static SyntheticConfig identity(int count, int size, std::uint64_t seed);
};

/**
 * high: seeded procedural scene (gradients, shapes, texture) in [0.05, 0.95].
 * low: gamma shift, per-channel gain, Gaussian blur, Gaussian noise, clip.
 */
std::vector<ImagePair> synth_generate(const SyntheticConfig &cfg);

/// Separable Gaussian blur with reflected borders; sigma 0 copies.
Tensor gaussian_blur(const Tensor &x, Real sigma);

/// 8-bit RGB PNG -> 1×3×H×W tensor with values v/255.
Tensor load_png(const std::filesystem::path &path);
/// Writes round(v·255) clamped to [0, 255]; expects one 3-channel sample.
void save_png(const Tensor &image, const std::filesystem::path &path);

/**
 * Aligned crops on a stride grid. With a seed, the patch order is shuffled
 * deterministically.
 */
std::vector<ImagePair> extract_patches(const ImagePair &pair, int patch,
                                       int stride,
                                       std::optional<std::uint64_t> seed = {});

/**
 * Loads `dir/low/NAME.png` and `dir/high/NAME.png` for every NAME present in
 * `low`, sorted by name.
 */
std::vector<ImagePair> load_pair_dir(const std::filesystem::path &dir);

QATIE_END_NAMESPACE
