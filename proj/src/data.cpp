// SPDX-License-Identifier: Apache-2.0
#include "qatie/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

QATIE_BEGIN_NAMESPACE

void ImagePair::validate() const {
  if (low.shape() != high.shape())
    throw DataError("image pair: low " + low.shape().str() + " vs high " +
                    high.shape().str());
  if (low.shape().c != 3)
    throw DataError("image pair: expected 3 channels, got " +
                    std::to_string(low.shape().c));
  auto in_range = [](const Tensor &t) {
    return std::all_of(t.data().begin(), t.data().end(),
                       [](Real v) { return v >= 0 && v <= 1; });
  };
  if (!in_range(low) || !in_range(high))
    throw DataError("image pair: values outside [0, 1]");
}

void SyntheticConfig::validate() const {
  if (count < 1)
    throw DataError("synthetic: count must be positive");
  if (size < 8 || size % 8 != 0)
    throw DataError("synthetic: size must be a positive multiple of 8");
  if (blur_sigma < 0 || noise_sigma < 0)
    throw DataError("synthetic: sigmas must be non-negative");
  if (gamma_shift <= -1)
    throw DataError("synthetic: gamma_shift must exceed -1");
}

SyntheticConfig SyntheticConfig::identity(int count, int size,
                                          std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.count = count;
  cfg.size = size;
  cfg.blur_sigma = 0;
  cfg.noise_sigma = 0;
  cfg.color_gain = {1, 1, 1};
  cfg.gamma_shift = 0;
  cfg.seed = seed;
  return cfg;
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng &rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Tensor procedural_scene(int size, Rng &rng) {
  Tensor img({1, 3, size, size});
  std::array<std::array<double, 3>, 3> ramp{};
  for (auto &r : ramp)
    r = {uniform(rng, 0.2, 0.8), uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3)};

  struct Blob {
    bool disk;
    double cx, cy, rx, ry, alpha;
    std::array<double, 3> color;
  };
  std::vector<Blob> blobs(3);
  for (Blob &b : blobs) {
    b.disk = uniform(rng, 0, 1) < 0.5;
    b.cx = uniform(rng, 0, 1);
    b.cy = uniform(rng, 0, 1);
    b.rx = uniform(rng, 0.1, 0.35);
    b.ry = uniform(rng, 0.1, 0.35);
    b.alpha = uniform(rng, 0.6, 1.0);
    b.color = {uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)};
  }
  const double fx = uniform(rng, 1, 4);
  const double fy = uniform(rng, 1, 4);
  const double phase = uniform(rng, 0, 2 * std::numbers::pi);
  const double amp = uniform(rng, 0.02, 0.08);

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c)
        px[c] = ramp[c][0] + ramp[c][1] * (u - 0.5) + ramp[c][2] * (v - 0.5);
      for (const Blob &b : blobs) {
        const double dx = (u - b.cx) / b.rx;
        const double dy = (v - b.cy) / b.ry;
        const bool inside = b.disk ? dx * dx + dy * dy <= 1
                                   : std::abs(dx) <= 1 && std::abs(dy) <= 1;
        if (inside)
          for (int c = 0; c < 3; ++c)
            px[c] = (1 - b.alpha) * px[c] + b.alpha * b.color[c];
      }
      const double tex =
          amp * std::sin(2 * std::numbers::pi * (fx * u + fy * v) + phase);
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) = static_cast<Real>(
            0.05 + 0.9 * std::clamp(px[c] + tex, 0.0, 1.0));
    }
  }
  return img;
}

int reflect(int i, int n) {
  if (n == 1)
    return 0;
  while (i < 0 || i >= n)
    i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

} // namespace

Tensor gaussian_blur(const Tensor &x, Real sigma) {
  if (sigma < 0)
    throw DataError("gaussian_blur: negative sigma");
  if (sigma == 0)
    return x;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (static_cast<double>(sigma) * sigma));
    sum += k[i + radius];
  }
  for (double &v : k)
    v /= sum;

  const Shape &s = x.shape();
  Tensor out(s);
  std::vector<double> tmp(s.plane());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Real *src = x.plane(n, c);
      Real *dst = out.plane(n, c);
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * src[y * s.w + reflect(xx + i, s.w)];
          tmp[y * s.w + xx] = acc;
        }
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * tmp[reflect(y + i, s.h) * s.w + xx];
          dst[y * s.w + xx] = static_cast<Real>(acc);
        }
    }
  }
  return out;
}

std::vector<ImagePair> synth_generate(const SyntheticConfig &cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<ImagePair> pairs;
  pairs.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    Tensor high = procedural_scene(cfg.size, rng);
    Tensor low(high.shape());
    for (int c = 0; c < 3; ++c) {
      const Real *src = high.plane(0, c);
      Real *dst = low.plane(0, c);
      for (std::size_t k = 0; k < high.shape().plane(); ++k) {
        Real v = src[k];
        if (cfg.gamma_shift != 0)
          v = std::pow(v, 1 + cfg.gamma_shift);
        dst[k] = v * cfg.color_gain[c];
      }
    }
    low = gaussian_blur(low, cfg.blur_sigma);
    if (cfg.noise_sigma > 0) {
      std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
      for (Real &v : low.data())
        v = static_cast<Real>(v + noise(rng));
    }
    for (Real &v : low.data())
      v = std::clamp(v, Real(0), Real(1));
    pairs.push_back({std::move(low), std::move(high)});
  }
  return pairs;
}

// ---------------------------------------------------------------------------

Tensor load_png(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path))
    throw DataError("png: no such file: " + path.string());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw FormatError("png: malformed stream in " + path.string() + ": " +
                      image.message);
  const int channels = static_cast<int>(PNG_IMAGE_SAMPLE_CHANNELS(image.format));
  if (channels != 3) {
    png_image_free(&image);
    throw DataError("png: " + path.string() + " has " +
                    std::to_string(channels) + " channels, expected 3 (RGB)");
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw DataError("png: " + path.string() + " is not 8-bit");
  }
  image.format = PNG_FORMAT_RGB;
  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
    throw FormatError("png: malformed stream in " + path.string() + ": " +
                      image.message);
  Tensor out({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(0, c, y, x) =
            static_cast<Real>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]) /
            Real(255);
  return out;
}

void save_png(const Tensor &img, const std::filesystem::path &path) {
  const Shape &s = img.shape();
  if (s.n != 1 || s.c != 3)
    throw ShapeError("save_png: expected 1x3xHxW, got " + s.str());
  std::vector<png_byte> buf(static_cast<std::size_t>(s.h) * s.w * 3);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::round(static_cast<double>(img.at(0, c, y, x)) * 255.0);
        buf[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
            static_cast<png_byte>(std::clamp(v, 0.0, 255.0));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(s.w);
  image.height = static_cast<png_uint_32>(s.h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("png: cannot write " + path.string() + ": " + image.message);
}

std::vector<ImagePair> extract_patches(const ImagePair &pair, int patch,
                                       int stride,
                                       std::optional<std::uint64_t> seed) {
  pair.validate();
  const Shape &s = pair.low.shape();
  if (patch < 1 || stride < 1)
    throw DataError("extract_patches: patch and stride must be positive");
  if (patch > s.h || patch > s.w)
    throw DataError("extract_patches: patch " + std::to_string(patch) +
                    " larger than image " + std::to_string(s.h) + "x" +
                    std::to_string(s.w));
  auto cut = [&](const Tensor &t, int y0, int x0) {
    Tensor out({1, s.c, patch, patch});
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < patch; ++y)
        std::copy_n(t.plane(0, c) + (y0 + y) * s.w + x0, patch,
                    out.plane(0, c) + y * patch);
    return out;
  };
  std::vector<ImagePair> out;
  for (int y = 0; y + patch <= s.h; y += stride)
    for (int x = 0; x + patch <= s.w; x += stride)
      out.push_back({cut(pair.low, y, x), cut(pair.high, y, x)});
  if (seed) {
    Rng rng(*seed);
    std::shuffle(out.begin(), out.end(), rng);
  }
  return out;
}

std::vector<ImagePair> load_pair_dir(const std::filesystem::path &dir) {
  namespace fs = std::filesystem;
  const fs::path low_dir = dir / "low";
  const fs::path high_dir = dir / "high";
  if (!fs::is_directory(low_dir) || !fs::is_directory(high_dir))
    throw DataError("data dir " + dir.string() +
                    " must contain 'low' and 'high' subdirectories");
  std::map<std::string, fs::path> names;
  for (const auto &entry : fs::directory_iterator(low_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      names.emplace(entry.path().filename().string(), entry.path());
  if (names.empty())
    throw DataError("data dir " + dir.string() + " has no PNG pairs");
  std::vector<ImagePair> pairs;
  for (const auto &[name, low_path] : names) {
    const fs::path high_path = high_dir / name;
    if (!fs::exists(high_path))
      throw DataError("missing target image " + high_path.string());
    ImagePair pair{load_png(low_path), load_png(high_path)};
    pair.validate();
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

QATIE_END_NAMESPACE
