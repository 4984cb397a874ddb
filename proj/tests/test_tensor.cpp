// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "qatie/kernels.hpp"
#include "qatie/tensor.hpp"

using namespace qatie;

TEST_CASE("tensor layout is N,C,H,W row-major") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.offset(1, 2, 3, 4) == 119);
  CHECK(t.offset(0, 1, 0, 0) == 20);
  t.at(1, 0, 2, 1) = 7;
  CHECK(t[60 + 10 + 1] == 7);
  CHECK_FALSE(t.has_grad());
  t.ensure_grad()[3] = 1;
  CHECK(t.grad().size() == t.numel());
  t.zero_grad();
  CHECK(t.grad()[3] == 0);
}

TEST_CASE("tensor rejects value count that disagrees with shape") {
  CHECK_THROWS_AS(Tensor({1, 1, 2, 2}, std::vector<Real>(3)), ShapeError);
}

TEST_CASE("sample slicing and batch stacking invert each other") {
  std::vector<Real> v(2 * 2 * 3 * 3);
  std::iota(v.begin(), v.end(), Real(0));
  Tensor t({2, 2, 3, 3}, v);
  Tensor a = t.sample(0), b = t.sample(1);
  CHECK(a.shape() == Shape{1, 2, 3, 3});
  CHECK(b[0] == 18);
  const Tensor parts[] = {a, b};
  CHECK(stack_batch(parts).values() == t.values());
  CHECK(t.samples(1, 1).values() == b.values());
}

TEST_CASE("conv2d identity 1x1 kernel") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(-1, 1);
  Tensor x({1, 1, 4, 4});
  for (Real &v : x.data())
    v = static_cast<Real>(d(rng));
  Tensor w({1, 1, 1, 1}, Real(1)), b({1, 1, 1, 1});
  CHECK(kernels::conv2d(x, w, b, 1, 0).values() == x.values());
}

TEST_CASE("conv2d all-ones 3x3 hand convolution") {
  Tensor x({1, 1, 3, 3}, Real(1)), w({1, 1, 3, 3}, Real(1)), b({1, 1, 1, 1});
  Tensor y = kernels::conv2d(x, w, b, 1, 1);
  CHECK(y.at(0, 0, 1, 1) == 9);
  CHECK(y.at(0, 0, 0, 1) == 6);
  CHECK(y.at(0, 0, 1, 0) == 6);
  CHECK(y.at(0, 0, 1, 2) == 6);
  CHECK(y.at(0, 0, 2, 1) == 6);
  CHECK(y.at(0, 0, 0, 0) == 4);
  CHECK(y.at(0, 0, 2, 2) == 4);
}

TEST_CASE("conv2d matches a direct loop oracle with stride 2") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-1, 1);
  Tensor x({2, 3, 7, 6}), w({4, 3, 3, 3}), b({1, 4, 1, 1});
  for (Tensor *t : {&x, &w, &b})
    for (Real &v : t->data())
      v = static_cast<Real>(d(rng));
  Tensor y = kernels::conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == Shape{2, 4, 4, 3});
  double worst = 0;
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          double s = b[o];
          for (int c = 0; c < 3; ++c)
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v) {
                const int r = 2 * i + u - 1, q = 2 * j + v - 1;
                if (r >= 0 && r < 7 && q >= 0 && q < 6)
                  s += double(x.at(n, c, r, q)) * w.at(o, c, u, v);
              }
          worst = std::max(worst, std::abs(s - y.at(n, o, i, j)));
        }
  CHECK(worst < 1e-5);
}

TEST_CASE("conv2d output shape and diagnostics") {
  Tensor x({1, 5, 8, 8}), w({2, 5, 3, 3}), b({1, 2, 1, 1});
  CHECK(kernels::conv2d(x, w, b, 2, 1).shape() == Shape{1, 2, 4, 4});
  Tensor bad({2, 4, 3, 3});
  CHECK_THROWS_AS(kernels::conv2d(x, bad, b, 1, 1), ShapeError);
  try {
    kernels::conv2d(x, bad, b, 1, 1);
  } catch (const ShapeError &e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  Tensor even({2, 5, 2, 2});
  CHECK_THROWS_AS(kernels::conv2d(x, even, b, 1, 1), ShapeError);
}

TEST_CASE("instance norm closed forms") {
  Tensor g({1, 1, 1, 1}, Real(1)), be({1, 1, 1, 1});
  Tensor flat({1, 1, 2, 2}, Real(0.7));
  const Tensor flat_out = kernels::instance_norm(flat, g, be, Real(1e-5));
  for (Real v : flat_out.data())
    CHECK(v == 0);
  Tensor pair({1, 1, 1, 2}, std::vector<Real>{-1, 1});
  Tensor y = kernels::instance_norm(pair, g, be, Real(1e-5));
  const double expect = 1 / std::sqrt(1 + 1e-5);
  CHECK(y[0] == doctest::Approx(-expect).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(expect).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(0.99999).epsilon(1e-5));

  // A 1x1 plane has zero variance and yields beta.
  Tensor one({1, 1, 1, 1}, Real(3)), beta({1, 1, 1, 1}, Real(0.25));
  CHECK(kernels::instance_norm(one, g, beta, Real(1e-5))[0] == Real(0.25));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> d(0.3, 2.0);
  Tensor x({1, 2, 8, 8});
  for (Real &v : x.data())
    v = static_cast<Real>(d(rng));
  Tensor gamma({1, 2, 1, 1}, std::vector<Real>{2, 0.5});
  Tensor bias({1, 2, 1, 1}, std::vector<Real>{-1, 3});
  Tensor z = kernels::instance_norm(x, gamma, bias, Real(1e-5));
  for (int c = 0; c < 2; ++c) {
    double m = 0, s = 0;
    for (int i = 0; i < 64; ++i)
      m += z.plane(0, c)[i];
    m /= 64;
    for (int i = 0; i < 64; ++i)
      s += (z.plane(0, c)[i] - m) * (z.plane(0, c)[i] - m);
    CHECK(m == doctest::Approx(bias[c]).epsilon(1e-4));
    CHECK(std::sqrt(s / 64) == doctest::Approx(gamma[c]).epsilon(1e-4));
  }
}

TEST_CASE("leaky relu, upsample and concat") {
  Tensor x({1, 1, 1, 3}, std::vector<Real>{5, -1, 0});
  Tensor y = kernels::leaky_relu(x, Real(0.2));
  CHECK(y[0] == 5);
  CHECK(y[1] == doctest::Approx(-0.2));
  CHECK(y[2] == 0);

  Tensor q({1, 1, 2, 2}, std::vector<Real>{1, 2, 3, 4});
  Tensor u = kernels::upsample_nearest2x(q);
  REQUIRE(u.shape() == Shape{1, 1, 4, 4});
  const std::vector<Real> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(u.values() == expect);
  CHECK(std::accumulate(u.values().begin(), u.values().end(), Real(0)) == 40);

  Tensor a({1, 2, 2, 2}, Real(1)), b({1, 3, 2, 2}, Real(2));
  const Tensor *parts[] = {&a, &b};
  Tensor c = kernels::concat_channels(parts);
  REQUIRE(c.shape() == Shape{1, 5, 2, 2});
  CHECK(c.at(0, 1, 1, 1) == 1);
  CHECK(c.at(0, 2, 0, 0) == 2);
  const Tensor *single[] = {&b};
  CHECK(kernels::concat_channels(single).values() == b.values());
  Tensor off({1, 1, 3, 2});
  const Tensor *mismatch[] = {&a, &off};
  CHECK_THROWS_AS(kernels::concat_channels(mismatch), ShapeError);
}
