// SPDX-License-Identifier: Apache-2.0
#include "qatie/model.hpp"

#include <cmath>
#include <random>

QATIE_BEGIN_NAMESPACE

namespace {

Conv2d make_conv(int in, int out, int kernel, int stride) {
  Conv2d c;
  c.weight = Tensor({out, in, kernel, kernel});
  c.bias = Tensor({1, out, 1, 1});
  c.stride = stride;
  c.padding = kernel / 2;
  return c;
}

InstanceNormParams make_norm(int channels) {
  return {Tensor({1, channels, 1, 1}, Real(1)), Tensor({1, channels, 1, 1})};
}

GatedBlockParams make_gated(int in, int out) {
  return {make_conv(in, out, 3, 2), make_conv(in, out, 3, 2)};
}

RefineBlockParams make_refine(int c) {
  RefineBlockParams r;
  r.conv1 = make_conv(c, c, 3, 1);
  r.norm1 = make_norm(c);
  r.conv_side = make_conv(c, c, 1, 1);
  r.conv2 = make_conv(2 * c, c, 3, 1);
  r.norm2 = make_norm(c);
  r.conv3 = make_conv(c, c, 3, 1);
  r.shortcut = make_conv(c, c, 1, 1);
  return r;
}

// deep: width arriving from below; stage: width at this scale.
FuseBlockParams make_fuse(int deep, int stage) {
  FuseBlockParams f;
  f.up_conv = make_conv(deep, stage, 3, 1);
  // upsampled + refined encoder + (x_a, x_b)
  f.reduce = make_conv(stage + stage + 2 * stage, stage, 1, 1);
  f.refine = make_refine(stage);
  return f;
}

template <class Net, class Fn> void visit_all(Net &net, Fn &&fn) {
  auto conv = [&](const std::string &p, auto &c) {
    fn(p + ".weight", c.weight);
    fn(p + ".bias", c.bias);
  };
  auto norm = [&](const std::string &p, auto &n) {
    fn(p + ".gamma", n.gamma);
    fn(p + ".beta", n.beta);
  };
  auto gated = [&](const std::string &p, auto &g) {
    conv(p + ".a", g.branch_a);
    conv(p + ".b", g.branch_b);
  };
  auto refine = [&](const std::string &p, auto &r) {
    conv(p + ".conv1", r.conv1);
    norm(p + ".norm1", r.norm1);
    conv(p + ".side", r.conv_side);
    conv(p + ".conv2", r.conv2);
    norm(p + ".norm2", r.norm2);
    conv(p + ".conv3", r.conv3);
    conv(p + ".short", r.shortcut);
  };
  auto fuse = [&](const std::string &p, auto &f) {
    conv(p + ".up", f.up_conv);
    conv(p + ".reduce", f.reduce);
    refine(p + ".refine", f.refine);
  };
  gated("down1", net.down1);
  refine("enc1", net.enc_refine1);
  gated("down2", net.down2);
  refine("enc2", net.enc_refine2);
  gated("down3", net.down3);
  refine("bottleneck", net.bottleneck_refine);
  fuse("fuse4", net.fuse_s4);
  fuse("fuse2", net.fuse_s2);
  conv("head", net.head);
}

// Records quantization point names and nothing else.
struct PointRecorder {
  struct Value {};
  std::vector<std::string> points;

  template <class C> Value conv(const std::string &name, C &, const Value &) {
    points.push_back(name);
    return {};
  }
  Value tanh(const Value &) { return {}; }
  Value mul(const Value &, const Value &, const std::string &name) {
    points.push_back(name);
    return {};
  }
  template <class P> Value norm_act(const Value &, P &) { return {}; }
  Value concat(const std::vector<Value> &, const std::string &name) {
    points.push_back(name);
    return {};
  }
  Value upsample(const Value &) { return {}; }
  Value add(const Value &, const Value &, const std::string &name) {
    points.push_back(name);
    return {};
  }
  Value quant(const Value &, const std::string &name) {
    points.push_back(name);
    return {};
  }
  Value output(const Value &, const Value &, bool) { return {}; }
};

} // namespace

void ModelConfig::validate() const {
  if (base_width < 1)
    throw DataError("model: base width must be at least 1");
  if (in_channels != 3 || out_channels != 3)
    throw DataError("model: only 3-channel RGB input/output is supported");
  if (!(leaky_slope > 0 && leaky_slope < 1))
    throw DataError("model: leaky slope must lie in (0, 1)");
}

void Network::visit(
    const std::function<void(const std::string &, Tensor &)> &fn) {
  visit_all(*this, fn);
}

void Network::visit(
    const std::function<void(const std::string &, const Tensor &)> &fn) const {
  visit_all(*this, fn);
}

std::vector<Tensor *> Network::parameters() {
  std::vector<Tensor *> out;
  visit([&](const std::string &, Tensor &t) { out.push_back(&t); });
  return out;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  visit([&](const std::string &, const Tensor &t) { n += t.numel(); });
  return n;
}

void Network::zero_grad() {
  visit([](const std::string &, Tensor &t) { t.drop_grad(); });
}

Network build_network(const ModelConfig &config) {
  config.validate();
  const auto [w1, w2, w3] = config.stage_widths();
  Network net;
  net.config = config;
  net.down1 = make_gated(config.in_channels, w1);
  net.enc_refine1 = make_refine(w1);
  net.down2 = make_gated(w1, w2);
  net.enc_refine2 = make_refine(w2);
  net.down3 = make_gated(w2, w3);
  net.bottleneck_refine = make_refine(w3);
  net.fuse_s4 = make_fuse(w3, w2);
  net.fuse_s2 = make_fuse(w2, w1);
  net.head = make_conv(w1, config.out_channels, 3, 1);
  return net;
}

Network init_network(const ModelConfig &config, std::uint64_t seed) {
  Network net = build_network(config);
  std::mt19937_64 rng(seed);
  net.visit([&](const std::string &name, Tensor &t) {
    if (!name.ends_with(".weight"))
      return;
    const Shape &s = t.shape();
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.c) * s.h * s.w);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Real &v : t.data())
      v = static_cast<Real>(dist(rng));
  });
  return net;
}

std::size_t param_count(const ModelConfig &config) {
  return build_network(config).param_count();
}

// ---------------------------------------------------------------------------

GatedOutputs gated_down_forward(Tape &tape, GatedBlockParams &params, Var x) {
  const Shape &s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ShapeError("gated_down: spatial dims " + std::to_string(s.h) + "x" +
                     std::to_string(s.w) + " must be even; pad the input first");
  TapeBackend be(tape, Real(0.2));
  auto [a, g, b] = arch::gated_down(be, params, "down", QValue{x, {}});
  return {a.var, g.var, b.var};
}

Var refine_forward(Tape &tape, RefineBlockParams &params, Var f,
                   Real leaky_slope) {
  if (f.shape().c != params.conv1.in_channels())
    throw ShapeError("refine: input channels " + std::to_string(f.shape().c) +
                     " != block width " +
                     std::to_string(params.conv1.in_channels()));
  TapeBackend be(tape, leaky_slope);
  return arch::refine(be, params, "refine", QValue{f, {}}).var;
}

Var fuse_forward(Tape &tape, FuseBlockParams &params, Var f_deep,
                 Var f_enc_refined, Var skip_ab, Real leaky_slope) {
  const Shape &enc = f_enc_refined.shape();
  const Shape &skip = skip_ab.shape();
  const Shape &deep = f_deep.shape();
  if (skip.h != enc.h || skip.w != enc.w)
    throw ShapeError("fuse: skip and encoder features differ spatially (" +
                     skip.str() + " vs " + enc.str() + ")");
  if (deep.h * 2 != enc.h || deep.w * 2 != enc.w)
    throw ShapeError("fuse: deep feature " + deep.str() +
                     " must be at half the stage resolution " + enc.str());
  if (skip.c % 2 != 0)
    throw ShapeError("fuse: skip stream must hold x_a and x_b");
  const int expected = params.up_conv.out_channels() + enc.c + skip.c;
  if (expected != params.reduce.in_channels())
    throw ShapeError("fuse: concat width " + std::to_string(expected) +
                     " != reduce input channels " +
                     std::to_string(params.reduce.in_channels()));
  TapeBackend be(tape, leaky_slope);
  return arch::fuse(be, params, "fuse", QValue{f_deep, {}},
                    QValue{f_enc_refined, {}}, {QValue{skip_ab, {}}})
      .var;
}

Var network_forward(Tape &tape, Network &net, Var x, QuantHooks *hooks) {
  require_multiple_of_8(x.shape());
  if (x.shape().c != net.config.in_channels)
    throw ShapeError("network: input has " + std::to_string(x.shape().c) +
                     " channels, expected " +
                     std::to_string(net.config.in_channels));
  TapeBackend be(tape, net.config.leaky_slope, hooks);
  return arch::network(be, net, QValue{x, {}}).var;
}

Tensor network_infer(const Network &net, const Tensor &x) {
  Tape tape(false);
  require_multiple_of_8(x.shape());
  TapeBackend be(tape, net.config.leaky_slope);
  Var in = tape.constant_ref(x);
  return arch::network(be, net, QValue{in, {}}).var.value();
}

std::vector<std::string> activation_points(const ModelConfig &config) {
  const Network net = build_network(config);
  PointRecorder rec;
  arch::network(rec, net, PointRecorder::Value{});
  return rec.points;
}

void require_multiple_of_8(const Shape &s) {
  if (s.h % 8 != 0 || s.w % 8 != 0 || s.h == 0 || s.w == 0)
    throw ShapeError("network: spatial dims " + std::to_string(s.h) + "x" +
                     std::to_string(s.w) +
                     " must be positive multiples of 8; use pad_to_multiple");
}

namespace {

// Mirror index without edge repetition, valid for any i >= 0 when n >= 2.
int reflect_index(int i, int n) {
  const int period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

} // namespace

std::pair<Tensor, CropRecord> pad_to_multiple(const Tensor &x, int m) {
  if (m < 1)
    throw ShapeError("pad_to_multiple: multiple must be at least 1");
  const Shape &s = x.shape();
  CropRecord rec{s.h, s.w, false};
  const int ph = (s.h + m - 1) / m * m;
  const int pw = (s.w + m - 1) / m * m;
  if (ph == s.h && pw == s.w)
    return {x, rec};
  if (s.h < 2 || s.w < 2)
    throw ShapeError("pad_to_multiple: reflection needs at least 2 pixels per "
                     "side, got " +
                     s.str());
  Tensor out({s.n, s.c, ph, pw});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < ph; ++h)
        for (int w = 0; w < pw; ++w)
          out.at(n, c, h, w) =
              x.at(n, c, reflect_index(h, s.h), reflect_index(w, s.w));
  rec.padded = true;
  return {std::move(out), rec};
}

Tensor crop(const Tensor &x, const CropRecord &record) {
  if (!record.padded)
    return x;
  const Shape &s = x.shape();
  if (record.height > s.h || record.width > s.w)
    throw ShapeError("crop: record larger than tensor " + s.str());
  Tensor out({s.n, s.c, record.height, record.width});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < record.height; ++h)
        for (int w = 0; w < record.width; ++w)
          out.at(n, c, h, w) = x.at(n, c, h, w);
  return out;
}

QATIE_END_NAMESPACE
