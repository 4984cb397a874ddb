// SPDX-License-Identifier: Apache-2.0
#include "qatie/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

QATIE_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[8] = {'Q', 'A', 'T', 'I', 'E', 'C', 'K', 'P'};
constexpr std::uint8_t kFlagSigned = 1;
constexpr std::uint8_t kFlagSymmetric = 2;
constexpr std::uint8_t kFlagAxis = 4;

class Writer {
public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { le(v); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string &s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(std::span<const std::uint8_t> b) {
    out_.insert(out_.end(), b.begin(), b.end());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

private:
  template <class U> void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8(const char *what) { return need(1, what)[0]; }
  std::uint32_t u32(const char *what) { return le<std::uint32_t>(what); }
  std::int32_t i32(const char *what) {
    return static_cast<std::int32_t>(le<std::uint32_t>(what));
  }
  std::int64_t i64(const char *what) {
    return static_cast<std::int64_t>(le<std::uint64_t>(what));
  }
  double f64(const char *what) {
    return std::bit_cast<double>(le<std::uint64_t>(what));
  }
  std::string str(const char *what) {
    const std::uint32_t n = u32(what);
    auto s = need(n, what);
    return {s.begin(), s.end()};
  }
  std::span<const std::uint8_t> need(std::size_t n, const char *what) {
    if (n > b_.size() - pos_)
      throw FormatError(std::string("checkpoint truncated while reading ") +
                        what + " at byte " + std::to_string(pos_));
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

private:
  template <class U> U le(const char *what) {
    auto s = need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(s[i]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

template <class U> void put_le(std::vector<std::uint8_t> &out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U> U get_le(const std::uint8_t *p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::vector<std::uint32_t> dims_of(const Shape &s) {
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}

Shape shape_of(const StoredTensor &t) {
  if (t.dims.size() != 4)
    throw FormatError("tensor '" + t.name + "' has rank " +
                      std::to_string(t.dims.size()) + ", expected 4");
  return {static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
          static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3])};
}

StoredTensor store(const std::string &name, const Tensor &t) {
  StoredTensor s{name, DType::F32, dims_of(t.shape()), {}};
  s.payload.reserve(t.numel() * 4);
  for (Real v : t.data())
    put_le(s.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return s;
}

template <class T> StoredTensor store(const std::string &name, DType dtype,
                                      const Shape &shape,
                                      const std::vector<T> &data) {
  StoredTensor s{name, dtype, dims_of(shape), {}};
  for (T v : data)
    put_le(s.payload, static_cast<std::make_unsigned_t<T>>(v));
  return s;
}

void expect_dtype(const StoredTensor &t, DType d) {
  if (t.dtype != d)
    throw FormatError("tensor '" + t.name + "' has dtype " +
                      dtype_name(t.dtype) + ", expected " + dtype_name(d));
}

Tensor load_f32(const StoredTensor &t) {
  expect_dtype(t, DType::F32);
  Tensor out(shape_of(t));
  auto v = out.data();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<Real>(
        std::bit_cast<float>(get_le<std::uint32_t>(t.payload.data() + 4 * i)));
  return out;
}

template <class T> std::vector<T> load_ints(const StoredTensor &t, DType d) {
  expect_dtype(t, d);
  using U = std::make_unsigned_t<T>;
  std::vector<T> out(t.payload.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(get_le<U>(t.payload.data() + sizeof(T) * i));
  return out;
}

nlohmann::json config_json(const ModelConfig &c) {
  return {{"base_width", c.base_width},
          {"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"leaky_slope", static_cast<double>(c.leaky_slope)},
          {"residual_head", c.residual_head}};
}

ModelConfig config_from(const nlohmann::json &j) {
  ModelConfig c;
  c.base_width = j.at("base_width").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.leaky_slope = static_cast<Real>(j.at("leaky_slope").get<double>());
  c.residual_head = j.at("residual_head").get<bool>();
  c.validate();
  return c;
}

void add_network(Container &c, const Network &net) {
  net.visit([&](const std::string &name, const Tensor &t) {
    c.tensors.push_back(store(name, t));
  });
  c.config["model"] = config_json(net.config);
}

Network network_from(const Container &c) {
  Network net = build_network(config_from(c.config.at("model")));
  net.visit([&](const std::string &name, Tensor &t) {
    Tensor loaded = load_f32(c.tensor(name));
    if (loaded.shape() != t.shape())
      throw FormatError("tensor '" + name + "' has shape " +
                        loaded.shape().str() + ", expected " + t.shape().str());
    t = std::move(loaded);
  });
  return net;
}

} // namespace

const char *dtype_name(DType t) {
  switch (t) {
  case DType::F32:
    return "f32";
  case DType::I8:
    return "i8";
  case DType::U8:
    return "u8";
  case DType::I32:
    return "i32";
  }
  return "?";
}

std::size_t dtype_width(DType t) {
  switch (t) {
  case DType::F32:
  case DType::I32:
    return 4;
  case DType::I8:
  case DType::U8:
    return 1;
  }
  throw FormatError("unknown dtype tag");
}

const StoredTensor &Container::tensor(const std::string &name) const {
  for (const StoredTensor &t : tensors)
    if (t.name == name)
      return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

const QuantParams &Container::qparams_of(const std::string &name) const {
  for (const StoredQParams &q : qparams)
    if (q.name == name)
      return q.qp;
  throw FormatError("checkpoint has no qparams for '" + name + "'");
}

std::vector<std::uint8_t> encode(const Container &c) {
  Writer w;
  for (char ch : kMagic)
    w.u8(static_cast<std::uint8_t>(ch));
  w.u32(c.version);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const StoredTensor &t : c.tensors) {
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    std::size_t numel = 1;
    for (std::uint32_t d : t.dims) {
      w.u32(d);
      numel *= d;
    }
    if (t.payload.size() != numel * dtype_width(t.dtype))
      throw FormatError("tensor '" + t.name + "' payload does not match dims");
    w.bytes(t.payload);
  }
  w.u32(static_cast<std::uint32_t>(c.qparams.size()));
  for (const StoredQParams &q : c.qparams) {
    w.str(q.name);
    w.u32(static_cast<std::uint32_t>(q.qp.scale.size()));
    for (Real s : q.qp.scale)
      w.f64(static_cast<double>(s));
    for (std::int32_t z : q.qp.zero_point)
      w.i32(z);
    w.i64(q.qp.qmin);
    w.i64(q.qp.qmax);
    w.u8(static_cast<std::uint8_t>((q.qp.is_signed ? kFlagSigned : 0) |
                                   (q.qp.symmetric ? kFlagSymmetric : 0) |
                                   (q.qp.axis ? kFlagAxis : 0)));
    w.i32(q.qp.axis.value_or(0));
  }
  w.str(c.config.dump());
  return w.take();
}

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a checkpoint: bad magic (expected \"QATIECKP\")");
  Reader r(bytes.subspan(sizeof(kMagic)));
  Container c;
  c.version = r.u32("version");
  if (c.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(c.version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    StoredTensor t;
    t.name = r.str("tensor name");
    const std::uint8_t tag = r.u8("dtype tag");
    if (tag > static_cast<std::uint8_t>(DType::I32))
      throw FormatError("unknown dtype tag " + std::to_string(tag) +
                        " for tensor '" + t.name + "'");
    t.dtype = static_cast<DType>(tag);
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8)
      throw FormatError("tensor '" + t.name + "' has implausible rank " +
                        std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.dims.push_back(r.u32("dims"));
      numel *= t.dims.back();
      if (numel > bytes.size())
        throw FormatError("checkpoint truncated: tensor '" + t.name +
                          "' larger than the file");
    }
    auto payload = r.need(numel * dtype_width(t.dtype), "tensor payload");
    t.payload.assign(payload.begin(), payload.end());
    c.tensors.push_back(std::move(t));
  }
  const std::uint32_t qcount = r.u32("qparams count");
  for (std::uint32_t k = 0; k < qcount; ++k) {
    StoredQParams q;
    q.name = r.str("qparams name");
    const std::uint32_t ch = r.u32("qparams channels");
    if (ch == 0 || ch > bytes.size())
      throw FormatError("qparams '" + q.name + "' has invalid channel count");
    q.qp.scale.clear();
    q.qp.zero_point.clear();
    for (std::uint32_t i = 0; i < ch; ++i)
      q.qp.scale.push_back(static_cast<Real>(r.f64("scale")));
    for (std::uint32_t i = 0; i < ch; ++i)
      q.qp.zero_point.push_back(r.i32("zero point"));
    q.qp.qmin = r.i64("qmin");
    q.qp.qmax = r.i64("qmax");
    const std::uint8_t flags = r.u8("qparams flags");
    const std::int32_t axis = r.i32("axis");
    q.qp.is_signed = flags & kFlagSigned;
    q.qp.symmetric = flags & kFlagSymmetric;
    if (flags & kFlagAxis)
      q.qp.axis = axis;
    try {
      q.qp.validate();
    } catch (const Error &e) {
      throw FormatError("qparams '" + q.name + "': " + e.what());
    }
    c.qparams.push_back(std::move(q));
  }
  const std::string text = r.str("config block");
  if (!r.done())
    throw FormatError("checkpoint has trailing bytes after the config block");
  try {
    c.config = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("checkpoint config block is not JSON: ") +
                      e.what());
  }
  return c;
}

void write_file(const std::filesystem::path &path,
                std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw DataError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char *>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw DataError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

Container to_container(const Network &net) {
  Container c;
  c.config["kind"] = "fp32";
  add_network(c, net);
  return c;
}

Container to_container(const QatNetwork &net) {
  Container c;
  c.config["kind"] = "qat";
  add_network(c, net.network());
  nlohmann::json obs = nlohmann::json::object();
  for (const auto &[name, o] : net.observers())
    obs[name] = {{"min", o.running_min},
                 {"max", o.running_max},
                 {"momentum", o.momentum},
                 {"initialized", o.initialized}};
  c.config["observers"] = obs;
  return c;
}

Container to_container(const Int8Graph &g) {
  Container c;
  c.config["kind"] = "int8";
  c.config["model"] = config_json(g.config);
  c.config["slot_count"] = g.slot_count;
  c.config["output_slot"] = g.output_slot;
  nlohmann::json ops = nlohmann::json::array();
  for (std::size_t i = 0; i < g.ops.size(); ++i) {
    const Int8Op &op = g.ops[i];
    const std::string key = "ops." + std::to_string(i);
    nlohmann::json mult = nlohmann::json::array();
    for (const RequantMultiplier &m : op.multipliers)
      mult.push_back({m.m0, m.shift});
    ops.push_back({{"kind", int8_op_name(op.kind)},
                   {"name", op.name},
                   {"inputs", op.inputs},
                   {"output", op.output},
                   {"stride", op.stride},
                   {"padding", op.padding},
                   {"slope", static_cast<double>(op.slope)},
                   {"multipliers", mult}});
    c.qparams.push_back({key + ".out", op.out_qp});
    switch (op.kind) {
    case Int8OpKind::Conv:
      c.tensors.push_back(
          store(key + ".weight", DType::I8, op.weight.shape, op.weight.data));
      c.tensors.push_back(
          store(key + ".bias", DType::I32, op.bias.shape, op.bias.data));
      c.qparams.push_back({key + ".weight", op.weight.qp});
      c.qparams.push_back({key + ".bias", op.bias.qp});
      break;
    case Int8OpKind::NormAct:
      c.tensors.push_back(store(key + ".gamma", op.gamma));
      c.tensors.push_back(store(key + ".beta", op.beta));
      break;
    case Int8OpKind::TanhLut: {
      std::vector<std::uint8_t> lut(op.lut.begin(), op.lut.end());
      c.tensors.push_back(store(key + ".lut", DType::U8, {1, 1, 1, 256}, lut));
      break;
    }
    default:
      break;
    }
  }
  c.config["ops"] = ops;
  return c;
}

Model from_container(const Container &c) {
  try {
    const std::string kind = c.config.at("kind").get<std::string>();
    if (kind == "fp32")
      return network_from(c);
    if (kind == "qat") {
      QatPlan plan;
      const auto &obs = c.config.at("observers");
      double momentum = 0.99;
      for (auto it = obs.begin(); it != obs.end(); ++it) {
        plan.points.push_back(it.key());
        momentum = it.value().at("momentum").get<double>();
      }
      QatNetwork q(network_from(c), plan, momentum);
      for (auto it = obs.begin(); it != obs.end(); ++it) {
        Observer &o = q.observers().at(it.key());
        o.running_min = it.value().at("min").get<double>();
        o.running_max = it.value().at("max").get<double>();
        o.momentum = it.value().at("momentum").get<double>();
        o.initialized = it.value().at("initialized").get<bool>();
      }
      q.set_mode(QatMode::Frozen);
      return q;
    }
    if (kind == "int8") {
      Int8Graph g;
      g.config = config_from(c.config.at("model"));
      g.slot_count = c.config.at("slot_count").get<int>();
      g.output_slot = c.config.at("output_slot").get<int>();
      const auto &ops = c.config.at("ops");
      for (std::size_t i = 0; i < ops.size(); ++i) {
        const auto &j = ops[i];
        const std::string key = "ops." + std::to_string(i);
        Int8Op op;
        op.kind = int8_op_from_name(j.at("kind").get<std::string>());
        op.name = j.at("name").get<std::string>();
        op.inputs = j.at("inputs").get<std::vector<int>>();
        op.output = j.at("output").get<int>();
        op.stride = j.at("stride").get<int>();
        op.padding = j.at("padding").get<int>();
        op.slope = static_cast<Real>(j.at("slope").get<double>());
        for (const auto &m : j.at("multipliers"))
          op.multipliers.push_back(
              {m.at(0).get<std::int32_t>(), m.at(1).get<std::int32_t>()});
        for (int s : op.inputs)
          if (s < 0 || s >= g.slot_count)
            throw FormatError("op '" + op.name + "' reads an invalid slot");
        if (op.output < 0 || op.output >= g.slot_count)
          throw FormatError("op '" + op.name + "' writes an invalid slot");
        op.out_qp = c.qparams_of(key + ".out");
        switch (op.kind) {
        case Int8OpKind::Conv: {
          const StoredTensor &w = c.tensor(key + ".weight");
          const StoredTensor &b = c.tensor(key + ".bias");
          op.weight = {shape_of(w), load_ints<std::int8_t>(w, DType::I8),
                       c.qparams_of(key + ".weight")};
          op.bias = {shape_of(b), load_ints<std::int32_t>(b, DType::I32),
                     c.qparams_of(key + ".bias")};
          break;
        }
        case Int8OpKind::NormAct:
          op.gamma = load_f32(c.tensor(key + ".gamma"));
          op.beta = load_f32(c.tensor(key + ".beta"));
          break;
        case Int8OpKind::TanhLut: {
          const auto lut = load_ints<std::uint8_t>(c.tensor(key + ".lut"), DType::U8);
          if (lut.size() != 256)
            throw FormatError("lookup table '" + key + "' must have 256 entries");
          std::copy(lut.begin(), lut.end(), op.lut.begin());
          break;
        }
        default:
          break;
        }
        g.ops.push_back(std::move(op));
      }
      if (g.output_slot < 0 || g.output_slot >= g.slot_count)
        throw FormatError("int8 graph has an invalid output slot");
      return g;
    }
    throw FormatError("unknown checkpoint kind '" + kind + "'");
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  }
}

namespace {

void save(Container c, const std::filesystem::path &path,
          const nlohmann::json &echo) {
  if (!echo.empty())
    c.config["echo"] = echo;
  write_file(path, encode(c));
}

} // namespace

void save_checkpoint(const Network &net, const std::filesystem::path &path,
                     const nlohmann::json &echo) {
  save(to_container(net), path, echo);
}

void save_checkpoint(const QatNetwork &net, const std::filesystem::path &path,
                     const nlohmann::json &echo) {
  save(to_container(net), path, echo);
}

void save_checkpoint(const Int8Graph &graph, const std::filesystem::path &path,
                     const nlohmann::json &echo) {
  save(to_container(graph), path, echo);
}

Model load_checkpoint(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path))
    throw DataError("no such checkpoint: " + path.string());
  return from_container(decode(read_file(path)));
}

std::string model_kind(const Model &m) {
  switch (m.index()) {
  case 0:
    return "fp32";
  case 1:
    return "qat";
  default:
    return "int8";
  }
}

QATIE_END_NAMESPACE
