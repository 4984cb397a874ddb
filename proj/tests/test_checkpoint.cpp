// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "qatie/checkpoint.hpp"
#include "qatie/train.hpp"

using namespace qatie;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("qatie_ckpt_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig width(int c) {
  ModelConfig m;
  m.base_width = c;
  return m;
}

std::vector<ImagePair> calib_data() {
  SyntheticConfig sc;
  sc.count = 3;
  sc.size = 16;
  return synth_generate(sc);
}

std::string decode_error(std::vector<std::uint8_t> bytes) {
  try {
    decode(bytes);
  } catch (const FormatError &e) {
    return e.what();
  }
  return {};
}

void put_u32(std::vector<std::uint8_t> &b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

} // namespace

TEST_CASE("fp32 checkpoint round trip is byte-identical") {
  TempDir dir;
  const Network net = init_network(width(4), 1);
  save_checkpoint(net, dir.path / "a.ckpt", {{"epochs", 3}});
  const Model m = load_checkpoint(dir.path / "a.ckpt");
  CHECK(model_kind(m) == "fp32");
  const Network &back = std::get<Network>(m);
  std::vector<Real> va, vb;
  net.visit([&](const std::string &, const Tensor &t) {
    va.insert(va.end(), t.values().begin(), t.values().end());
  });
  back.visit([&](const std::string &, const Tensor &t) {
    vb.insert(vb.end(), t.values().begin(), t.values().end());
  });
  CHECK(va == vb);
  save_checkpoint(back, dir.path / "b.ckpt", {{"epochs", 3}});
  CHECK(read_file(dir.path / "a.ckpt") == read_file(dir.path / "b.ckpt"));
  CHECK(decode(read_file(dir.path / "a.ckpt")).config["echo"]["epochs"] == 3);
}

TEST_CASE("qat and int8 checkpoints round trip") {
  TempDir dir;
  const Network net = init_network(width(2), 2);
  QatNetwork q = calibrate_ptq(net, calib_data(), 2);
  save_checkpoint(q, dir.path / "q.ckpt");
  Model mq = load_checkpoint(dir.path / "q.ckpt");
  CHECK(model_kind(mq) == "qat");
  QatNetwork &qb = std::get<QatNetwork>(mq);
  CHECK(qb.mode() == QatMode::Frozen);
  save_checkpoint(qb, dir.path / "q2.ckpt");
  CHECK(read_file(dir.path / "q.ckpt") == read_file(dir.path / "q2.ckpt"));

  std::mt19937_64 rng(3);
  Tensor x({1, 3, 16, 16});
  for (Real &v : x.data())
    v = static_cast<Real>(std::uniform_real_distribution<double>(0, 1)(rng));
  CHECK(qb.infer(x).values() == q.infer(x).values());

  const Int8Graph g = convert_int8(q);
  save_checkpoint(g, dir.path / "i.ckpt");
  Model mi = load_checkpoint(dir.path / "i.ckpt");
  CHECK(model_kind(mi) == "int8");
  const Int8Graph &gb = std::get<Int8Graph>(mi);
  CHECK(gb.run_quantized(x).data == g.run_quantized(x).data);
  save_checkpoint(gb, dir.path / "i2.ckpt");
  CHECK(read_file(dir.path / "i.ckpt") == read_file(dir.path / "i2.ckpt"));

  // Weight payload: one byte per weight instead of four.
  auto payload = [](const Container &c, DType t) {
    std::size_t n = 0;
    for (const auto &s : c.tensors)
      if (s.dtype == t)
        n += s.payload.size();
    return n;
  };
  const double ratio = double(payload(to_container(g), DType::I8)) /
                       payload(to_container(net), DType::F32);
  CHECK(ratio > 0.2);
  CHECK(ratio < 0.26);
}

TEST_CASE("corrupted containers are rejected with distinct messages") {
  const auto good = encode(to_container(init_network(width(1), 4)));
  CHECK_NOTHROW(decode(good));
  const Container c = decode(good);
  REQUIRE(!c.tensors.empty());

  std::set<std::string> messages;

  auto magic = good;
  magic[0] = 'X';
  const std::string m1 = decode_error(magic);
  CHECK(m1.find("magic") != std::string::npos);
  messages.insert(m1);

  auto version = good;
  put_u32(version, 8, kCheckpointVersion + 1);
  const std::string m2 = decode_error(version);
  CHECK(m2.find("version") != std::string::npos);
  messages.insert(m2);

  auto dtype = good;
  dtype[8 + 4 + 4 + 4 + c.tensors[0].name.size()] = 9;
  const std::string m3 = decode_error(dtype);
  CHECK(m3.find("dtype") != std::string::npos);
  messages.insert(m3);

  auto cut = good;
  cut.resize(good.size() / 2);
  const std::string m4 = decode_error(cut);
  CHECK(m4.find("truncated") != std::string::npos);
  messages.insert(m4);

  auto trailing = good;
  trailing.push_back(0);
  const std::string m5 = decode_error(trailing);
  CHECK(m5.find("trailing") != std::string::npos);
  messages.insert(m5);

  CHECK(messages.size() == 5);
  CHECK_FALSE(decode_error({}).empty());
}

TEST_CASE("missing files and names") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), DataError);
  const Container c = decode(encode(to_container(init_network(width(1), 5))));
  CHECK_THROWS_AS(c.tensor("no.such.tensor"), FormatError);
  CHECK(std::string(dtype_name(DType::I32)) != dtype_name(DType::I8));
  CHECK(dtype_width(DType::I32) == 4);
  CHECK(dtype_width(DType::U8) == 1);
}
