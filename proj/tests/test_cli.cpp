// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qatie/checkpoint.hpp"
#include "qatie/data.hpp"

using namespace qatie;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::current_path() / "cli_work";

struct Run {
  int code = -1;
  std::string out;
  json report() const { return json::parse(out); }
};

Run cli(const std::string &args) {
  fs::create_directories(kWork);
  const fs::path log = kWork / "stdout.txt";
  const std::string cmd = std::string(QATIE_CLI) + " " + args + " > " + log.string() +
                          " 2> " + (kWork / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  r.out = ss.str();
  return r;
}

std::string path(const std::string &name) { return (kWork / name).string(); }

} // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("train --synthetic").code == 2); // --out missing
  CHECK(cli("train --out " + path("x.ckpt")).code == 2);
  CHECK(cli("gradcheck --precision f16").code == 2);
}

TEST_CASE("report command") {
  const Run r = cli("report --report " + path("report.json"));
  REQUIRE(r.code == 0);
  const json j = r.report();
  CHECK(j["schema_version"] == "1.0");
  CHECK(j["command"] == "report");
  CHECK(j["metrics"]["param_count"]["32"].get<std::size_t>() == 1314787);
  std::ifstream f(path("report.json"));
  CHECK(json::parse(f) == j);
}

TEST_CASE("train, infer, qat, convert and eval") {
  // Zero epochs writes the initialized network.
  Run t = cli("train --synthetic --count 4 --size 16 --width 2 --epochs 0 --seed 5 --out " +
              path("zero.ckpt"));
  REQUIRE(t.code == 0);
  CHECK(t.report()["seed"] == 5);
  CHECK(t.report()["metrics"]["steps"] == 0);
  CHECK(fs::exists(path("zero.ckpt")));

  // A zero head makes the network the identity, so inference reproduces the PNG.
  Model m = load_checkpoint(path("zero.ckpt"));
  Network net = std::get<Network>(m);
  for (Real &v : net.head.weight.data())
    v = 0;
  save_checkpoint(net, path("ident.ckpt"));
  std::mt19937_64 rng(1);
  Tensor img({1, 3, 20, 12});
  for (Real &v : img.data())
    v = static_cast<Real>(rng() % 256) / 255;
  save_png(img, path("in.png"));
  REQUIRE(cli("infer --checkpoint " + path("ident.ckpt") + " --input " + path("in.png") +
              " --output " + path("out.png"))
              .code == 0);
  const Tensor back = load_png(path("out.png"));
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(std::abs(double(back[i]) - img[i]) <= 1.0 / 255 + 1e-6);

  Run tr = cli("train --synthetic --count 4 --size 16 --width 2 --epochs 2 --out " +
               path("fp.ckpt") + " --history " + path("hist.jsonl"));
  REQUIRE(tr.code == 0);
  CHECK(tr.report()["metrics"]["steps"] == 2);
  std::ifstream hist(path("hist.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(hist, line)) {
    CHECK(json::parse(line).contains("loss"));
    ++lines;
  }
  CHECK(lines == 2);

  CHECK(cli("convert --checkpoint " + path("fp.ckpt") + " --out " + path("p.ckpt")).code ==
        2);
  Run cv = cli("convert --checkpoint " + path("fp.ckpt") + " --synthetic --count 4 --size 16" +
               " --out " + path("ptq.ckpt"));
  REQUIRE(cv.code == 0);
  CHECK(cv.report()["metrics"]["int8_weight_bytes"].get<double>() <
        0.3 * cv.report()["metrics"]["fp32_weight_bytes"].get<double>());

  Run q = cli("qat --checkpoint " + path("fp.ckpt") + " --synthetic --count 4 --size 16" +
              " --steps 2 --batch-size 2 --out " + path("qat.ckpt"));
  REQUIRE(q.code == 0);
  CHECK(q.report()["metrics"].contains("qat_fakequant"));
  CHECK(cli("convert --mode qat --checkpoint " + path("qat.ckpt") + " --out " +
            path("qi.ckpt"))
            .code == 0);
  CHECK(cli("convert --mode qat --checkpoint " + path("fp.ckpt") + " --out " +
            path("bad.ckpt"))
            .code == 3);

  Run e = cli("eval --checkpoint " + path("qi.ckpt") + " --synthetic --count 2 --size 16");
  REQUIRE(e.code == 0);
  CHECK(e.report()["config"]["engine"] == "int8");
  CHECK(e.report()["metrics"]["int8"]["count"] == 2);

  Run id = cli("eval --targets --synthetic --count 3 --size 16");
  REQUIRE(id.code == 0);
  CHECK(id.report()["metrics"]["targets"]["ssim"].get<double>() ==
        doctest::Approx(1).epsilon(1e-6));
  CHECK(id.report()["metrics"]["targets"]["psnr"].get<double>() == doctest::Approx(160));
  CHECK(cli("eval --synthetic").code == 2);
}

TEST_CASE("data and format errors") {
  CHECK(cli("infer --checkpoint " + path("missing.ckpt") + " --input a.png --output b.png")
            .code == 3);
  fs::create_directories(kWork);
  std::ofstream(path("junk.ckpt"), std::ios::binary) << "QATIECKPgarbage";
  CHECK(cli("eval --checkpoint " + path("junk.ckpt") + " --synthetic").code == 5);
  CHECK(cli("train --data " + path("nowhere") + " --out " + path("n.ckpt")).code == 3);
  std::ofstream(path("cfg.json")) << R"({"epochs": 1, "colour": 3})";
  CHECK(cli("train --synthetic --config " + path("cfg.json") + " --out " + path("c.ckpt"))
            .code == 2);
}

TEST_CASE("gradcheck command") {
  const std::string small = "gradcheck --width 2 --size 8 --max-per-group 4";
  Run ok = cli(small);
  REQUIRE(ok.code == 0);
  const json m = ok.report()["metrics"];
  CHECK(m["passed"] == true);
  CHECK(m["max_rel_error"].get<double>() < 1e-3);
  CHECK(m["worst_group"].is_string());
  CHECK(!m["groups"].empty());

  Run bad = cli(small + " --corrupt-adjoint");
  CHECK(bad.code == 4);
  CHECK(bad.report()["metrics"]["max_rel_error"].get<double>() > 0.1);

  CHECK(cli("gradcheck --width 9").code == 3);
  CHECK(cli("gradcheck --size 40").code == 3);
}
