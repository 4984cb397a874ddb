// SPDX-License-Identifier: Apache-2.0
// qatie: train, fine-tune, convert, run and check the enhancement network.
//
// Exit codes: 0 ok, 1 internal error, 2 usage, 3 data, 4 numeric failure
// (including a failed gradient check), 5 malformed file.

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "qatie/checkpoint.hpp"
#include "qatie/data.hpp"
#include "qatie/gradcheck.hpp"
#include "qatie/train.hpp"

namespace {

using nlohmann::json;
using namespace qatie;

constexpr const char *kSchemaVersion = "1.0";

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kNumeric = 4, kFormat = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

json metrics_json(const EvalResult &r) {
  return {{"psnr", r.psnr}, {"ssim", r.ssim}, {"count", r.count}};
}

// Options shared by every command that reads paired data.
struct DataOptions {
  std::string dir;
  bool synthetic = false;
  int count = 16;
  int size = 32;
  std::uint64_t data_seed = 1;
  double noise = -1;
  double blur = -1;

  void add(CLI::App &cmd) {
    cmd.add_option("--data", dir, "directory with low/ and high/ PNG pairs");
    cmd.add_flag("--synthetic", synthetic, "use the seeded synthetic generator");
    cmd.add_option("--count", count, "synthetic pair count")->capture_default_str();
    cmd.add_option("--size", size, "synthetic patch side")->capture_default_str();
    cmd.add_option("--data-seed", data_seed, "synthetic generator seed")
        ->capture_default_str();
    cmd.add_option("--noise", noise, "synthetic noise sigma");
    cmd.add_option("--blur", blur, "synthetic blur sigma");
  }

  SyntheticConfig synthetic_config(std::uint64_t seed) const {
    SyntheticConfig cfg;
    cfg.count = count;
    cfg.size = size;
    cfg.seed = seed;
    if (noise >= 0)
      cfg.noise_sigma = static_cast<Real>(noise);
    if (blur >= 0)
      cfg.blur_sigma = static_cast<Real>(blur);
    return cfg;
  }

  bool given() const { return synthetic || !dir.empty(); }

  std::vector<ImagePair> load() const {
    if (synthetic)
      return synth_generate(synthetic_config(data_seed));
    if (dir.empty())
      throw UsageError("a data directory (--data) or --synthetic is required");
    return load_pair_dir(dir);
  }

  /// Held-out pairs: a different synthetic seed, or the same directory.
  std::vector<ImagePair> held_out() const {
    if (synthetic)
      return synth_generate(synthetic_config(data_seed + 1000));
    return load();
  }

  json describe() const {
    if (synthetic) {
      const SyntheticConfig c = synthetic_config(data_seed);
      return {{"synthetic", true},
              {"count", c.count},
              {"size", c.size},
              {"seed", c.seed},
              {"noise_sigma", c.noise_sigma},
              {"blur_sigma", c.blur_sigma},
              {"gamma_shift", c.gamma_shift},
              {"color_gain", c.color_gain}};
    }
    return {{"dir", dir}};
  }
};

json train_config_json(const TrainConfig &c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"grad_accum_steps", c.grad_accum_steps},
          {"base_lr", c.base_lr},
          {"warmup_epochs", c.warmup_epochs},
          {"warmup_start_lr", c.warmup_start_lr},
          {"min_lr", c.min_lr},
          {"clip_range", {c.clip_lo, c.clip_hi}},
          {"loss_weights",
           {{"alpha", c.loss_weights.alpha},
            {"beta", c.loss_weights.beta},
            {"gamma", c.loss_weights.gamma}}},
          {"seed", c.seed}};
}

/// Applies a JSON config file on top of `cfg`; unknown or ill-typed fields
/// are rejected by name.
void apply_config_file(const std::string &path, TrainConfig &cfg, int &width) {
  std::ifstream f(path);
  if (!f)
    throw DataError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception &e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object())
    throw UsageError("config file " + path + " must hold a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string &k = it.key();
    const json &v = it.value();
    try {
      if (k == "epochs")
        cfg.epochs = v.get<int>();
      else if (k == "batch_size")
        cfg.batch_size = v.get<int>();
      else if (k == "grad_accum_steps")
        cfg.grad_accum_steps = v.get<int>();
      else if (k == "base_lr")
        cfg.base_lr = v.get<Real>();
      else if (k == "warmup_epochs")
        cfg.warmup_epochs = v.get<int>();
      else if (k == "warmup_start_lr")
        cfg.warmup_start_lr = v.get<Real>();
      else if (k == "min_lr")
        cfg.min_lr = v.get<Real>();
      else if (k == "clip_range") {
        cfg.clip_lo = v.at(0).get<Real>();
        cfg.clip_hi = v.at(1).get<Real>();
      } else if (k == "loss_weights") {
        cfg.loss_weights.alpha = v.at("alpha").get<Real>();
        cfg.loss_weights.beta = v.at("beta").get<Real>();
        cfg.loss_weights.gamma = v.at("gamma").get<Real>();
      } else if (k == "seed")
        cfg.seed = v.get<std::uint64_t>();
      else if (k == "width")
        width = v.get<int>();
      else
        throw UsageError("config file " + path + ": unknown field '" + k + "'");
    } catch (const json::exception &) {
      throw UsageError("config file " + path + ": field '" + k +
                       "' has the wrong type");
    }
  }
}

void emit_report(const json &report, const std::string &path) {
  std::cout << report.dump(2) << "\n";
  if (!path.empty()) {
    std::ofstream f(path);
    if (!f)
      throw DataError("cannot write report " + path);
    f << report.dump(2) << "\n";
  }
}

json base_report(const std::string &command, std::uint64_t seed) {
  return {{"schema_version", kSchemaVersion},
          {"command", command},
          {"seed", seed},
          {"config", json::object()},
          {"metrics", json::object()},
          {"timings", json::object()},
          {"artifacts", json::object()}};
}

Network load_network(const std::string &path, const char *what) {
  Model m = load_checkpoint(path);
  if (auto *n = std::get_if<Network>(&m))
    return std::move(*n);
  if (auto *q = std::get_if<QatNetwork>(&m))
    return std::move(q->network());
  throw DataError(std::string(what) + " needs a floating-point checkpoint, " +
                  path + " holds an INT8 graph");
}

// ---------------------------------------------------------------------------

struct TrainCmd {
  std::string preset = "desk";
  std::string config_path;
  std::string out;
  std::string history;
  std::string report;
  DataOptions data;
  int width = 8;
  int epochs = 0;
  int batch = 0;
  int accum = 0;
  double lr = 0;
  std::uint64_t seed = 1;
  CLI::Option *o_width, *o_epochs, *o_batch, *o_accum, *o_lr, *o_seed;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("train", "train the FP32 network");
    cmd->add_option("--preset", preset, "desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    cmd->add_option("--config", config_path, "JSON config overriding the preset");
    cmd->add_option("--out", out, "output checkpoint")->required();
    cmd->add_option("--history", history, "write per-step JSON lines here");
    cmd->add_option("--report", report, "also write the JSON report here");
    o_width = cmd->add_option("--width", width, "base channel width c");
    o_epochs = cmd->add_option("--epochs", epochs);
    o_batch = cmd->add_option("--batch-size", batch);
    o_accum = cmd->add_option("--accum", accum, "gradient accumulation steps");
    o_lr = cmd->add_option("--lr", lr, "base learning rate");
    o_seed = cmd->add_option("--seed", seed);
    data.add(*cmd);
    cmd->callback([this] { code = run(); });
  }

  int code = kOk;

  int run() {
    const auto t0 = Clock::now();
    TrainConfig cfg = preset == "paper" ? TrainConfig::paper() : TrainConfig::desk();
    int w = 8;
    if (!config_path.empty())
      apply_config_file(config_path, cfg, w);
    if (o_width->count())
      w = width;
    if (o_epochs->count()) {
      cfg.epochs = epochs;
      cfg.warmup_epochs = std::min(cfg.warmup_epochs, epochs);
    }
    if (o_batch->count())
      cfg.batch_size = batch;
    if (o_accum->count())
      cfg.grad_accum_steps = accum;
    if (o_lr->count()) {
      cfg.base_lr = static_cast<Real>(lr);
      cfg.min_lr = cfg.base_lr / 100;
    }
    if (o_seed->count())
      cfg.seed = seed;
    cfg.validate();
    ModelConfig mc;
    mc.base_width = w;
    mc.validate();
    if (!data.given())
      throw UsageError("train: --data DIR or --synthetic is required");
    const std::vector<ImagePair> pairs = data.load();

    Network net = init_network(mc, cfg.seed);
    std::ofstream hist;
    if (!history.empty()) {
      hist.open(history);
      if (!hist)
        throw DataError("cannot write history " + history);
    }
    History h = train(net, pairs, cfg, [&](const StepRecord &r) {
      if (hist)
        hist << to_json_line(r) << "\n";
    });
    const double train_s = seconds_since(t0);
    const EvalResult fit = eval_model(net, pairs);

    json echo = {{"train", train_config_json(cfg)}, {"data", data.describe()}};
    save_checkpoint(net, out, echo);

    json rep = base_report("train", cfg.seed);
    rep["config"] = {{"preset", preset},
                     {"width", w},
                     {"params", net.param_count()},
                     {"train", train_config_json(cfg)},
                     {"data", data.describe()}};
    rep["metrics"]["train"] = metrics_json(fit);
    rep["metrics"]["steps"] = h.steps.size();
    if (!h.steps.empty())
      rep["metrics"]["final_loss"] = h.steps.back().loss.total;
    rep["metrics"]["epochs"] = json::array();
    for (const EpochRecord &e : h.epochs)
      rep["metrics"]["epochs"].push_back(
          {{"epoch", e.epoch}, {"loss", e.loss}, {"psnr", e.psnr}});
    rep["timings"] = {{"train_seconds", train_s}, {"total_seconds", seconds_since(t0)}};
    rep["artifacts"] = {{"checkpoint", out}};
    if (!history.empty())
      rep["artifacts"]["history"] = history;
    emit_report(rep, report);
    return kOk;
  }
};

struct QatCmd {
  std::string checkpoint, out, report;
  DataOptions data;
  int steps = 200;
  double lr = 1e-5;
  int batch = 8;
  std::uint64_t seed = 1;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("qat", "quantization-aware fine-tuning");
    cmd->add_option("--checkpoint", checkpoint, "trained FP32 checkpoint")->required();
    cmd->add_option("--out", out, "output QAT checkpoint")->required();
    cmd->add_option("--report", report);
    cmd->add_option("--steps", steps)->capture_default_str();
    cmd->add_option("--lr", lr)->capture_default_str();
    cmd->add_option("--batch-size", batch)->capture_default_str();
    cmd->add_option("--seed", seed)->capture_default_str();
    data.add(*cmd);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    const auto t0 = Clock::now();
    if (!data.given())
      throw UsageError("qat: --data DIR or --synthetic is required");
    const Network net = load_network(checkpoint, "qat");
    const std::vector<ImagePair> pairs = data.load();
    QatConfig cfg;
    cfg.steps = steps;
    cfg.lr = static_cast<Real>(lr);
    cfg.batch_size = batch;
    cfg.seed = seed;
    History h;
    QatNetwork qnet = qat_finetune(net, pairs, cfg, &h);
    save_checkpoint(qnet, out);

    const std::vector<ImagePair> held = data.held_out();
    json rep = base_report("qat", seed);
    rep["config"] = {{"steps", steps}, {"lr", lr}, {"batch_size", batch},
                     {"data", data.describe()}};
    rep["metrics"]["fp32"] = metrics_json(eval_model(net, held));
    rep["metrics"]["qat_fakequant"] = metrics_json(eval_model(qnet, held));
    rep["timings"] = {{"total_seconds", seconds_since(t0)}};
    rep["artifacts"] = {{"input", checkpoint}, {"checkpoint", out}};
    emit_report(rep, report);
    return kOk;
  }
};

struct ConvertCmd {
  std::string checkpoint, out, report, mode = "ptq";
  DataOptions data;
  int batch = 8;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("convert", "emit an INT8 graph (ptq or qat)");
    cmd->add_option("--checkpoint", checkpoint)->required();
    cmd->add_option("--mode", mode, "ptq or qat")
        ->check(CLI::IsMember({"ptq", "qat"}))
        ->capture_default_str();
    cmd->add_option("--out", out, "output INT8 checkpoint")->required();
    cmd->add_option("--report", report);
    cmd->add_option("--batch-size", batch, "calibration batch size")
        ->capture_default_str();
    data.add(*cmd);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    const auto t0 = Clock::now();
    Model m = load_checkpoint(checkpoint);
    std::optional<QatNetwork> qnet;
    if (mode == "ptq") {
      if (!data.given())
        throw UsageError("convert --mode ptq needs calibration data (--data or --synthetic)");
      Network net = std::holds_alternative<Network>(m)
                        ? std::get<Network>(m)
                        : load_network(checkpoint, "convert");
      qnet.emplace(calibrate_ptq(net, data.load(), batch));
    } else {
      if (!std::holds_alternative<QatNetwork>(m))
        throw DataError("convert --mode qat needs a QAT checkpoint; " +
                        checkpoint + " holds " + model_kind(m));
      qnet.emplace(std::move(std::get<QatNetwork>(m)));
    }
    const Int8Graph graph = convert_int8(*qnet);
    save_checkpoint(graph, out, {{"mode", mode}});

    json rep = base_report("convert", 0);
    rep["config"] = {{"mode", mode}};
    if (data.given()) {
      const std::vector<ImagePair> held = data.held_out();
      rep["config"]["data"] = data.describe();
      rep["metrics"]["fp32"] = metrics_json(eval_model(qnet->network(), held));
      rep["metrics"]["int8"] = metrics_json(eval_model(graph, held));
    }
    std::size_t fp32_bytes = 0;
    qnet->network().visit([&](const std::string &, const Tensor &t) {
      fp32_bytes += t.numel() * sizeof(float);
    });
    rep["metrics"]["fp32_weight_bytes"] = fp32_bytes;
    rep["metrics"]["int8_weight_bytes"] = graph.weight_bytes();
    rep["metrics"]["ops"] = graph.ops.size();
    rep["timings"] = {{"total_seconds", seconds_since(t0)}};
    rep["artifacts"] = {{"input", checkpoint}, {"checkpoint", out}};
    emit_report(rep, report);
    return kOk;
  }
};

std::function<Tensor(const Tensor &)> engine(Model &m) {
  if (auto *n = std::get_if<Network>(&m))
    return [n](const Tensor &x) { return network_infer(*n, x); };
  if (auto *q = std::get_if<QatNetwork>(&m))
    return [q](const Tensor &x) { return q->infer(x); };
  auto *g = std::get_if<Int8Graph>(&m);
  return [g](const Tensor &x) { return g->run(x); };
}

struct InferCmd {
  std::string checkpoint, input, output, report;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("infer", "enhance one PNG");
    cmd->add_option("--checkpoint", checkpoint)->required();
    cmd->add_option("--input", input)->required();
    cmd->add_option("--output", output)->required();
    cmd->add_option("--report", report);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    const auto t0 = Clock::now();
    Model m = load_checkpoint(checkpoint);
    const Tensor x = load_png(input);
    const Tensor y = run_padded(engine(m), x);
    save_png(y, output);
    json rep = base_report("infer", 0);
    rep["config"] = {{"engine", model_kind(m)}};
    rep["metrics"] = {{"height", x.shape().h}, {"width", x.shape().w}};
    rep["timings"] = {{"total_seconds", seconds_since(t0)}};
    rep["artifacts"] = {{"checkpoint", checkpoint}, {"input", input}, {"output", output}};
    emit_report(rep, report);
    return kOk;
  }
};

struct EvalCmd {
  std::string checkpoint, report;
  DataOptions data;
  bool identity = false;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("eval", "mean PSNR/SSIM on paired data");
    cmd->add_option("--checkpoint", checkpoint);
    cmd->add_flag("--targets", identity, "score targets against themselves");
    cmd->add_option("--report", report);
    data.add(*cmd);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    const auto t0 = Clock::now();
    if (!data.given())
      throw UsageError("eval: --data DIR or --synthetic is required");
    const std::vector<ImagePair> pairs = data.load();
    json rep = base_report("eval", data.data_seed);
    rep["config"] = {{"data", data.describe()}};
    if (identity) {
      std::vector<ImagePair> same;
      for (const ImagePair &p : pairs)
        same.push_back({p.high, p.high});
      rep["metrics"]["targets"] =
          metrics_json(evaluate([](const Tensor &x) { return x; }, same));
    } else {
      if (checkpoint.empty())
        throw UsageError("eval: --checkpoint is required unless --targets is given");
      Model m = load_checkpoint(checkpoint);
      rep["config"]["engine"] = model_kind(m);
      rep["metrics"][model_kind(m)] = metrics_json(evaluate(engine(m), pairs));
      rep["artifacts"] = {{"checkpoint", checkpoint}};
    }
    rep["metrics"]["input"] =
        metrics_json(evaluate([](const Tensor &x) { return x; }, pairs));
    rep["timings"] = {{"total_seconds", seconds_since(t0)}};
    emit_report(rep, report);
    return kOk;
  }
};

struct GradcheckCmd {
  GradcheckOptions opts;
  std::string precision = "f64";
  std::string report;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    cmd->add_option("--width", opts.width)->capture_default_str();
    cmd->add_option("--size", opts.size)->capture_default_str();
    cmd->add_option("--step", opts.step)->capture_default_str();
    cmd->add_option("--tolerance", opts.tolerance)->capture_default_str();
    cmd->add_option("--min-step", opts.min_step,
                    "smallest retry step for kink-crossing entries")
        ->capture_default_str();
    cmd->add_option("--seed", opts.seed)->capture_default_str();
    cmd->add_option("--max-per-group", opts.max_per_group,
                    "entries checked per tensor, 0 = all")
        ->capture_default_str();
    cmd->add_option("--precision", precision, "f64 or f32")
        ->check(CLI::IsMember({"f64", "f32"}))
        ->capture_default_str();
    cmd->add_flag("--corrupt-adjoint", opts.corrupt_adjoint,
                  "test hook: perturb the conv adjoint");
    cmd->add_option("--report", report);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    const auto t0 = Clock::now();
    const GradcheckResult r =
        precision == "f64" ? run_gradcheck_f64(opts) : run_gradcheck_f32(opts);
    json rep = base_report("gradcheck", opts.seed);
    rep["config"] = {{"width", opts.width},
                     {"size", opts.size},
                     {"step", opts.step},
                     {"min_step", opts.min_step},
                     {"tolerance", opts.tolerance},
                     {"precision", r.precision},
                     {"max_per_group", opts.max_per_group},
                     {"corrupt_adjoint", opts.corrupt_adjoint}};
    json groups = json::array();
    for (const GroupError &g : r.groups)
      groups.push_back({{"name", g.name}, {"checked", g.checked}, {"rel_error", g.rel_error},
                        {"analytic_norm", g.analytic_norm}});
    rep["metrics"] = {{"max_rel_error", r.max_rel_error},
                      {"worst_group", r.worst_group},
                      {"checked", r.checked},
                      {"refined", r.refined},
                      {"excluded", r.excluded},
                      {"passed", r.passed},
                      {"groups", groups}};
    rep["timings"] = {{"total_seconds", seconds_since(t0)}};
    emit_report(rep, report);
    return r.passed ? kOk : kNumeric;
  }
};

struct ReportCmd {
  std::string report;
  int code = kOk;

  void add(CLI::App &app) {
    auto *cmd = app.add_subcommand("report", "parameter counts across widths");
    cmd->add_option("--report", report);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    json rep = base_report("report", 0);
    json counts = json::object();
    std::map<int, std::size_t> n;
    for (int c : {16, 24, 32, 64}) {
      ModelConfig mc;
      mc.base_width = c;
      n[c] = param_count(mc);
      counts[std::to_string(c)] = n[c];
    }
    rep["metrics"] = {
        {"param_count", counts},
        {"ratio_32_16", static_cast<double>(n[32]) / static_cast<double>(n[16])},
        {"ratio_64_32", static_cast<double>(n[64]) / static_cast<double>(n[32])}};
    emit_report(rep, report);
    return kOk;
  }
};

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"qatie: quantization-aware image enhancement"};
  app.require_subcommand(1);
  TrainCmd train_cmd;
  QatCmd qat_cmd;
  ConvertCmd convert_cmd;
  InferCmd infer_cmd;
  EvalCmd eval_cmd;
  GradcheckCmd gradcheck_cmd;
  ReportCmd report_cmd;
  train_cmd.add(app);
  qat_cmd.add(app);
  convert_cmd.add(app);
  infer_cmd.add(app);
  eval_cmd.add(app);
  gradcheck_cmd.add(app);
  report_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kUsage;
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const qatie::NumericError &e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const qatie::FormatError &e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const qatie::DataError &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  for (int code : {train_cmd.code, qat_cmd.code, convert_cmd.code, infer_cmd.code,
                   eval_cmd.code, gradcheck_cmd.code, report_cmd.code})
    if (code != kOk)
      return code;
  return kOk;
}
