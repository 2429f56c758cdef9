#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "issnet/checkpoint.hpp"
#include "issnet/config.hpp"
#include "issnet/data.hpp"
#include "issnet/errors.hpp"
#include "issnet/experiment.hpp"
#include "issnet/linalg.hpp"
#include "issnet/pathlog.hpp"
#include "issnet/training.hpp"

using namespace issnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("issnet-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::uint8_t> idx_bytes(std::uint8_t type, const std::vector<std::uint32_t>& dims,
                                    const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> b{0, 0, type, static_cast<std::uint8_t>(dims.size())};
  for (std::uint32_t d : dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(d >> s));
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

// Small synthetic classification run that touches every artifact.
ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.out = out;
  cfg.seed = 7;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.dataset.kind = "mnist";
  cfg.dataset.dir = ISSNET_DATA_DIR;
  cfg.dataset.train_limit = 200;
  cfg.dataset.test_limit = 100;
  cfg.network = NetworkSpec{{784}, {LayerSpec::dense(784, 16), LayerSpec::activation(Activation::relu),
                                    LayerSpec::dense(16, 10)}};
  cfg.lambda = 0.001;
  cfg.optimizer.nu = 1000;
  cfg.optimizer.variant = Variant::momentum;
  return cfg;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(ISSNET_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("gen_synthetic: determinism, support and noiseless exactness") {
  const SyntheticRegression a = gen_synthetic(100, 20, 3, 0.1, 5), b = gen_synthetic(100, 20, 3, 0.1, 5);
  CHECK(bitwise_equal(a.data.x, b.data.x));
  CHECK(bitwise_equal(a.data.y.values, b.data.y.values));
  CHECK(a.support.size() == 3);
  CHECK(count_nonzero(a.w_star) == 3);
  for (std::size_t j : a.support) CHECK(std::abs(a.w_star[j]) >= 1.0);
  CHECK_FALSE(bitwise_equal(a.data.x, gen_synthetic(100, 20, 3, 0.1, 6).data.x));

  // sigma = 0, s = d: y = X w* exactly, so w* zeroes the least-squares gradient.
  const SyntheticRegression c = gen_synthetic(30, 5, 5, 0.0, 9);
  Tensor residual = matmul(c.data.x, c.w_star.reshaped({5, 1})) - c.data.y.values;
  CHECK(max_abs(residual) <= 1e-12);
  CHECK_THROWS_AS(gen_synthetic(10, 5, 6, 0.1, 1), ArgumentError);
  CHECK_THROWS_AS(gen_synthetic(10, 5, 0, 0.1, 1), ArgumentError);
}

TEST_CASE("IDX: canonical header, truncation and bad magic") {
  const auto good = idx_bytes(0x08, {2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255});
  const IdxArray a = parse_idx(good);
  CHECK(a.type_code == 0x08);
  CHECK(a.dims == Shape{2, 2, 3});
  CHECK(a.values.size() == 12);
  CHECK(a.values[11] == 255.0);

  auto truncated = good;
  truncated.resize(truncated.size() - 2);
  try {
    parse_idx(truncated, "t");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected 28") != std::string::npos);
    CHECK(msg.find("found 26") != std::string::npos);
    CHECK(msg.find("offset 16") != std::string::npos);
  }
  auto bad = good;
  bad[1] = 1;
  CHECK_THROWS_AS(parse_idx(bad), FormatError);
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0}), FormatError);
  CHECK_THROWS_AS(read_idx("/nonexistent/file-idx3-ubyte"), NotFoundError);
}

TEST_CASE("IDX: first training image checksum matches the recorded reference") {
  const fs::path images = fs::path(ISSNET_DATA_DIR) / "train-images-idx3-ubyte";
  const fs::path labels = fs::path(ISSNET_DATA_DIR) / "train-labels-idx1-ubyte";
  // Independent reader: 16-byte header, then 28 x 28 bytes per image.
  const std::string raw = slurp(images);
  REQUIRE(raw.size() > 16 + 784);
  double independent = 0.0;
  for (std::size_t i = 0; i < 784; ++i) independent += static_cast<unsigned char>(raw[16 + i]) / 255.0;
  const std::string raw_labels = slurp(labels);

  const Dataset d = load_idx(images, labels);
  CHECK(d.x.shape() == Shape{8000, 784});
  double sum = 0.0;
  for (std::size_t i = 0; i < 784; ++i) sum += d.x[i];
  CHECK(sum == doctest::Approx(independent).epsilon(1e-15));
  CHECK(sum == doctest::Approx(106.74509803921569).epsilon(1e-14));
  CHECK(d.y.classes[0] == static_cast<unsigned char>(raw_labels[8]));
  CHECK(d.y.classes[0] == 8);
  const TrainTest tt = load_mnist_dir(ISSNET_DATA_DIR, ImageLayout::chw);
  CHECK(tt.test.x.shape() == Shape{2000, 1, 28, 28});
}

TEST_CASE("config: defaults, overlays, unknown keys and dotted overrides") {
  const ExperimentConfig def;
  CHECK(def.optimizer.kappa == 1.0);
  CHECK(def.optimizer.nu == 10.0);
  CHECK(def.optimizer.alpha.initial == 0.1);
  CHECK(def.lambda == 1.0);
  CHECK(def.batch_size == 128);

  Json j = to_json(def);
  set_path(j, "optimizer.nu", "100");
  set_path(j, "optimizer.variant", "momentum");
  set_path(j, "seed", "42");
  const ExperimentConfig c = config_from_json(j);
  CHECK(c.optimizer.nu == 100.0);
  CHECK(c.optimizer.variant == Variant::momentum);
  CHECK(c.seed == 42);
  CHECK(config_from_json(to_json(c)).optimizer.nu == 100.0);
  CHECK(to_json(config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(config_from_json(Json{{"bogus", 1}}), ArgumentError);
  CHECK_THROWS_AS(config_from_json(Json{{"optimizer", {{"kapa", 1}}}}), ArgumentError);
  CHECK(config_hash(to_json(c)) == config_hash(to_json(c)));
  CHECK(config_hash(to_json(c)).size() == 16);
  CHECK(config_hash(to_json(c)) != config_hash(to_json(def)));

  const NetworkSpec net{{1, 8, 8},
                        {LayerSpec::conv(1, 4, 3, 1, 1), LayerSpec::activation(Activation::softplus), LayerSpec::avg_pool(2),
                         LayerSpec::residual({LayerSpec::conv(4, 4, 3, 1, 1)}), LayerSpec::flatten(),
                         LayerSpec::dense(64, 3, false)},
                        LossKind::mse};
  CHECK(to_json(network_from_json(to_json(net))) == to_json(net));
}

TEST_CASE("checkpoint: bitwise round trip, f32 downcast, mask and corruption") {
  const fs::path dir = scratch("ckpt");
  SeededRng rng(3);
  Checkpoint ck;
  ck.epoch = 4;
  ck.seed = 99;
  ck.config_hash = "0123456789abcdef";
  ck.net = NetworkSpec{{1, 6, 6},
                       {LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::activation(Activation::relu), LayerSpec::flatten(),
                        LayerSpec::dense(108, 4, false)}};
  const ParamSet p = init_params(ck.net, rng);
  std::vector<std::optional<PenaltySpec>> pens{PenaltySpec{PenaltyKind::group_lasso, 0.5}, std::nullopt};
  ck.state = CoupledState::init(p, pens);
  for (auto& l : ck.state.layers)
    for (Tensor* t : {&l.v, &l.gamma, &l.g, &l.momentum, &l.bias_momentum})
      for (double& v : t->values()) v = rng.normal();
  ck.state.params[0].bias[1] = -0.0;
  ck.state.step = 1234;
  Mask m = weight_mask(ck.state);
  m.layers[0][5] = 0;
  ck.mask = m;

  const fs::path f = checkpoint_path(dir, 4);
  CHECK(f.filename() == "ckpt-epoch-0004.bin");
  save_checkpoint(f, ck);
  const Checkpoint back = load_checkpoint(f);
  CHECK(back.epoch == 4);
  CHECK(back.seed == 99);
  CHECK(back.config_hash == ck.config_hash);
  CHECK(back.state.step == 1234);
  CHECK(to_json(back.net) == to_json(ck.net));
  CHECK(bitwise_equal(back.state.params, ck.state.params));
  for (std::size_t i = 0; i < 2; ++i) {
    INFO("layer " << i);
    const auto &a = back.state.layers[i], &b = ck.state.layers[i];
    CHECK(a.penalty.has_value() == b.penalty.has_value());
    CHECK(bitwise_equal(a.v, b.v));
    CHECK(bitwise_equal(a.gamma, b.gamma));
    CHECK(bitwise_equal(a.g, b.g));
    CHECK(bitwise_equal(a.momentum, b.momentum));
    CHECK(bitwise_equal(a.bias_momentum, b.bias_momentum));
  }
  REQUIRE(back.mask.has_value());
  CHECK(back.mask->layers == ck.mask->layers);

  // Payload size equals the manifest's tensor table.
  const std::string bytes = slurp(f);
  const std::size_t nl = bytes.find('\n');
  const Json manifest = Json::parse(bytes.substr(0, nl));
  std::size_t declared = 0;
  for (const Json& t : manifest.at("tensors")) {
    std::size_t n = 8;
    for (const Json& d : t.at("shape")) n *= d.get<std::size_t>();
    CHECK(t.at("bytes").get<std::size_t>() == n);
    declared += n;
  }
  CHECK(manifest.at("byte_order") == "little");
  CHECK(bytes.size() - nl - 1 == manifest.at("payload_bytes").get<std::size_t>());
  CHECK(manifest.at("payload_bytes").get<std::size_t>() >= declared);

  save_checkpoint(dir / "f32.bin", ck, ElementType::f32);
  const Checkpoint narrow = load_checkpoint(dir / "f32.bin");
  for (std::size_t e = 0; e < ck.state.params[1].weight.size(); ++e)
    CHECK(narrow.state.params[1].weight[e] == static_cast<double>(static_cast<float>(ck.state.params[1].weight[e])));

  std::ofstream(dir / "cut.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.bin"), FormatError);
  std::ofstream(dir / "junk.bin", std::ios::binary) << "not a manifest\n";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.bin"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), NotFoundError);
}

TEST_CASE("path log: schema on every line, read back and line-numbered errors") {
  const fs::path dir = scratch("log");
  {
    PathLog log(dir / "path.jsonl");
    log.write({{"type", "header"}});
    PathRecord r;
    r.epoch = 1;
    r.loss = 0.5;
    r.metric = 0.9;
    r.layers.push_back({"L0", 3, 12, 4, 2, 1.5, 0.7, {1, 2, 3, 4}, {0, 0.5, 0, 0.25}});
    r.events.push_back({1, "L0", 4, 8, false});
    log.epoch(r);
  }
  for (const Json& line : read_log(dir / "path.jsonl")) CHECK(line.at("schema") == kPathSchema);
  const auto path = read_path(dir / "path.jsonl");
  REQUIRE(path.size() == 1);
  CHECK(path[0].layers[0].support == 3);
  CHECK(path[0].layers[0].gamma_group_norms[1] == 0.5);
  CHECK(path[0].events[0].new_width == 8);

  std::ofstream(dir / "path.jsonl", std::ios::app) << "{\"schema\": \"issnet.path.v1\", \"type\"\n";
  try {
    read_log(dir / "path.jsonl");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
}

TEST_CASE("export: header-only CSVs for an empty log, one row per epoch record") {
  const fs::path dir = scratch("export");
  { PathLog log(dir / "empty.jsonl"); }
  ExportSummary s = export_plot_data(dir / "empty.jsonl", dir / "empty");
  CHECK(s.rows == 0);
  CHECK(s.files.size() == 3);
  for (const fs::path& f : s.files) {
    const std::string text = slurp(f);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  }

  {
    PathLog log(dir / "run.jsonl");
    log.write({{"type", "header"}});
    for (std::size_t e = 1; e <= 3; ++e) {
      PathRecord r;
      r.epoch = e;
      r.layers.push_back({"L0", e, 12, 2, 1, 1.0, 0.5, {1.0, 2.0}, {0.0, 0.1 * e}});
      log.epoch(r);
    }
  }
  s = export_plot_data(dir / "run.jsonl", dir / "run");
  CHECK(s.rows == 3);
  for (const fs::path& f : s.files) {
    const std::string text = slurp(f);
    CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  }
  const std::string paths = slurp(dir / "run" / "paths.csv");
  CHECK(paths.rfind("epoch,L0/0/w,L0/0/gamma,L0/1/w,L0/1/gamma\n", 0) == 0);
  const std::string sa = slurp(dir / "run" / "sparsity_accuracy.csv");
  CHECK(sa.rfind("epoch,loss,metric,support_fraction\n", 0) == 0);
}

TEST_CASE("run: zero epochs writes the initial checkpoint and a log without epoch records") {
  const fs::path out = scratch("run0");
  ExperimentConfig cfg = tiny_config(out);
  cfg.epochs = 0;
  const RunSummary s = run(cfg);
  CHECK(fs::exists(checkpoint_path(out, 0)));
  CHECK(read_path(out / "path.jsonl").empty());
  CHECK(fs::exists(out / "report.json"));
  const auto log = read_log(out / "path.jsonl");
  CHECK(log.front().at("type") == "header");
  CHECK(log.front().at("seed") == 7);
  CHECK(load_checkpoint(checkpoint_path(out, 0)).seed == 7);
  CHECK(s.report.at("seed") == 7);
}

TEST_CASE("run: same config and seed give bitwise-identical logs and checkpoints") {
  const fs::path a = scratch("det-a"), b = scratch("det-b");
  ExperimentConfig ca = tiny_config(a), cb = tiny_config(b);
  run(ca);
  run(cb);
  CHECK(slurp(a / "path.jsonl") == slurp(b / "path.jsonl"));
  CHECK(slurp(checkpoint_path(a, 2)) == slurp(checkpoint_path(b, 2)));
  CHECK(read_path(a / "path.jsonl").size() == 2);

  // Replaying from the epoch-0 checkpoint reproduces the trained state.
  const Checkpoint c0 = load_checkpoint(checkpoint_path(a, 0));
  CHECK(c0.state.step == 0);
  CHECK(load_checkpoint(checkpoint_path(a, 2)).state.step > 0);
}

TEST_CASE("run: errors are appended to the log and rethrown") {
  const fs::path out = scratch("run-err");
  ExperimentConfig cfg = tiny_config(out);
  cfg.task = Task::ticket;
  cfg.ticket.source = out / "nowhere";
  CHECK_THROWS_AS(run(cfg), NotFoundError);
  const auto log = read_log(out / "path.jsonl");
  CHECK(log.back().at("type") == "error");
  CHECK(log.back().at("kind") == "data");
}

TEST_CASE("exit codes: library errors map onto the documented codes") {
  CHECK(exit_code_for(FormatError("x")) == kExitData);
  CHECK(exit_code_for(NotFoundError("x")) == kExitData);
  CHECK(exit_code_for(NumericError("x")) == kExitNumeric);
  CHECK(exit_code_for(ArgumentError("x")) == kExitUsage);
}

TEST_CASE("cli: subcommands and exit codes") {
  const fs::path out = scratch("cli");
  CHECK(run_cli("") == 1);
  CHECK(run_cli("train --no-such-flag") == 1);
  CHECK(run_cli("diagnose --seed 3 --out " + (out / "diag").string()) == 0);
  CHECK(fs::exists(out / "diag" / "lyapunov.csv"));
  CHECK(run_cli("ticket --out " + (out / "t").string() + " --source " + (out / "none").string()) == 2);
  // Far above the step bound the diagnostics fail: numeric exit.
  CHECK(run_cli("diagnose --out " + (out / "bad").string() + " --set diagnose.step_fraction=3 --set diagnose.steps=50") ==
        3);
  const std::string cfg = (out / "cfg.json").string();
  std::ofstream(cfg) << R"({"epochs": 1, "dataset": {"dir": ")" << ISSNET_DATA_DIR
                     << R"(", "train_limit": 100, "test_limit": 50}, "seed": 5})";
  CHECK(run_cli("train --config " + cfg + " --epochs 0 --out " + (out / "train").string()) == 0);
  CHECK(load_checkpoint(checkpoint_path(out / "train", 0)).seed == 5);
  CHECK(read_path(out / "train" / "path.jsonl").empty());
  CHECK(run_cli("export --log " + (out / "train" / "path.jsonl").string() + " --out " + (out / "csv").string()) == 0);
  CHECK(fs::exists(out / "csv" / "paths.csv"));
}
