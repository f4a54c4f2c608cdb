#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "devolve/model_io.hpp"
#include "devolve/pipeline.hpp"

using namespace devolve;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json base_config() {
  return json::parse(R"({
    "master_seed": 3,
    "model": {"architecture": {"input_shape": [16], "layers": [
      {"type": "dense", "units": 12}, {"type": "relu"}, {"type": "dense", "units": 3}]}},
    "data": {"synthetic": {"kind": "blobs", "n": 300, "classes": 3, "dim": 16}, "probe_size": 64},
    "train": {"epochs": 8, "lr": 0.05},
    "de": {"target_sparsity": 0.5, "trials_per_cycle": 12, "step_fraction": 0.1},
    "quantization": {"scheme": "uniform_affine", "bits": 4}
  })");
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("devolve_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const json& doc) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << doc.dump(2);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config defaults and validation") {
  const RunConfig cfg = parse_config(base_config());
  CHECK(cfg.master_seed == 3);
  CHECK(cfg.de.master_seed == 3);
  CHECK(cfg.de.trials_per_cycle == 12);
  CHECK(cfg.quantization.bits == 4);
  CHECK(cfg.output.history == "history.csv");

  auto rejects = [](json doc, const std::string& fragment) {
    CAPTURE(fragment);
    try {
      parse_config(doc);
      FAIL("accepted");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  json d = base_config();
  d["de"]["tirals_per_cycle"] = 5;
  rejects(d, "de.tirals_per_cycle");
  d = base_config();
  d["bogus"] = 1;
  rejects(d, "bogus");
  d = base_config();
  d["quantization"]["bits"] = 17;
  rejects(d, "quantization.bits");
  d = base_config();
  d["quantization"]["scheme"] = "identity";
  d["quantization"]["bits"] = 16;
  rejects(d, "32 or 64");
  d = base_config();
  d["de"]["target_sparsity"] = 1.5;
  rejects(d, "de");
  d = base_config();
  d["model"]["architecture"]["layers"][0]["type"] = "dense2";
  rejects(d, "model.architecture");
  d = base_config();
  d["train"]["lr"] = "fast";
  rejects(d, "train.lr");
  d = base_config();
  d["quantization"]["layers"] = {{"x", {{"bits", 2}}}};
  rejects(d, "layer indices");
}

TEST_CASE("per-layer quantization inherits the global entry") {
  json d = base_config();
  d["quantization"]["layers"] = {{"2", {{"bits", 2}}}};
  const RunConfig cfg = parse_config(d);
  REQUIRE(cfg.quantization_layers.count(2) == 1);
  CHECK(cfg.quantization_layers.at(2).bits == 2);
  CHECK(cfg.quantization_layers.at(2).scheme == QuantScheme::UniformAffine);
}

TEST_CASE("overrides") {
  json d = base_config();
  apply_override(d, "de.trials_per_cycle=40");
  apply_override(d, "quantization.rounding=nearest");
  apply_override(d, "output.dir=elsewhere");
  const RunConfig cfg = parse_config(d);
  CHECK(cfg.de.trials_per_cycle == 40);
  CHECK(cfg.quantization.rounding == Rounding::Nearest);
  CHECK(cfg.output.dir == "elsewhere");
  CHECK_THROWS_AS(apply_override(d, "nonsense"), ConfigError);
  CHECK_THROWS_AS(apply_override(d, "de..x=1"), ConfigError);
  apply_override(d, "de.unknown=1");
  CHECK_THROWS_AS(parse_config(d), ConfigError);
}

TEST_CASE("load_config resolves paths and applies workers") {
  const fs::path dir = scratch("load");
  const std::string path = write_config(dir, base_config());
  const RunConfig cfg = load_config(path, {}, 3);
  CHECK(cfg.de.workers == 3);
  CHECK(fs::path(cfg.output.dir) == dir);
  CHECK_THROWS_AS(load_config((dir / "missing.json").string()), ConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_config((dir / "broken.json").string()), ConfigError);
  CHECK_THROWS_AS(load_config(path, {}, 0), ConfigError);
}

TEST_CASE("data preparation") {
  RunConfig cfg = parse_config(base_config());
  const Datasets d = prepare_data(cfg);
  CHECK(d.test.size() == 60);
  CHECK(d.train.size() == 240);
  CHECK(d.probe.size() == 64);
  cfg.data.probe_size = 1000;
  CHECK_THROWS_AS(prepare_data(cfg), ConfigError);
}

TEST_CASE("end-to-end commands") {
  const fs::path dir = scratch("e2e");
  const std::string path = write_config(dir, base_config());
  const RunConfig cfg = load_config(path);
  std::ostringstream log;

  const TrainSummary t = cmd_train(cfg, log);
  CHECK(t.test_accuracy > 0.9);
  CHECK(fs::exists(dir / "teacher.devn"));

  const SparsifySummary s = cmd_sparsify(cfg, log);
  CHECK(s.result.status == RunStatus::TargetReached);
  for (const char* f : {"student.devn", "student.mask", "history.csv", "history.trials.csv"}) CHECK(fs::exists(dir / f));
  const Network student = load_network((dir / "student.devn").string());
  const SparsityMask mask = load_mask((dir / "student.mask").string(), student);
  CHECK(apply_mask(student, mask) == student);

  const QuantizeSummary q = cmd_quantize(cfg, log);
  CHECK(q.report.lut_count == 2);
  CHECK(fs::exists(dir / "quantized.devn"));

  const PackSummary p = cmd_pack(cfg, log);
  CHECK(p.report.payload_ratio > 1.0);
  const Network restored = cmd_unpack(cfg, log);
  CHECK(restored == q.model.network);
  CHECK(load_network((dir / "unpacked.devn").string()) == restored);
  CHECK(load_any_model((dir / "model.devp").string()) == restored);

  const EvalSummary self = cmd_eval(cfg, log, (dir / "teacher.devn").string(), (dir / "teacher.devn").string());
  REQUIRE(self.divergence);
  CHECK(*self.divergence == 0.0);
  const EvalSummary packed = cmd_eval(cfg, log, (dir / "model.devp").string());
  CHECK(packed.accuracy > 0.5);

  std::ostringstream table;
  const auto rows = cmd_report(cfg.output.path(cfg.output.history), table);
  CHECK(rows.size() == s.result.history.size());
  CHECK(table.str().find("trials_checked=yes") != std::string::npos);

  SUBCASE("a rerun is byte-identical") {
    const fs::path again = scratch("e2e_again");
    const RunConfig cfg2 = load_config(write_config(again, base_config()));
    std::ostringstream sink;
    cmd_train(cfg2, sink);
    cmd_sparsify(cfg2, sink);
    cmd_pack(cfg2, sink);
    for (const char* f : {"teacher.devn", "student.devn", "student.mask", "history.csv", "history.trials.csv", "model.devp"})
      CHECK(slurp(dir / f) == slurp(again / f));
  }
  SUBCASE("report rejects tampered files") {
    const fs::path h = dir / "history.csv";
    std::string text = slurp(h);
    std::ofstream(dir / "empty.csv") << text.substr(0, text.find('\n') + 1);
    CHECK_THROWS(cmd_report((dir / "empty.csv").string(), table));
    CHECK_THROWS(cmd_report((dir / "nope.csv").string(), table));
    std::string trials = slurp(dir / "history.trials.csv");
    const auto line2 = trials.find('\n') + 1;
    const auto comma = trials.find(',', trials.find(',', line2) + 1);
    trials.insert(comma + 1, "9");
    std::ofstream(dir / "history.trials.csv", std::ios::trunc) << trials;
    CHECK_THROWS(cmd_report(h.string(), table));
  }
}

TEST_CASE("commands fail cleanly without inputs") {
  const fs::path dir = scratch("missing");
  const RunConfig cfg = load_config(write_config(dir, base_config()));
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_sparsify(cfg, log), std::runtime_error);
  CHECK_THROWS(cmd_unpack(cfg, log));
  json d = base_config();
  d["model"] = {{"path", "teacher.devn"}};
  const RunConfig no_arch = load_config(write_config(dir, d));
  CHECK_THROWS_AS(cmd_train(no_arch, log), ConfigError);
}
