// devolve: train, sparsify, quantize and pack small networks from a JSON config.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "devolve/pipeline.hpp"

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", c.config, "JSON run configuration");
  if (config_required) opt->required();
  cmd->add_option("--set", c.sets, "Override a config value, e.g. de.trials_per_cycle=1000");
  cmd->add_option("--workers", c.workers, "Trial evaluation threads (overrides de.workers)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Directed-evolution sparsification, quantization and packing"};
  app.require_subcommand(1);

  Common common;
  std::string model, teacher, input, output, history;

  auto* train = app.add_subcommand("train", "Train a teacher from scratch");
  auto* sparsify = app.add_subcommand("sparsify", "Run directed evolution on the teacher");
  auto* quantize = app.add_subcommand("quantize", "Quantize the sparse student and report the delta");
  auto* pack = app.add_subcommand("pack", "Quantize and write the packed model");
  auto* unpack = app.add_subcommand("unpack", "Restore a packed model to a dense model file");
  auto* eval = app.add_subcommand("eval", "Accuracy and divergence of a model file");
  auto* report = app.add_subcommand("report", "Summarize a history CSV");

  for (auto* cmd : {train, sparsify, quantize, pack, unpack, eval}) add_common(cmd, common);
  unpack->add_option("-i,--input", input, "Packed file (default: output.packed)");
  unpack->add_option("-o,--output", output, "Model file to write (default: output.unpacked)");
  eval->add_option("-m,--model", model, "Model or packed file (default: output.student)");
  eval->add_option("-t,--teacher", teacher, "Reference model for the divergence");
  add_common(report, common, false);
  report->add_option("--history", history, "History CSV (default: output.history from the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (report->parsed()) {
      if (history.empty()) {
        if (common.config.empty()) throw devolve::ConfigError("report needs --history or --config");
        const auto cfg = devolve::load_config(common.config, common.sets);
        history = cfg.output.path(cfg.output.history);
      }
      devolve::cmd_report(history, std::cout);
      return 0;
    }

    const devolve::RunConfig cfg = devolve::load_config(common.config, common.sets, common.workers);
    if (train->parsed()) devolve::cmd_train(cfg, std::cout);
    else if (sparsify->parsed()) devolve::cmd_sparsify(cfg, std::cout);
    else if (quantize->parsed()) devolve::cmd_quantize(cfg, std::cout);
    else if (pack->parsed()) devolve::cmd_pack(cfg, std::cout);
    else if (unpack->parsed()) devolve::cmd_unpack(cfg, std::cout, input, output);
    else if (eval->parsed()) devolve::cmd_eval(cfg, std::cout, model, teacher);
    return 0;
  } catch (const devolve::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
