#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "devolve/codec.hpp"
#include "devolve/data_io.hpp"
#include "devolve/de_engine.hpp"
#include "devolve/divergence.hpp"
#include "devolve/network.hpp"
#include "devolve/quantizer.hpp"
#include "devolve/training.hpp"

namespace devolve {

/// Schema violation in a run configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::optional<SyntheticSpec> synthetic;
  std::string train_images;
  std::string train_labels;
  std::string test_images;  // optional; otherwise a split of the training data
  std::string test_labels;
  std::optional<std::size_t> test_size;   // default: a fifth of the samples
  std::optional<std::size_t> probe_size;  // default: min(1024, training samples)
};

struct OutputConfig {
  std::string dir = ".";
  std::string teacher = "teacher.devn";
  std::string student = "student.devn";
  std::string mask = "student.mask";
  std::string history = "history.csv";
  std::string quantized = "quantized.devn";
  std::string packed = "model.devp";
  std::string unpacked = "unpacked.devn";

  /// `name` resolved against `dir` unless absolute.
  std::string path(const std::string& name) const;
};

struct RunConfig {
  std::uint64_t master_seed = 0;
  std::optional<nlohmann::json> architecture;
  std::string model_path;  // pretrained teacher; takes the place of output.teacher
  DataConfig data;
  TrainOptions train;
  DEConfig de;
  DivergenceSpec divergence;
  QuantConfig quantization;
  std::map<std::size_t, QuantConfig> quantization_layers;
  OutputConfig output;

  std::string teacher_path() const { return model_path.empty() ? output.path(output.teacher) : model_path; }
};

/// Validates a configuration document and fills defaults. Unknown keys,
/// wrong types and out-of-range values raise ConfigError naming the key.
RunConfig parse_config(const nlohmann::json& doc);

/// Applies one `dotted.path=value` assignment. The value is read as JSON
/// when it parses, else as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load_config(const std::string& path, std::span<const std::string> overrides = {},
                      std::optional<std::size_t> workers = std::nullopt);

struct Datasets {
  Dataset train;
  Dataset test;
  Dataset probe;
};

Datasets prepare_data(const RunConfig& cfg);

/// Reads a DEVN model or a DEVP packed file.
Network load_any_model(const std::string& path);

/// Path of the per-trial CSV written next to a history CSV.
std::string trials_path(const std::string& history_path);

struct TrainSummary {
  Network network;
  std::vector<double> losses;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};
TrainSummary cmd_train(const RunConfig& cfg, std::ostream& log);

struct SparsifySummary {
  RunResult result;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
};
SparsifySummary cmd_sparsify(const RunConfig& cfg, std::ostream& log);

struct QuantizeSummary {
  QuantizedModel model;
  QuantizationReport report;
};
QuantizeSummary cmd_quantize(const RunConfig& cfg, std::ostream& log);

struct PackSummary {
  std::vector<std::uint8_t> bytes;
  CompressionReport report;
};
PackSummary cmd_pack(const RunConfig& cfg, std::ostream& log);

/// Restores a packed file (default output.packed) to a DEVN model.
Network cmd_unpack(const RunConfig& cfg, std::ostream& log, const std::string& input = "",
                   const std::string& out = "");

struct EvalSummary {
  double accuracy = 0.0;
  std::optional<double> divergence;
};
EvalSummary cmd_eval(const RunConfig& cfg, std::ostream& log, const std::string& model_path = "",
                     const std::string& teacher_path = "");

/// Summary table of a history CSV. Checks the per-layer sparsity column is
/// monotone and, when the trials CSV exists, that mean/std recompute.
std::vector<HistoryRow> cmd_report(const std::string& history_path, std::ostream& log);

}  // namespace devolve
