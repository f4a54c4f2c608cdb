#include "devolve/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

#include "devolve/bytes.hpp"
#include "devolve/model_io.hpp"
#include "devolve/random.hpp"

namespace devolve {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Schema helpers

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

const json& require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : "'" + where + "' must be an object");
  return j;
}

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) throw ConfigError("unknown key '" + join(where, key) + "'");
  }
}

std::uint64_t get_uint(const json& j, const std::string& where) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  throw ConfigError("'" + where + "' must be a nonnegative integer");
}

double get_double(const json& j, const std::string& where) {
  if (!j.is_number()) throw ConfigError("'" + where + "' must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError("'" + where + "' must be finite");
  return v;
}

bool get_bool(const json& j, const std::string& where) {
  if (!j.is_boolean()) throw ConfigError("'" + where + "' must be true or false");
  return j.get<bool>();
}

std::string get_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError("'" + where + "' must be a string");
  return j.get<std::string>();
}

std::size_t layer_key(const std::string& key, const std::string& where) {
  if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw ConfigError("'" + join(where, key) + "': layer keys must be layer indices");
  }
  return static_cast<std::size_t>(std::stoull(key));
}

template <class F>
void with(const json& obj, const char* key, F&& f) {
  if (auto it = obj.find(key); it != obj.end()) f(*it);
}

SyntheticSpec parse_synthetic(const json& j, std::uint64_t master) {
  const std::string w = "data.synthetic";
  require_object(j, w);
  reject_unknown(j, w, {"kind", "n", "classes", "dim", "noise", "seed"});
  SyntheticSpec s;
  s.seed = master;
  with(j, "kind", [&](const json& v) {
    const std::string k = get_string(v, w + ".kind");
    if (k == "blobs") s.kind = SyntheticKind::Blobs;
    else if (k == "rings") s.kind = SyntheticKind::Rings;
    else throw ConfigError("'" + w + ".kind' must be \"blobs\" or \"rings\"");
  });
  with(j, "n", [&](const json& v) { s.n = get_uint(v, w + ".n"); });
  with(j, "classes", [&](const json& v) { s.classes = get_uint(v, w + ".classes"); });
  with(j, "dim", [&](const json& v) { s.dim = get_uint(v, w + ".dim"); });
  with(j, "noise", [&](const json& v) { s.noise = get_double(v, w + ".noise"); });
  with(j, "seed", [&](const json& v) { s.seed = get_uint(v, w + ".seed"); });
  if (s.classes < 2) throw ConfigError("'" + w + ".classes' must be at least 2");
  if (s.n < s.classes) throw ConfigError("'" + w + ".n' must be at least the class count");
  if (s.dim < (s.kind == SyntheticKind::Rings ? 2u : 1u)) throw ConfigError("'" + w + ".dim' is too small");
  if (!(s.noise >= 0.0)) throw ConfigError("'" + w + ".noise' must be nonnegative");
  return s;
}

DataConfig parse_data(const json& j, std::uint64_t master) {
  require_object(j, "data");
  reject_unknown(j, "data", {"synthetic", "train_images", "train_labels", "test_images", "test_labels", "test_size",
                             "probe_size"});
  DataConfig d;
  with(j, "synthetic", [&](const json& v) { d.synthetic = parse_synthetic(v, master); });
  with(j, "train_images", [&](const json& v) { d.train_images = get_string(v, "data.train_images"); });
  with(j, "train_labels", [&](const json& v) { d.train_labels = get_string(v, "data.train_labels"); });
  with(j, "test_images", [&](const json& v) { d.test_images = get_string(v, "data.test_images"); });
  with(j, "test_labels", [&](const json& v) { d.test_labels = get_string(v, "data.test_labels"); });
  with(j, "test_size", [&](const json& v) { d.test_size = get_uint(v, "data.test_size"); });
  with(j, "probe_size", [&](const json& v) { d.probe_size = get_uint(v, "data.probe_size"); });

  const bool idx = !d.train_images.empty() || !d.train_labels.empty();
  if (d.synthetic.has_value() == idx) throw ConfigError("'data' needs exactly one of 'synthetic' or 'train_images'/'train_labels'");
  if (idx && (d.train_images.empty() || d.train_labels.empty())) throw ConfigError("'data.train_images' and 'data.train_labels' go together");
  if (d.test_images.empty() != d.test_labels.empty()) throw ConfigError("'data.test_images' and 'data.test_labels' go together");
  if (!d.test_images.empty() && d.test_size) throw ConfigError("'data.test_size' conflicts with test files");
  if (d.probe_size && *d.probe_size == 0) throw ConfigError("'data.probe_size' must be positive");
  return d;
}

TrainOptions parse_train(const json& j, std::uint64_t master) {
  require_object(j, "train");
  reject_unknown(j, "train", {"epochs", "lr", "batch_size"});
  TrainOptions t;
  t.seed = stream_seed(master, {0x7121});
  with(j, "epochs", [&](const json& v) { t.epochs = get_uint(v, "train.epochs"); });
  with(j, "lr", [&](const json& v) { t.lr = get_double(v, "train.lr"); });
  with(j, "batch_size", [&](const json& v) { t.batch_size = get_uint(v, "train.batch_size"); });
  if (!(t.lr > 0.0)) throw ConfigError("'train.lr' must be positive");
  if (t.batch_size == 0) throw ConfigError("'train.batch_size' must be positive");
  return t;
}

DEConfig parse_de(const json& j, std::uint64_t master) {
  const std::string w = "de";
  require_object(j, w);
  reject_unknown(j, w, {"trials_per_cycle", "step_fraction", "target_sparsity", "layer_targets", "divergence_budget",
                        "retrain_epochs", "retrain_lr", "retrain_batch", "scope", "include_bias", "workers",
                        "max_cycles", "stall_limit"});
  DEConfig c;
  c.master_seed = master;
  with(j, "trials_per_cycle", [&](const json& v) { c.trials_per_cycle = get_uint(v, w + ".trials_per_cycle"); });
  with(j, "step_fraction", [&](const json& v) { c.step_fraction = get_double(v, w + ".step_fraction"); });
  with(j, "target_sparsity", [&](const json& v) { c.target_sparsity = get_double(v, w + ".target_sparsity"); });
  with(j, "layer_targets", [&](const json& v) {
    require_object(v, w + ".layer_targets");
    for (const auto& [k, t] : v.items()) c.layer_targets[layer_key(k, w + ".layer_targets")] = get_double(t, w + ".layer_targets." + k);
  });
  with(j, "divergence_budget", [&](const json& v) {
    if (!v.is_null()) c.divergence_budget = get_double(v, w + ".divergence_budget");
  });
  with(j, "retrain_epochs", [&](const json& v) { c.retrain_epochs = get_uint(v, w + ".retrain_epochs"); });
  with(j, "retrain_lr", [&](const json& v) { c.retrain_lr = get_double(v, w + ".retrain_lr"); });
  with(j, "retrain_batch", [&](const json& v) { c.retrain_batch = get_uint(v, w + ".retrain_batch"); });
  with(j, "scope", [&](const json& v) {
    if (!v.is_array()) throw ConfigError("'" + w + ".scope' must be an array of layer indices");
    for (const auto& l : v) c.scope.push_back(get_uint(l, w + ".scope"));
  });
  with(j, "include_bias", [&](const json& v) { c.include_bias = get_bool(v, w + ".include_bias"); });
  with(j, "workers", [&](const json& v) { c.workers = get_uint(v, w + ".workers"); });
  with(j, "max_cycles", [&](const json& v) { c.max_cycles = get_uint(v, w + ".max_cycles"); });
  with(j, "stall_limit", [&](const json& v) { c.stall_limit = get_uint(v, w + ".stall_limit"); });
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("de: ") + e.what());
  }
  return c;
}

DivergenceSpec parse_divergence(const json& j) {
  require_object(j, "divergence");
  reject_unknown(j, "divergence", {"heads"});
  DivergenceSpec spec;
  with(j, "heads", [&](const json& v) {
    if (!v.is_array()) throw ConfigError("'divergence.heads' must be an array");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string w = "divergence.heads[" + std::to_string(i) + "]";
      require_object(v[i], w);
      reject_unknown(v[i], w, {"begin", "end", "divisor", "weight"});
      if (!v[i].contains("begin") || !v[i].contains("end")) throw ConfigError("'" + w + "' needs 'begin' and 'end'");
      DivergenceHead h;
      h.begin = get_uint(v[i]["begin"], w + ".begin");
      h.end = get_uint(v[i]["end"], w + ".end");
      with(v[i], "divisor", [&](const json& x) { h.divisor = get_double(x, w + ".divisor"); });
      with(v[i], "weight", [&](const json& x) { h.weight = get_double(x, w + ".weight"); });
      if (h.end <= h.begin) throw ConfigError("'" + w + "' must have begin < end");
      if (!(h.divisor > 0.0)) throw ConfigError("'" + w + ".divisor' must be positive");
      if (!(h.weight >= 0.0)) throw ConfigError("'" + w + ".weight' must be nonnegative");
      spec.heads.push_back(h);
    }
  });
  if (!spec.heads.empty() &&
      std::none_of(spec.heads.begin(), spec.heads.end(), [](const DivergenceHead& h) { return h.weight > 0.0; })) {
    throw ConfigError("'divergence.heads' needs at least one positive weight");
  }
  return spec;
}

QuantConfig parse_quant_entry(const json& j, const std::string& w, QuantConfig base, bool allow_layers) {
  require_object(j, w);
  if (allow_layers) reject_unknown(j, w, {"scheme", "bits", "rounding", "layers"});
  else reject_unknown(j, w, {"scheme", "bits", "rounding"});
  try {
    with(j, "scheme", [&](const json& v) { base.scheme = parse_scheme(get_string(v, w + ".scheme")); });
    with(j, "rounding", [&](const json& v) { base.rounding = parse_rounding(get_string(v, w + ".rounding")); });
  } catch (const std::invalid_argument& e) {
    throw ConfigError("'" + w + "': " + e.what());
  }
  const bool explicit_bits = j.contains("bits");
  with(j, "bits", [&](const json& v) { base.bits = static_cast<int>(get_uint(v, w + ".bits")); });
  if (base.scheme == QuantScheme::Identity) {
    if (!explicit_bits) base.bits = 32;
    if (base.bits != 32 && base.bits != 64) throw ConfigError("'" + w + ".bits' must be 32 or 64 for identity");
  } else if (base.bits < 1 || base.bits > 16) {
    throw ConfigError("'" + w + ".bits' must lie in [1,16]");
  }
  return base;
}

OutputConfig parse_output(const json& j) {
  require_object(j, "output");
  reject_unknown(j, "output", {"dir", "teacher", "student", "mask", "history", "quantized", "packed", "unpacked"});
  OutputConfig o;
  auto str = [&](const char* key, std::string& field) {
    with(j, key, [&](const json& v) {
      field = get_string(v, std::string("output.") + key);
      if (field.empty()) throw ConfigError(std::string("'output.") + key + "' must not be empty");
    });
  };
  str("dir", o.dir);
  str("teacher", o.teacher);
  str("student", o.student);
  str("mask", o.mask);
  str("history", o.history);
  str("quantized", o.quantized);
  str("packed", o.packed);
  str("unpacked", o.unpacked);
  return o;
}

// ---------------------------------------------------------------------------
// Output helpers

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

Network load_teacher(const RunConfig& cfg) {
  const std::string path = cfg.teacher_path();
  if (!fs::exists(path)) throw std::runtime_error("teacher model not found: " + path + " (run 'train' first)");
  return load_network(path);
}

std::pair<Network, SparsityMask> load_student(const RunConfig& cfg) {
  const std::string student_path = cfg.output.path(cfg.output.student);
  const std::string mask_path = cfg.output.path(cfg.output.mask);
  if (!fs::exists(student_path)) throw std::runtime_error("student model not found: " + student_path + " (run 'sparsify' first)");
  Network student = load_network(student_path);
  SparsityMask mask = fs::exists(mask_path) ? load_mask(mask_path, student) : SparsityMask(student);
  return {std::move(student), std::move(mask)};
}

double test_accuracy(const Network& net, const Dataset& test) { return accuracy(net, test.inputs, test.labels); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::string OutputConfig::path(const std::string& name) const {
  const fs::path p(name);
  return p.is_absolute() ? name : (fs::path(dir) / p).string();
}

RunConfig parse_config(const json& doc) {
  require_object(doc, "");
  reject_unknown(doc, "", {"master_seed", "model", "data", "train", "de", "divergence", "quantization", "output"});
  RunConfig cfg;
  with(doc, "master_seed", [&](const json& v) { cfg.master_seed = get_uint(v, "master_seed"); });
  with(doc, "model", [&](const json& v) {
    require_object(v, "model");
    reject_unknown(v, "model", {"architecture", "path"});
    with(v, "architecture", [&](const json& a) {
      require_object(a, "model.architecture");
      cfg.architecture = a;
    });
    with(v, "path", [&](const json& p) { cfg.model_path = get_string(p, "model.path"); });
    if (cfg.architecture && !cfg.model_path.empty()) throw ConfigError("'model' takes 'architecture' or 'path', not both");
  });
  if (cfg.architecture) {
    try {
      network_from_json(*cfg.architecture, 0);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("model.architecture: ") + e.what());
    }
  }
  if (doc.contains("data")) cfg.data = parse_data(doc["data"], cfg.master_seed);
  cfg.train = parse_train(doc.value("train", json::object()), cfg.master_seed);
  cfg.de = parse_de(doc.value("de", json::object()), cfg.master_seed);
  if (doc.contains("divergence")) cfg.divergence = parse_divergence(doc["divergence"]);

  QuantConfig q;
  q.seed = stream_seed(cfg.master_seed, {0x9a0});
  if (doc.contains("quantization")) {
    const json& j = doc["quantization"];
    q = parse_quant_entry(j, "quantization", q, true);
    with(j, "layers", [&](const json& v) {
      require_object(v, "quantization.layers");
      for (const auto& [k, entry] : v.items()) {
        cfg.quantization_layers[layer_key(k, "quantization.layers")] =
            parse_quant_entry(entry, "quantization.layers." + k, q, false);
      }
    });
  }
  cfg.quantization = q;
  if (doc.contains("output")) cfg.output = parse_output(doc["output"]);
  return cfg;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_config(const std::string& path, std::span<const std::string> overrides,
                      std::optional<std::size_t> workers) {
  json doc;
  {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (workers) {
    if (*workers == 0) throw ConfigError("--workers must be at least 1");
    apply_override(doc, "de.workers=" + std::to_string(*workers));
  }
  RunConfig cfg = parse_config(doc);
  // Relative paths in the config resolve against its directory.
  const fs::path base = fs::path(path).parent_path();
  auto rebase = [&](std::string& p) {
    if (p.empty() || !fs::path(p).is_relative()) return;
    fs::path q = (base / p).lexically_normal();
    if (!q.has_filename() && q.has_parent_path()) q = q.parent_path();  // "dir/." normalizes to "dir/"
    p = q.string();
  };
  rebase(cfg.model_path);
  rebase(cfg.data.train_images);
  rebase(cfg.data.train_labels);
  rebase(cfg.data.test_images);
  rebase(cfg.data.test_labels);
  rebase(cfg.output.dir);
  return cfg;
}

// ---------------------------------------------------------------------------
// Data

Datasets prepare_data(const RunConfig& cfg) {
  const DataConfig& d = cfg.data;
  Datasets out;
  if (d.synthetic) {
    Dataset all = synthetic_dataset(*d.synthetic);
    const std::size_t test = d.test_size.value_or(all.size() / 5);
    if (test == 0 || test >= all.size()) throw ConfigError("'data.test_size' must leave samples on both sides of the split");
    std::tie(out.train, out.test) = split(all, test, stream_seed(cfg.master_seed, {0x5b1}));
  } else if (!d.train_images.empty()) {
    Dataset all = load_idx_dataset(d.train_images, d.train_labels);
    if (!d.test_images.empty()) {
      out.train = std::move(all);
      out.test = load_idx_dataset(d.test_images, d.test_labels);
    } else {
      const std::size_t test = d.test_size.value_or(all.size() / 5);
      if (test == 0 || test >= all.size()) throw ConfigError("'data.test_size' must leave samples on both sides of the split");
      std::tie(out.train, out.test) = split(all, test, stream_seed(cfg.master_seed, {0x5b1}));
    }
  } else {
    throw ConfigError("config has no 'data' section");
  }
  const std::size_t probe = d.probe_size.value_or(std::min<std::size_t>(1024, out.train.size()));
  if (probe > out.train.size()) {
    throw ConfigError("'data.probe_size' " + std::to_string(probe) + " exceeds the " + std::to_string(out.train.size()) +
                      " training samples");
  }
  out.probe = subset(out.train, probe, stream_seed(cfg.master_seed, {0x9b0e}));
  return out;
}

Network load_any_model(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("model file not found: " + path);
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "DEVP")) return unpack(bytes).network;
  return deserialize_network(bytes);
}

std::string trials_path(const std::string& history_path) {
  fs::path p(history_path);
  const std::string stem = p.stem().string();
  return (p.parent_path() / (stem + ".trials.csv")).string();
}

// ---------------------------------------------------------------------------
// Commands

TrainSummary cmd_train(const RunConfig& cfg, std::ostream& log) {
  if (!cfg.architecture) throw ConfigError("'train' needs 'model.architecture'");
  const Datasets data = prepare_data(cfg);
  TrainSummary s{network_from_json(*cfg.architecture, stream_seed(cfg.master_seed, {0x1a17})), {}, 0.0, 0.0};
  s.losses = train_classifier(s.network, data.train, cfg.train);
  s.train_accuracy = test_accuracy(s.network, data.train);
  s.test_accuracy = test_accuracy(s.network, data.test);
  const std::string path = cfg.output.path(cfg.output.teacher);
  ensure_parent(path);
  save_network(s.network, path);
  log << "train: params=" << s.network.parameter_count() << " epochs=" << cfg.train.epochs
      << " final_loss=" << (s.losses.empty() ? std::string("nan") : fmt(s.losses.back()))
      << " train_accuracy=" << fmt(s.train_accuracy) << " test_accuracy=" << fmt(s.test_accuracy) << " model=" << path
      << "\n";
  return s;
}

SparsifySummary cmd_sparsify(const RunConfig& cfg, std::ostream& log) {
  const Network teacher = load_teacher(cfg);
  const Datasets data = prepare_data(cfg);
  SparsifySummary s{run(teacher, data.probe.inputs, cfg.de, cfg.divergence), 0.0, 0.0};
  s.teacher_accuracy = test_accuracy(teacher, data.test);
  s.student_accuracy = test_accuracy(s.result.student, data.test);

  const std::string student_path = cfg.output.path(cfg.output.student);
  const std::string mask_path = cfg.output.path(cfg.output.mask);
  const std::string history_path = cfg.output.path(cfg.output.history);
  ensure_parent(student_path);
  save_network(s.result.student, student_path);
  ensure_parent(mask_path);
  save_mask(s.result.mask, mask_path);
  write_text(history_path, history_csv(s.result.history));
  write_text(trials_path(history_path), trials_csv(s.result.history));

  log << "sparsify: status=" << to_string(s.result.status) << " cycles=" << s.result.history.size();
  for (std::size_t l : cfg.de.scope_for(teacher)) {
    log << " layer" << l << "_sparsity=" << fmt(prunable_sparsity(s.result.mask, s.result.student, l, cfg.de.include_bias));
  }
  log << " network_sparsity=" << fmt(sparsity(s.result.mask, SparsityScope::Network))
      << " divergence=" << fmt(s.result.final_divergence) << " teacher_accuracy=" << fmt(s.teacher_accuracy)
      << " student_accuracy=" << fmt(s.student_accuracy) << " history=" << history_path << "\n";
  return s;
}

QuantizeSummary cmd_quantize(const RunConfig& cfg, std::ostream& log) {
  auto [student, mask] = load_student(cfg);
  const Datasets data = prepare_data(cfg);
  std::optional<Tensor> reference;
  if (fs::exists(cfg.teacher_path())) reference = forward(load_network(cfg.teacher_path()), data.test.inputs);

  QuantizeSummary s{quantize_network(student, mask, cfg.quantization, cfg.quantization_layers), {}};
  s.report = quantization_report(student, s.model, data.test.inputs, data.test.labels, reference);
  const std::string path = cfg.output.path(cfg.output.quantized);
  ensure_parent(path);
  save_network(s.model.network, path);
  log << "quantize: scheme=" << to_string(cfg.quantization.scheme) << " bits=" << cfg.quantization.bits
      << " rounding=" << to_string(cfg.quantization.rounding) << " luts=" << s.report.lut_count
      << " accuracy_before=" << fmt(s.report.accuracy_before) << " accuracy_after=" << fmt(s.report.accuracy_after)
      << " accuracy_delta=" << fmt(s.report.accuracy_after - s.report.accuracy_before);
  if (reference) {
    log << " divergence_before=" << fmt(s.report.divergence_before) << " divergence_after=" << fmt(s.report.divergence_after);
  }
  log << " model=" << path << "\n";
  for (std::size_t l : s.model.fallback_layers)
    log << "  warning: layer " << l << " has no level set meeting the spacing condition; using equal-mass levels\n";
  return s;
}

PackSummary cmd_pack(const RunConfig& cfg, std::ostream& log) {
  auto [student, mask] = load_student(cfg);
  const QuantizedModel q = quantize_network(student, mask, cfg.quantization, cfg.quantization_layers);
  PackSummary s{pack(q), {}};
  s.report = compression_report(student, s.bytes);
  const std::string path = cfg.output.path(cfg.output.packed);
  ensure_parent(path);
  write_file(path, s.bytes);
  log << "pack: parameters=" << s.report.parameters << " bytes=" << s.bytes.size()
      << " payload_bits=" << s.report.payload_bits << " payload_ratio=" << fmt(s.report.payload_ratio)
      << " total_ratio=" << fmt(s.report.total_ratio) << " file=" << path << "\n";
  for (std::size_t l : q.fallback_layers)
    log << "  warning: layer " << l << " has no level set meeting the spacing condition; using equal-mass levels\n";
  for (const auto& l : s.report.layers) {
    log << "  layer " << l.layer << ": params=" << l.parameters << " survivors=" << l.survivors
        << " mask=" << (l.mask_tag == MaskEncoding::Bitmap ? "bitmap" : "runs") << "/" << l.mask_bytes << "B"
        << " payload_bits=" << l.payload_bits << " avg_code=" << fmt(l.average_code_length, 4)
        << " entropy=" << fmt(l.entropy, 4) << "\n";
  }
  return s;
}

Network cmd_unpack(const RunConfig& cfg, std::ostream& log, const std::string& input, const std::string& out) {
  const std::string in_path = input.empty() ? cfg.output.path(cfg.output.packed) : input;
  const std::string out_path = out.empty() ? cfg.output.path(cfg.output.unpacked) : out;
  if (!fs::exists(in_path)) throw std::runtime_error("packed file not found: " + in_path);
  const QuantizedModel q = unpack(read_file(in_path));
  ensure_parent(out_path);
  save_network(q.network, out_path);
  log << "unpack: layers=" << q.layers.size() << " params=" << q.network.parameter_count() << " model=" << out_path
      << "\n";
  return q.network;
}

EvalSummary cmd_eval(const RunConfig& cfg, std::ostream& log, const std::string& model_path,
                     const std::string& teacher_path) {
  const std::string path = model_path.empty() ? cfg.output.path(cfg.output.student) : model_path;
  const Network net = load_any_model(path);
  const Datasets data = prepare_data(cfg);
  EvalSummary s;
  s.accuracy = test_accuracy(net, data.test);
  if (!teacher_path.empty()) {
    const Network teacher = load_any_model(teacher_path);
    s.divergence = divergence(forward(net, data.test.inputs), forward(teacher, data.test.inputs), cfg.divergence);
  }
  log << "eval: model=" << path << " samples=" << data.test.size() << " accuracy=" << fmt(s.accuracy);
  if (s.divergence) log << " divergence=" << fmt(*s.divergence);
  log << "\n";
  return s;
}

std::vector<HistoryRow> cmd_report(const std::string& history_path, std::ostream& log) {
  if (!fs::exists(history_path)) throw std::runtime_error("history file not found: " + history_path);
  std::vector<HistoryRow> rows = parse_history_csv(read_text(history_path));
  if (rows.empty()) throw std::runtime_error("history is empty: " + history_path);

  std::map<std::size_t, double> last;
  for (const HistoryRow& r : rows) {
    auto it = last.find(r.layer);
    if (r.sparsity_after < r.sparsity_before || (it != last.end() && r.sparsity_before < it->second)) {
      throw std::runtime_error("sparsity is not monotone at cycle " + std::to_string(r.cycle));
    }
    last[r.layer] = r.sparsity_after;
  }

  const std::string tpath = trials_path(history_path);
  if (fs::exists(tpath)) {
    std::map<std::size_t, std::vector<double>> trials;
    std::istringstream in(read_text(tpath));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::size_t cycle = 0, trial = 0;
      double d = 0.0;
      if (std::sscanf(line.c_str(), "%zu,%zu,%lf", &cycle, &trial, &d) != 3) throw std::runtime_error("malformed trials row: " + line);
      trials[cycle].push_back(d);
    }
    for (const HistoryRow& r : rows) {
      const auto& t = trials[r.cycle];
      if (t.size() != r.trials) throw std::runtime_error("trial count mismatch at cycle " + std::to_string(r.cycle));
      const CycleRecord rec = summarize_trials(t);
      if (std::abs(rec.mean - r.mean) > 1e-9 || std::abs(rec.std - r.std) > 1e-9 ||
          std::abs(rec.best_divergence - r.best) > 1e-9) {
        throw std::runtime_error("recomputed statistics disagree with history at cycle " + std::to_string(r.cycle));
      }
    }
  }

  char buf[160];
  std::snprintf(buf, sizeof buf, "%6s %5s %9s %12s %12s %12s %7s %12s\n", "cycle", "layer", "sparsity", "mean", "std",
                "best", "sigmas", "retrain_div");
  log << buf;
  for (const HistoryRow& r : rows) {
    const double sigmas = r.std > 0 ? (r.mean - r.best) / r.std : 0.0;
    std::snprintf(buf, sizeof buf, "%6zu %5zu %9.4f %12.6g %12.6g %12.6g %7.2f %12.6g\n", r.cycle, r.layer,
                  r.sparsity_after, r.mean, r.std, r.best, sigmas, r.retrain_divergence);
    log << buf;
  }
  log << "report: cycles=" << rows.size() << " trials_checked=" << (fs::exists(tpath) ? "yes" : "no") << "\n";
  return rows;
}

}  // namespace devolve
