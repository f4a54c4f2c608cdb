// Python bindings for the devolve core.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "devolve/codec.hpp"
#include "devolve/de_engine.hpp"
#include "devolve/model_io.hpp"
#include "devolve/pipeline.hpp"
#include "devolve/quantizer.hpp"

namespace py = pybind11;
using namespace devolve;

namespace {

std::string run_command(const std::string& command, const std::string& config, const std::vector<std::string>& sets,
                        std::optional<std::size_t> workers) {
  const RunConfig cfg = load_config(config, sets, workers);
  std::ostringstream log;
  if (command == "train") cmd_train(cfg, log);
  else if (command == "sparsify") cmd_sparsify(cfg, log);
  else if (command == "quantize") cmd_quantize(cfg, log);
  else if (command == "pack") cmd_pack(cfg, log);
  else if (command == "unpack") cmd_unpack(cfg, log);
  else if (command == "eval") cmd_eval(cfg, log);
  else throw std::invalid_argument("unknown command " + command);
  return log.str();
}

}  // namespace

PYBIND11_MODULE(_devolve, m) {
  m.doc() = "Directed-evolution sparsification, quantization and packing";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<OptimalLevelsError>(m, "OptimalLevelsError", PyExc_RuntimeError);

  m.def("combinations_count", [](std::uint64_t n, std::uint64_t k) {
    return py::int_(py::str(combinations_count(n, k).str()));
  }, py::arg("n"), py::arg("k"));

  py::class_<Density>(m, "Density")
      .def_static("from_values", [](const std::vector<double>& v, std::size_t bins) { return Density::from_values(v, bins); },
                  py::arg("values"), py::arg("bins") = 256)
      .def_static("uniform", &Density::uniform, py::arg("lo"), py::arg("hi"), py::arg("bins") = 256)
      .def_property_readonly("lo", &Density::lo)
      .def_property_readonly("hi", &Density::hi)
      .def_property_readonly("masses", &Density::masses)
      .def("__call__", &Density::operator(), py::arg("w"));

  m.def("uniform_levels", [](double lo, double hi, int bits, const std::string& scheme) {
    return uniform_levels(lo, hi, bits, parse_scheme(scheme));
  }, py::arg("lo"), py::arg("hi"), py::arg("bits"), py::arg("scheme") = "uniform_affine");
  m.def("optimal_levels", &optimal_levels, py::arg("density"), py::arg("bits"));
  m.def("equal_mass_levels", &equal_mass_levels, py::arg("density"), py::arg("bits"));
  m.def("max_interior_residual", [](const std::vector<double>& lv, const Density& d) { return max_interior_residual(lv, d); },
        py::arg("levels"), py::arg("density"));
  m.def("quantization_error", [](const std::vector<double>& lv, const Density& d) { return quantization_error(lv, d); },
        py::arg("levels"), py::arg("density"));

  m.def("huffman_lengths", [](const std::vector<std::uint64_t>& freqs) {
    const HuffmanTable t = huffman_build(freqs);
    std::vector<int> out(freqs.size());
    for (std::size_t s = 0; s < freqs.size(); ++s) out[s] = t.length(s);
    return out;
  }, py::arg("frequencies"));
  m.def("entropy_bits", [](const std::vector<std::uint64_t>& f) { return entropy_bits(f); }, py::arg("frequencies"));
  m.def("crc32", [](const py::bytes& b) {
    const std::string s = b;
    return crc32_ieee(std::vector<std::uint8_t>(s.begin(), s.end()));
  }, py::arg("data"));

  m.def("compression_report", [](const std::string& model, const std::string& packed) {
    const auto r = compression_report(load_network(model), read_file(packed));
    py::dict d;
    d["parameters"] = r.parameters;
    d["payload_bits"] = r.payload_bits;
    d["total_bits"] = r.total_bits;
    d["payload_ratio"] = r.payload_ratio;
    d["total_ratio"] = r.total_ratio;
    return d;
  }, py::arg("model"), py::arg("packed"));

  m.def("run", &run_command, py::arg("command"), py::arg("config"), py::arg("overrides") = std::vector<std::string>{},
        py::arg("workers") = std::nullopt,
        "Runs a pipeline command (train, sparsify, quantize, pack, unpack, eval) and returns its log.");
}
