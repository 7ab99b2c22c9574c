#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "wmlab/checkpoint.hpp"
#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/pipeline.hpp"

namespace py = pybind11;
using namespace wmlab;
using nlohmann::json;

namespace {

json to_cpp(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

ExperimentConfig config_of(const py::object& cfg) {
  if (py::isinstance<py::str>(cfg)) return load_config(cfg.cast<std::string>());
  return parse_config(to_cpp(cfg));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

}  // namespace

PYBIND11_MODULE(_wmlab, m) {
  m.doc() = "Watermark embedding, attack and landscape experiments";
  m.attr("__version__") = kSoftwareVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);

  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("tag"));

  m.def(
      "resolve_config", [](const py::object& cfg) { return to_py(to_json(config_of(cfg))); }, py::arg("config"),
      "Canonical config with every default filled in. Accepts a dict or a path.");

  m.def(
      "train",
      [](const py::object& cfg, const std::string& out) {
        const auto c = config_of(cfg);
        TrainOutcome r;
        {
          py::gil_scoped_release nogil;
          r = cmd_train(c, out);
        }
        return py::dict(py::arg("wsr") = r.wsr, py::arg("ba") = r.ba, py::arg("checkpoint") = r.checkpoint.string(),
                        py::arg("report_csv") = r.report.to_csv());
      },
      py::arg("config"), py::arg("out"));

  m.def(
      "attack",
      [](const py::object& cfg, const std::string& checkpoint, const std::string& out) {
        const auto c = config_of(cfg);
        std::vector<AttackOutcome> rs;
        {
          py::gil_scoped_release nogil;
          rs = cmd_attack(c, checkpoint, out);
        }
        py::list l;
        for (const auto& r : rs)
          l.append(py::dict(py::arg("attack") = r.report.attack, py::arg("wsr_before") = r.report.wsr_before,
                            py::arg("wsr_after") = r.report.wsr_after(), py::arg("ba_before") = r.report.ba_before,
                            py::arg("ba_after") = r.report.ba_after(), py::arg("checkpoint") = r.checkpoint.string()));
        return l;
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"));

  m.def(
      "evaluate",
      [](const py::object& cfg, const std::string& checkpoint, const std::string& out) {
        const auto c = config_of(cfg);
        json r;
        {
          py::gil_scoped_release nogil;
          r = cmd_evaluate(c, checkpoint, out);
        }
        return to_py(r);
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"));

  m.def(
      "landscape",
      [](const py::object& cfg, const std::string& checkpoint, const std::string& out, double tol) {
        const auto c = config_of(cfg);
        LandscapeGrid g;
        {
          py::gil_scoped_release nogil;
          g = cmd_landscape(c, checkpoint, out, tol);
        }
        py::dict d;
        d["alphas"] = g.alphas;
        d["betas"] = g.betas;
        py::array_t<double> w({g.betas.size(), g.alphas.size()}), b({g.betas.size(), g.alphas.size()});
        for (std::size_t k = 0; k < g.cells.size(); ++k) {
          w.mutable_data()[k] = g.cells[k].wsr;
          b.mutable_data()[k] = g.cells[k].ba;
        }
        d["wsr"] = w;
        d["ba"] = b;
        d["erase_radius"] = g.erase_radius();
        return d;
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"), py::arg("origin_tolerance") = 0.005);

  m.def(
      "report",
      [](const std::vector<std::string>& manifests, const std::string& out) {
        std::vector<std::filesystem::path> ps(manifests.begin(), manifests.end());
        return cmd_report(ps, out);
      },
      py::arg("manifests"), py::arg("out"));

  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        const auto l = load_checkpoint(path);
        py::dict params;
        for (std::size_t i = 0; i < l.model.params.count(); ++i)
          params[py::str(l.model.params.name(i))] = to_array(l.model.params[i]);
        return py::dict(py::arg("params") = params, py::arg("num_classes") = l.model.num_classes(),
                        py::arg("input_shape") = l.model.input_shape, py::arg("checksum") = model_checksum(l.model),
                        py::arg("sidecar") = to_py(l.sidecar));
      },
      py::arg("path"));

  m.def("wsr_from_predictions", &wsr_from_predictions, py::arg("predictions"), py::arg("ground_truth"),
        py::arg("target"));

  m.def(
      "ew_reweight",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, double t) {
        return to_array(ew_reweight(from_array(a), t));
      },
      py::arg("values"), py::arg("temperature"));
}
