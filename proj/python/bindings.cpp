#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "disdyn/cli.hpp"
#include "disdyn/datagen.hpp"
#include "disdyn/dynsys.hpp"
#include "disdyn/errors.hpp"
#include "disdyn/evalkit.hpp"
#include "disdyn/neural.hpp"
#include "disdyn/objective.hpp"

namespace py = pybind11;
using namespace disdyn;

namespace {

py::array_t<double> to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  py::array_t<double> a(shape);
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

std::vector<double> flat(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict dataset_dict(const datagen::Dataset& ds) {
  const auto n = static_cast<py::ssize_t>(ds.size());
  const auto T = static_cast<py::ssize_t>(ds.seq_len());
  const auto d = static_cast<py::ssize_t>(ds.state_dim());
  const auto k = static_cast<py::ssize_t>(ds.factor_count());
  std::vector<double> states, noisy, factors;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    states.insert(states.end(), ds.trajectories[i].states.begin(), ds.trajectories[i].states.end());
    noisy.insert(noisy.end(), ds.noisy_states[i].begin(), ds.noisy_states[i].end());
    factors.insert(factors.end(), ds.trajectories[i].factors.values.begin(), ds.trajectories[i].factors.values.end());
  }
  py::dict out;
  out["system"] = std::string(dynsys::to_string(ds.system));
  out["split"] = std::string(datagen::to_string(ds.spec.split));
  out["states"] = to_array(states, {n, T, d});
  out["noisy"] = to_array(noisy, {n, T, d});
  out["factors"] = to_array(factors, {n, k});
  out["factor_names"] = dynsys::factor_names(ds.system);
  out["seed"] = ds.seed;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "disdyn core: simulators, datasets, models and evaluation";

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "integrate",
      [](const std::string& system, const std::vector<double>& factors, const std::vector<double>& initial,
         std::size_t n_steps, double tolerance) {
        const auto kind = dynsys::parse_system(system);
        const auto fv = dynsys::make_factors(kind, factors);
        dynsys::IntegratorOptions opts;
        opts.tolerance = tolerance;
        dynsys::Trajectory t;
        {
          py::gil_scoped_release release;
          t = dynsys::integrate(kind, fv, initial, n_steps, dynsys::kOutputStep, opts);
        }
        return to_array(t.states, {static_cast<py::ssize_t>(t.steps), static_cast<py::ssize_t>(t.dim)});
      },
      py::arg("system"), py::arg("factors"), py::arg("initial"), py::arg("n_steps"),
      py::arg("tolerance") = dynsys::kDefaultTolerance,
      "Integrate one trajectory sampled every 0.01 s; returns an (n_steps, state_dim) array.");

  m.def("factor_names", [](const std::string& system) { return dynsys::factor_names(dynsys::parse_system(system)); });

  m.def(
      "generate_split",
      [](const std::string& system, const std::string& split, std::uint64_t seed, std::optional<std::size_t> n_sequences,
         std::optional<std::size_t> seq_len, std::size_t workers) {
        const auto kind = dynsys::parse_system(system);
        auto spec = datagen::default_split(kind, datagen::parse_split(split));
        if (n_sequences) spec.n_sequences = *n_sequences;
        if (seq_len) spec.seq_len = *seq_len;
        datagen::BuildOptions opts;
        opts.workers = workers;
        datagen::Dataset ds;
        {
          py::gil_scoped_release release;
          ds = datagen::build_dataset(kind, spec, seed, opts);
        }
        return dataset_dict(ds);
      },
      py::arg("system"), py::arg("split"), py::arg("seed"), py::arg("n_sequences") = py::none(),
      py::arg("seq_len") = py::none(), py::arg("workers") = 1);

  m.def("read_dataset", [](const std::filesystem::path& dir) { return dataset_dict(datagen::read_dataset(dir)); });

  m.def(
      "reconstruction_nll",
      [](const std::vector<double>& x, const std::vector<double>& mu_x, double gamma) {
        return objective::reconstruction_nll(x, mu_x, gamma);
      },
      py::arg("x"), py::arg("mu_x"), py::arg("gamma"));
  m.def(
      "kl_term",
      [](const std::vector<double>& mu, const std::vector<double>& log_sigma) {
        return objective::kl_term({mu, log_sigma});
      },
      py::arg("mu"), py::arg("log_sigma"));
  m.def(
      "sd_loss",
      [](const std::vector<double>& mu_k, const std::vector<double>& xi, const std::string& scaling,
         const std::vector<std::pair<double, double>>& ranges) {
        std::vector<datagen::Range> r;
        for (const auto& [lo, hi] : ranges) r.push_back({lo, hi});
        return objective::sd_loss(mu_k, xi, neural::parse_scaling(scaling), r);
      },
      py::arg("mu_k"), py::arg("xi"), py::arg("scaling") = "none",
      py::arg("ranges") = std::vector<std::pair<double, double>>{});

  py::class_<neural::Model>(m, "Model")
      .def(py::init([](const std::string& spec_json) {
             return neural::Model(nlohmann::json::parse(spec_json).get<neural::ModelSpec>());
           }),
           py::arg("spec_json"))
      .def_static("load", [](const std::filesystem::path& dir) { return neural::Model::load(dir); })
      .def("save", [](const neural::Model& self, const std::filesystem::path& dir) { self.save(dir); })
      .def_property_readonly("spec_json", [](const neural::Model& self) { return nlohmann::json(self.spec()).dump(); })
      .def_property_readonly("parameter_count", &neural::Model::parameter_count)
      .def_property_readonly("input_steps", &neural::Model::input_steps)
      .def_property_readonly("output_steps", &neural::Model::output_steps)
      .def_property_readonly("state_dim", &neural::Model::state_dim)
      .def("parameter_names",
           [](const neural::Model& self) {
             std::vector<std::string> names;
             for (const auto& p : self.parameters()) names.push_back(p.name);
             return names;
           })
      .def(
          "predict",
          [](const neural::Model& self, const py::array_t<double, py::array::c_style | py::array::forcecast>& window) {
            const auto y = self.predict(flat(window));
            return to_array(y, {static_cast<py::ssize_t>(self.output_steps()), static_cast<py::ssize_t>(self.state_dim())});
          },
          py::arg("window"), "Predict the next output window from an (input_steps, state_dim) window.")
      .def(
          "encode",
          [](const neural::Model& self, const py::array_t<double, py::array::c_style | py::array::forcecast>& window) {
            const auto lat = self.encode(flat(window));
            return py::make_tuple(lat.mu, lat.log_sigma);
          },
          py::arg("window"));

  m.def(
      "rollout",
      [](const neural::Model& model, const py::array_t<double, py::array::c_style | py::array::forcecast>& seed,
         std::size_t horizon) {
        evalkit::RolloutResult r;
        const auto s = flat(seed);
        {
          py::gil_scoped_release release;
          r = evalkit::rollout(model, s, horizon);
        }
        py::object at = r.diverged_at ? py::object(py::int_(*r.diverged_at)) : py::object(py::none());
        return py::make_tuple(to_array(r.predicted.vector(), {static_cast<py::ssize_t>(horizon),
                                                              static_cast<py::ssize_t>(model.state_dim())}),
                              r.diverged, at);
      },
      py::arg("model"), py::arg("seed_window"), py::arg("horizon") = evalkit::kDefaultHorizon,
      "Refeed predictions; returns (prediction, diverged, diverged_at).");

  m.def(
      "mae_at",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth, std::size_t horizon) {
        if (pred.ndim() != 2 || truth.ndim() != 2) throw ShapeError("mae_at expects 2-D arrays");
        ad::Tensor p(pred.shape(0), pred.shape(1), flat(pred));
        ad::Tensor t(truth.shape(0), truth.shape(1), flat(truth));
        return evalkit::mae_at(p, t, horizon);
      },
      py::arg("pred"), py::arg("truth"), py::arg("horizon") = evalkit::kDefaultHorizon);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a disdyn subcommand; returns (exit_code, stdout, stderr).");
}
