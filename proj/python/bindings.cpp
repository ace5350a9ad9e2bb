#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "switchhurdle/config.hpp"
#include "switchhurdle/evaluation.hpp"
#include "switchhurdle/hurdle.hpp"
#include "switchhurdle/training.hpp"

namespace py = pybind11;
using namespace switchhurdle;

namespace {

HurdleParams params(double p_plus, double mu, double alpha) { return HurdleParams{p_plus, NBParams{mu, alpha}}; }

py::list dataset_to_python(const Dataset& data) {
  py::list out;
  for (const auto& s : data.series) {
    py::dict d;
    d["id"] = s.id;
    d["attributes"] = s.attributes;
    d["demand"] = s.demand;
    if (!s.price.empty()) d["price"] = s.price;
    out.append(std::move(d));
  }
  return out;
}

class Forecaster {
 public:
  explicit Forecaster(const std::filesystem::path& checkpoint) : ck_(load_checkpoint(checkpoint)) {}

  py::dict config() const {
    return py::module_::import("json").attr("loads")(to_json(ck_.model.config()).dump());
  }

  /// Point forecasts and per-step hurdle parameters at the test or validation origin.
  py::list forecast(const std::filesystem::path& data_dir, const std::string& origin,
                    std::optional<std::size_t> limit) {
    if (origin != "test" && origin != "validation") throw std::invalid_argument("origin must be test or validation");
    const Dataset data = load_dataset(data_dir, limit);
    const PreparedData prepared = prepare(data, ck_.encoder);
    const auto& cfg = ck_.model.config();
    const Split split = make_split(data, cfg.context_length, cfg.horizon, cfg.horizon);
    const auto& windows = origin == "test" ? split.test : split.validation;
    InferenceOutput inf;
    {
      py::gil_scoped_release release;
      inf = run_inference(ck_.model, prepared, windows);
    }
    py::list out;
    for (const auto& f : inf.forecasts) {
      py::dict d;
      d["series_id"] = data.series[f.series].id;
      d["origin"] = f.origin;
      d["mean"] = f.mean;
      std::vector<double> p, mu, alpha;
      for (const auto& h : f.params) {
        p.push_back(h.p_plus);
        mu.push_back(h.nb.mu);
        alpha.push_back(h.nb.alpha);
      }
      d["p_plus"] = p;
      d["mu"] = mu;
      d["alpha"] = alpha;
      out.append(std::move(d));
    }
    return out;
  }

 private:
  LoadedCheckpoint ck_;
};

}  // namespace

PYBIND11_MODULE(_switchhurdle, m) {
  m.doc() = "Switch-Hurdle Transformer forecaster";
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  m.def("hurdle_log_pmf", [](std::int64_t y, double p, double mu, double a) { return hurdle_log_pmf(y, params(p, mu, a)); },
        py::arg("y"), py::arg("p_plus"), py::arg("mu"), py::arg("alpha"));
  m.def("hurdle_cdf", [](std::int64_t y, double p, double mu, double a) { return hurdle_cdf(y, params(p, mu, a)); },
        py::arg("y"), py::arg("p_plus"), py::arg("mu"), py::arg("alpha"));
  m.def("hurdle_mean", [](double p, double mu, double a) { return hurdle_mean(params(p, mu, a)); }, py::arg("p_plus"),
        py::arg("mu"), py::arg("alpha"));
  m.def("hurdle_quantile",
        [](double p, double mu, double a, double q) { return hurdle_quantile(params(p, mu, a), q); },
        py::arg("p_plus"), py::arg("mu"), py::arg("alpha"), py::arg("q"));
  m.def("nb_zero_prob", [](double mu, double a) { return nb_zero_prob(NBParams{mu, a}); }, py::arg("mu"),
        py::arg("alpha"));

  m.def("wape", [](const std::vector<double>& f, const std::vector<double>& y) { return wape(f, y); },
        py::arg("forecast"), py::arg("actual"), "None when the actuals sum to zero.");
  m.def("mase",
        [](const std::vector<double>& f, const std::vector<double>& y, const std::vector<double>& x, std::size_t s) {
          return mase(f, y, x, s);
        },
        py::arg("forecast"), py::arg("actual"), py::arg("in_sample"), py::arg("seasonality") = 1);
  m.def("rmse", [](const std::vector<double>& f, const std::vector<double>& y) { return rmse(f, y); },
        py::arg("forecast"), py::arg("actual"));
  m.def("rmsse",
        [](const std::vector<double>& f, const std::vector<double>& y, const std::vector<double>& x) {
          return rmsse(f, y, x);
        },
        py::arg("forecast"), py::arg("actual"), py::arg("in_sample"));
  m.def("naive_forecast", [](const std::vector<double>& x, std::size_t h) { return naive_forecast(x, h); },
        py::arg("in_sample"), py::arg("horizon"));
  m.def("croston_forecast",
        [](const std::vector<double>& x, std::size_t h, double a) { return croston_forecast(x, h, a); },
        py::arg("in_sample"), py::arg("horizon"), py::arg("smoothing") = 0.1);
  m.def("lambda_decay", py::overload_cast<std::size_t>(&lambda_decay), py::arg("epoch"));

  m.def(
      "generate_synthetic",
      [](std::size_t n_series, std::size_t length, std::uint64_t seed) {
        SyntheticSpec spec;
        spec.n_series = n_series;
        spec.length = length;
        spec.seed = seed;
        return dataset_to_python(generate_synthetic(spec));
      },
      py::arg("n_series") = 200, py::arg("length") = 400, py::arg("seed") = 7);
  m.def(
      "load_dataset",
      [](const std::filesystem::path& dir, std::optional<std::size_t> limit) {
        return dataset_to_python(load_dataset(dir, limit));
      },
      py::arg("path"), py::arg("limit") = py::none());

  py::class_<Forecaster>(m, "Forecaster")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("config", &Forecaster::config)
      .def("forecast", &Forecaster::forecast, py::arg("data"), py::arg("origin") = "test",
           py::arg("limit") = py::none());
}
