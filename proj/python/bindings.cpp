#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tstok/data.hpp"
#include "tstok/experiment.hpp"
#include "tstok/forecaster.hpp"
#include "tstok/io.hpp"
#include "tstok/metrics.hpp"
#include "tstok/synthetic.hpp"
#include "tstok/tasks.hpp"
#include "tstok/vqvae.hpp"

namespace py = pybind11;
using namespace tstok;

namespace {

using InArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FlagArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Json to_cpp_json(const py::object& obj) {
  if (obj.is_none()) return Json::object();
  return Json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py_json(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Tensor to_tensor(const InArray& a, std::size_t rank, const char* what) {
  if (static_cast<std::size_t>(a.ndim()) != rank) {
    throw std::invalid_argument(std::string(what) + " must have " + std::to_string(rank) + " dimensions");
  }
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> to_flags(const std::vector<std::uint8_t>& v) {
  py::array_t<std::uint8_t> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Labels to_labels(const FlagArray& a) { return Labels(a.data(), a.data() + a.size()); }

UnivariateBatch batch_of(const Tensor& series) {
  UnivariateBatch b;
  b.series = series;
  for (std::size_t i = 0; i < series.dim(0); ++i) b.origin.push_back({0, i});
  return b;
}

py::array_t<double> history_array(const std::vector<LossRecord>& h) {
  py::array_t<double> out({static_cast<py::ssize_t>(h.size()), py::ssize_t{5}});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto r = static_cast<py::ssize_t>(i);
    m(r, 0) = static_cast<double>(h[i].step);
    m(r, 1) = h[i].rec;
    m(r, 2) = h[i].vq;
    m(r, 3) = h[i].cmt;
    m(r, 4) = h[i].total;
  }
  return out;
}

struct PyForecaster {
  std::shared_ptr<VqVae> tokenizer;
  std::unique_ptr<Forecaster> model;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Discrete time-series tokenizer core";

  m.def(
      "generate_synthetic",
      [](const py::object& spec) {
        const SyntheticData d = generate_synthetic(synthetic_spec_from_json(to_cpp_json(spec)));
        py::object labels = d.labels.empty() ? py::object(py::none()) : py::object(to_array(d.labels));
        return py::make_tuple(to_array(d.dataset.values), labels);
      },
      py::arg("spec") = py::none(), "Returns (values [E,S,T], labels [E,T] or None).");

  m.def(
      "quantize",
      [](const InArray& codewords, const InArray& latents) {
        const QuantizeResult r = quantize(to_tensor(codewords, 2, "codewords"), to_tensor(latents, 2, "latents"));
        return py::make_tuple(to_array(r.quantized), r.indices);
      },
      py::arg("codewords"), py::arg("latents"), "Nearest codeword per latent row; ties go to the lowest index.");

  py::class_<VqVae, std::shared_ptr<VqVae>>(m, "Tokenizer")
      .def(py::init([](const py::object& config) {
             return std::make_shared<VqVae>(vqvae_config_from_json(to_cpp_json(config)));
           }),
           py::arg("config") = py::none())
      .def_static("load",
                  [](const std::string& path) {
                    return std::shared_ptr<VqVae>(std::move(load_checkpoint(path).tokenizer));
                  })
      .def_property_readonly("config", [](const VqVae& v) { return to_py_json(to_json(v.config())); })
      .def_property_readonly("codebook", [](const VqVae& v) { return to_array(v.codebook().value); })
      .def(
          "train",
          [](VqVae& v, const InArray& series, const std::vector<double>& mask_ratios) {
            const Tensor data = to_tensor(series, 2, "series");
            py::gil_scoped_release release;
            auto h = mask_ratios.empty() ? train(v, data) : train_imputing(v, data, mask_ratios);
            py::gil_scoped_acquire acquire;
            return history_array(h);
          },
          py::arg("series"), py::arg("mask_ratios") = std::vector<double>{},
          "Trains on rows [N,T]; returns the loss history [steps, (step, rec, vq, cmt, total)].")
      .def(
          "encode",
          [](const VqVae& v, const InArray& series) {
            const TokenSequence t = tokenize(v, batch_of(to_tensor(series, 2, "series")));
            py::array_t<std::int64_t> out({static_cast<py::ssize_t>(t.rows), static_cast<py::ssize_t>(t.length)});
            std::copy(t.indices.begin(), t.indices.end(), out.mutable_data());
            return out;
          },
          py::arg("series"), "Token indices [N, T/F].")
      .def(
          "reconstruct",
          [](const VqVae& v, const InArray& series) { return to_array(v.reconstruct(to_tensor(series, 2, "series"))); },
          py::arg("series"))
      .def(
          "impute",
          [](const VqVae& v, const InArray& series, const FlagArray& observed) {
            const Tensor x = to_tensor(series, 2, "series");
            if (static_cast<std::size_t>(observed.size()) != x.size()) {
              throw std::invalid_argument("observed mask must match the series shape");
            }
            MaskSpec mask{x.dim(0), x.dim(1), 0.0, std::vector<std::uint8_t>(observed.data(), observed.data() + observed.size())};
            return to_array(impute(v, batch_of(x), mask).filled);
          },
          py::arg("series"), py::arg("observed"), "Fills positions where observed == 0.")
      .def(
          "detect",
          [](const VqVae& v, const InArray& series, double ratio) {
            const AnomalyResult r = detect_anomalies(v, to_tensor(series, 2, "series"), ratio);
            return py::make_tuple(r.scores, to_flags(r.flags));
          },
          py::arg("series"), py::arg("ratio") = 0.02, "Series [S,T]; returns (scores, flags).")
      .def(
          "save", [](const VqVae& v, const std::string& path) { save_checkpoint(path, v); }, py::arg("path"));

  py::class_<PyForecaster>(m, "Forecaster")
      .def(py::init([](const py::object& config, std::shared_ptr<VqVae> tokenizer) {
             auto f = std::make_unique<PyForecaster>();
             f->tokenizer = std::move(tokenizer);
             f->model = std::make_unique<Forecaster>(forecaster_config_from_json(to_cpp_json(config)),
                                                     f->tokenizer->code_dim(), f->tokenizer->config().compression);
             return f;
           }),
           py::arg("config"), py::arg("tokenizer"))
      .def_static("load",
                  [](const std::string& path) {
                    Checkpoint ck = load_checkpoint(path);
                    if (!ck.forecaster) throw std::invalid_argument("checkpoint has no forecaster section");
                    auto f = std::make_unique<PyForecaster>();
                    f->tokenizer = std::move(ck.tokenizer);
                    f->model = std::move(ck.forecaster);
                    return f;
                  })
      .def_property_readonly("config", [](const PyForecaster& f) { return to_py_json(to_json(f.model->config())); })
      .def_property_readonly("tokenizer", [](const PyForecaster& f) { return f.tokenizer; })
      .def(
          "train",
          [](PyForecaster& f, const InArray& windows) {
            const Tensor w = to_tensor(windows, 2, "windows");
            py::gil_scoped_release release;
            const auto h = train_forecaster(*f.model, f.tokenizer.get(), w);
            py::gil_scoped_acquire acquire;
            std::vector<double> loss;
            for (const auto& r : h) loss.push_back(r.loss);
            return loss;
          },
          py::arg("windows"), "Rows [N, lookback + horizon]; returns the per-step loss.")
      .def(
          "predict",
          [](const PyForecaster& f, const InArray& x) {
            return to_array(forecast(*f.model, f.tokenizer.get(), to_tensor(x, 2, "x")).y);
          },
          py::arg("x"), "Lookback rows [N, T_in] -> forecasts [N, T_out].")
      .def(
          "save", [](const PyForecaster& f, const std::string& path) { save_checkpoint(path, *f.tokenizer, f.model.get()); },
          py::arg("path"));

  m.def(
      "point_adjust", [](const FlagArray& pred, const FlagArray& truth) {
        return to_flags(point_adjust(to_labels(pred), to_labels(truth)));
      },
      py::arg("pred"), py::arg("truth"));
  m.def(
      "precision_recall_f1",
      [](const FlagArray& pred, const FlagArray& truth, bool adjusted) {
        const PrecisionRecall r = precision_recall_f1(to_labels(pred), to_labels(truth), adjusted);
        return py::make_tuple(r.precision, r.recall, r.f1);
      },
      py::arg("pred"), py::arg("truth"), py::arg("adjusted") = true);
  m.def(
      "permutation_test",
      [](const std::vector<double>& a, const std::vector<double>& b, bool paired, std::size_t exhaustive_limit,
         std::size_t resamples, std::uint64_t seed) {
        PermutationTestOptions o;
        o.paired = paired;
        o.exhaustive_limit = exhaustive_limit;
        o.resamples = resamples;
        o.seed = seed;
        return permutation_test(a, b, o);
      },
      py::arg("a"), py::arg("b"), py::arg("paired") = true, py::arg("exhaustive_limit") = 20,
      py::arg("resamples") = 100000, py::arg("seed") = 0, "One-sided p-value that a is lower than b.");
  m.def(
      "avg_wins",
      [](const std::vector<std::tuple<std::string, std::string, std::string, double, bool>>& rows, bool count_ties) {
        ResultTable t;
        for (const auto& [method, setting, metric, value, lower] : rows) t.add({method, setting, metric, value, lower});
        return avg_wins(t, count_ties);
      },
      py::arg("rows"), py::arg("count_ties") = true,
      "rows: (method, setting, metric, value, lower_is_better) tuples.");

  m.def(
      "run_experiment",
      [](const py::object& config, bool force) {
        const ExperimentConfig c = experiment_config_from_json(to_cpp_json(config));
        Json merged;
        {
          py::gil_scoped_release release;
          merged = run(c, force).merged;
        }
        return to_py_json(merged);
      },
      py::arg("config"), py::arg("force") = false, "Runs an experiment config; returns the merged results.");
  m.def(
      "compare",
      [](const std::string& a, const std::string& b, const std::string& out, bool force) {
        return compare_dirs(a, b, out, force).text;
      },
      py::arg("a"), py::arg("b"), py::arg("out"), py::arg("force") = false);

  py::register_exception<OutputExists>(m, "OutputExists", PyExc_FileExistsError);
}
