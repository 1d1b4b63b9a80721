#include "dice/datagen.hpp"
#include "dice/experiment.hpp"
#include "dice/io.hpp"
#include "dice/metrics.hpp"
#include "dice/oracles.hpp"
#include "dice/redundancy.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace dice;
using nlohmann::json;

namespace {

using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<int> ints(const IntArray& a) { return {a.data(), a.data() + a.size()}; }
std::vector<double> doubles(const DoubleArray& a) { return {a.data(), a.data() + a.size()}; }

Tensor matrix(const DoubleArray& a) {
    if (a.ndim() != 2)
        throw py::value_error("expected a 2-D array");
    return Tensor::from({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                        std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
}

DoubleArray to_numpy(const Tensor& t) {
    DoubleArray out({t.rows(), t.cols()});
    auto v = t.values();
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

PredictionMatrix predictions(const IntArray& pred, const IntArray& labels) {
    if (pred.ndim() != 2)
        throw py::value_error("predictions must be members x inputs");
    std::vector<std::vector<int>> rows;
    for (py::ssize_t m = 0; m < pred.shape(0); ++m)
        rows.emplace_back(pred.data(m, 0), pred.data(m, 0) + pred.shape(1));
    return PredictionMatrix::from_predictions(std::move(rows), ints(labels));
}

py::dict ood_dict(const OodScores& s) {
    py::dict d;
    d["auroc"] = s.auroc;
    d["aupr_in"] = s.aupr_in;
    d["aupr_out"] = s.aupr_out;
    d["fpr_at_95_tpr"] = s.fpr_at_95_tpr;
    d["detection_error"] = s.detection_error;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "DICE ensemble lab core";
    m.attr("SPEC_VERSION") = kSpecVersion;

    py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

    m.def("resolve_spec", [](const std::string& text) { return to_json(parse_spec(json::parse(text))).dump(); },
          py::arg("spec_json"), "Fully resolved spec as a JSON string.");
    m.def(
        "run_experiment",
        [](const std::string& text, std::uint64_t seed, const std::filesystem::path& dir) {
            auto spec = parse_spec(json::parse(text));
            py::gil_scoped_release release;
            run_experiment(spec, seed, dir);
        },
        py::arg("spec_json"), py::arg("seed"), py::arg("dir"));
    m.def(
        "write_report",
        [](const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out, bool dice_w) {
            py::gil_scoped_release release;
            return write_report(inputs, out, dice_w).runs;
        },
        py::arg("inputs"), py::arg("out"), py::arg("dice_w_scoring") = false);

    m.def(
        "make_spurious_clusters",
        [](std::size_t classes, std::size_t core_dim, std::size_t nuisance_dim, double nuisance_strength,
           std::size_t samples, std::uint64_t seed) {
            SpuriousTaskConfig c;
            c.classes = classes;
            c.core_dim = core_dim;
            c.nuisance_dim = nuisance_dim;
            c.nuisance_strength = nuisance_strength;
            c.samples = samples;
            c.seed = seed;
            auto t = make_spurious_clusters(c);
            IntArray y(static_cast<py::ssize_t>(t.data.labels.size()));
            std::copy(t.data.labels.begin(), t.data.labels.end(), y.mutable_data());
            return py::make_tuple(to_numpy(t.data.inputs), y);
        },
        py::arg("classes") = 4, py::arg("core_dim") = 8, py::arg("nuisance_dim") = 4,
        py::arg("nuisance_strength") = 0.9, py::arg("samples") = 2000, py::arg("seed") = 0);

    m.def("ratio_error", [](const IntArray& p, const IntArray& y) { return ratio_error(predictions(p, y)); });
    m.def("q_statistic", [](const IntArray& p, const IntArray& y) { return q_statistic(predictions(p, y)); });
    m.def("agreement", [](const IntArray& p, const IntArray& y) { return agreement(predictions(p, y)); });
    m.def("kohavi_wolpert_variance",
          [](const IntArray& p, const IntArray& y) { return kohavi_wolpert_variance(predictions(p, y)); });
    m.def("entropy_diversity",
          [](const IntArray& p, const IntArray& y) { return entropy_diversity(predictions(p, y)); });

    m.def(
        "ece", [](const DoubleArray& p, const IntArray& y, std::size_t bins) { return ece(matrix(p), ints(y), bins); },
        py::arg("probs"), py::arg("labels"), py::arg("bins") = 15);
    m.def("nll", [](const DoubleArray& p, const IntArray& y) { return nll(matrix(p), ints(y)); });
    m.def("brier", [](const DoubleArray& p, const IntArray& y) { return brier(matrix(p), ints(y)); });
    m.def("fit_temperature",
          [](const DoubleArray& logits, const IntArray& y) { return fit_temperature(matrix(logits), ints(y)); });
    m.def("ood_scores",
          [](const DoubleArray& in, const DoubleArray& out) { return ood_dict(ood_scores(doubles(in), doubles(out))); });

    m.def("clipped_ratio", &clipped_ratio, py::arg("w_out"), py::arg("tau") = 10.0);
    m.def("cr_estimate", [](const DoubleArray& joint, const DoubleArray& product, double tau) {
        return cr_estimate(doubles(joint), doubles(product), tau);
    }, py::arg("joint_w"), py::arg("product_w"), py::arg("tau") = 10.0);

    m.def(
        "run_oracles",
        [](std::uint64_t seed) {
            std::ostringstream out;
            bool ok = oracle::run_suite(out, seed);
            return py::make_tuple(ok, out.str());
        },
        py::arg("seed") = 7);
}
