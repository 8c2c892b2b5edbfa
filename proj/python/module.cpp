// Python bindings. Sites are passed as an age vector plus a subjects x
// regions matrix; subject ids are generated from the row index.

#include "ccombat/clinical.hpp"
#include "ccombat/error.hpp"
#include "ccombat/io.hpp"
#include "ccombat/synth.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace ccombat;

namespace {

SiteDataset to_site(const std::string& site_id, const Eigen::VectorXd& age, const Eigen::MatrixXd& values,
                    const std::vector<std::string>& regions, const std::string& metric) {
    if (values.rows() != age.size())
        throw Error(ErrorKind::InvalidArgument, "values has " + std::to_string(values.rows()) + " rows but age has " +
                                                    std::to_string(age.size()));
    if (values.cols() != static_cast<Eigen::Index>(regions.size()))
        throw Error(ErrorKind::InvalidArgument, "values has " + std::to_string(values.cols()) + " columns but " +
                                                    std::to_string(regions.size()) + " regions were named");
    SiteDataset s;
    s.site_id = site_id;
    s.metric_name = metric;
    s.records.reserve(static_cast<std::size_t>(age.size()));
    for (Eigen::Index j = 0; j < age.size(); ++j) {
        SubjectRecord r;
        r.subject_id = std::to_string(j);
        r.covariates = {{age(j)}, {"age"}};
        for (std::size_t v = 0; v < regions.size(); ++v) r.metrics[regions[v]] = values(j, static_cast<Eigen::Index>(v));
        s.records.push_back(std::move(r));
    }
    return s;
}

Eigen::MatrixXd to_matrix(const SiteDataset& s, const std::vector<std::string>& regions) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(regions.size()));
    for (std::size_t j = 0; j < s.size(); ++j)
        for (std::size_t v = 0; v < regions.size(); ++v)
            out(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(v)) = s.records[j].metrics.at(regions[v]);
    return out;
}

Eigen::VectorXd ages_of(const SiteDataset& s) {
    Eigen::VectorXd a(static_cast<Eigen::Index>(s.size()));
    for (std::size_t j = 0; j < s.size(); ++j) a(static_cast<Eigen::Index>(j)) = s.records[j].covariates.values[0];
    return a;
}

std::vector<std::string> region_names(const io::ModelFile& m) {
    std::vector<std::string> out;
    for (const auto& [id, model] : m.bundle.models) out.push_back(id);
    return out;
}

io::ModelFile fit(const Eigen::VectorXd& ref_age, const Eigen::MatrixXd& ref_values, const Eigen::VectorXd& mov_age,
                  const Eigen::MatrixXd& mov_values, const std::vector<std::string>& regions, int degree, double nu,
                  double tau, std::optional<std::vector<double>> lam, int threads, const std::string& metric) {
    Hyperparameters hp;
    hp.degree = degree;
    hp.nu = nu;
    hp.tau = tau;
    hp.fixed_lambda = std::move(lam);
    io::ModelFile m;
    m.bundle = fit_bundle(to_site("reference", ref_age, ref_values, regions, metric),
                          to_site("moving", mov_age, mov_values, regions, metric), hp, ExecutionOptions{threads});
    m.covariates = {io::CovariateSpec{"age"}};
    return m;
}

Eigen::MatrixXd apply_model(const io::ModelFile& m, const Eigen::VectorXd& age, const Eigen::MatrixXd& values) {
    const auto regions = region_names(m);
    const auto site = to_site("moving", age, values, regions, m.bundle.metric_name);
    SiteDataset out = site;
    out.records = ccombat::apply(m.bundle, site.records);
    return to_matrix(out, regions);
}

py::tuple as_tuple(const SyntheticSite& s) {
    return py::make_tuple(ages_of(s.data), to_matrix(s.data, s.truth.region_ids), s.truth.unbiased, s.truth.region_ids);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Harmonization of diffusion MRI metrics between a reference and a moving site.";

    auto base = py::register_exception<Error>(m, "CCombatError", PyExc_ValueError);
    (void)base;

    py::class_<io::ModelFile>(m, "Model")
        .def_property_readonly("regions", &region_names)
        .def_property_readonly("qc", [](const io::ModelFile& f) { return f.bundle.qc; },
                               "Bhattacharyya distance after harmonizing the training data, per region.")
        .def_property_readonly("qc_before", [](const io::ModelFile& f) { return f.bundle.qc_before; })
        .def_property_readonly("lambdas", [](const io::ModelFile& f) { return f.bundle.tuned_lambda; })
        .def_property_readonly("degree", [](const io::ModelFile& f) { return f.bundle.hyperparameters.degree; })
        .def("apply", &apply_model, py::arg("age"), py::arg("values"),
             "Harmonize a subjects x regions matrix (columns in `regions` order).")
        .def("to_json", &io::serialize_model)
        .def_static("from_json", [](const std::string& text) { return io::model_from_json(io::json::parse(text)); })
        .def("save", [](const io::ModelFile& f, const std::filesystem::path& p) { io::save_model(p, f); })
        .def_static("load", &io::load_model);

    m.def("fit", &fit, py::arg("ref_age"), py::arg("ref_values"), py::arg("mov_age"), py::arg("mov_values"),
          py::arg("regions"), py::arg("degree") = 2, py::arg("nu") = 5.0, py::arg("tau") = 2.0,
          py::arg("lam") = py::none(), py::arg("threads") = 1, py::arg("metric") = "md",
          "Fit one model per region. `lam` fixes the regularization; None auto-tunes it.");

    m.def(
        "simulate_reference",
        [](std::size_t n, std::uint64_t seed) { return as_tuple(generate_reference(default_fixture(seed, n))); },
        py::arg("n") = 441, py::arg("seed") = 1,
        "Synthetic reference site: (age, values, unbiased values, regions).");
    m.def(
        "simulate_moving",
        [](std::size_t n, double S, double M, double A, std::uint64_t seed, std::pair<double, double> age_range,
           std::uint64_t fixture_seed) {
            return as_tuple(inject_bias(default_fixture(fixture_seed), BiasSpec{A, S, M, std::nullopt}, n, age_range,
                                        seed, "moving"));
        },
        py::arg("n"), py::arg("S") = 1.0, py::arg("M") = 1.0, py::arg("A") = 1.0, py::arg("seed") = 2,
        py::arg("age_range") = std::pair<double, double>{18.0, 87.0}, py::arg("fixture_seed") = 1,
        "Synthetic moving site with slope (S), noise (M) and additive (A) bias; the third item is the unbiased truth.");

    m.def("bhattacharyya_distance", py::overload_cast<double, double, double, double>(&bhattacharyya_distance),
          py::arg("mean_a"), py::arg("var_a"), py::arg("mean_b"), py::arg("var_b"));
}
