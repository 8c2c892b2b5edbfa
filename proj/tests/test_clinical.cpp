#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ccombat/basis.hpp"
#include "ccombat/clinical.hpp"
#include "ccombat/synth.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <numeric>

using namespace ccombat;
using testutil::kind_of;
using testutil::random_site;
using testutil::site_from;

namespace {

// Design matrix built without the library: population standardization of
// age followed by plain powers.
oracle::Mat oracle_design(const SiteDataset& standardize_on, const SiteDataset& data, int degree) {
    double mean = 0.0;
    for (const auto& r : standardize_on.records) mean += r.covariates.values[0];
    mean /= static_cast<double>(standardize_on.size());
    double var = 0.0;
    for (const auto& r : standardize_on.records) var += std::pow(r.covariates.values[0] - mean, 2);
    const double sd = std::sqrt(var / static_cast<double>(standardize_on.size()));
    oracle::Mat phi;
    for (const auto& r : data.records) {
        const double z = (r.covariates.values[0] - mean) / sd;
        oracle::Vec row;
        for (int k = 0; k <= degree; ++k) row.push_back(std::pow(z, k));
        phi.push_back(row);
    }
    return phi;
}

oracle::Vec values(const SiteDataset& s, const std::string& region = "r") {
    return oracle::to_vec(s.region_values(region));
}

Hyperparameters fixed(double lambda, double nu, int degree = 2) {
    Hyperparameters hp;
    hp.degree = degree;
    hp.nu = nu;
    hp.fixed_lambda = std::vector<double>{lambda};
    return hp;
}

}  // namespace

TEST_CASE("fit_reference small examples") {
    // Noiseless y = 1 + 2 z with z the standardized age.
    const std::vector<double> ages{20, 40, 60};
    const double sd = std::sqrt(800.0 / 3.0);
    std::vector<double> y;
    for (double a : ages) y.push_back(1.0 + 2.0 * (a - 40.0) / sd);
    const auto ref = site_from("ref", ages, {{"r", y}});
    const auto basis = make_basis(ref, 1);
    CHECK(basis.standardization[0].scale == doctest::Approx(16.3299).epsilon(1e-5));
    const auto fit = fit_reference(ref, "r", basis);
    CHECK(fit.beta(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.beta(1) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fit.variance < 1e-9);

    // Intercept only: mean and population variance.
    const auto flat = site_from("ref", {1, 2, 3, 4}, {{"r", {1.0, 3.0, 2.0, 6.0}}});
    const auto f0 = fit_reference(flat, "r", make_basis(flat, 0));
    CHECK(f0.beta(0) == doctest::Approx(3.0));
    CHECK(f0.variance == doctest::Approx((4.0 + 0.0 + 1.0 + 9.0) / 4.0));

    CHECK(kind_of([&] { (void)fit_reference(flat, "r", make_basis(flat, 3)); }) ==
          ErrorKind::InsufficientData);
}

TEST_CASE("fit_reference and unregularized fit_moving match the least-squares oracle") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> coef(-2.0, 2.0);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int p = inst % 4;
        const std::vector<double> c{coef(rng), coef(rng), coef(rng), coef(rng)};
        const auto ref = random_site(rng, "ref", 30, c, 0.3);
        const auto mov = random_site(rng, "mov", 25, {c[0] + 0.5, c[1] * 0.7, c[2], c[3]}, 0.5);
        const auto basis = make_basis(ref, p);

        const auto phi_r = oracle_design(ref, ref, p);
        const auto y_r = values(ref);
        const auto beta_r = oracle::least_squares(phi_r, y_r);
        const auto fr = fit_reference(ref, "r", basis);
        worst = std::max(worst, oracle::rel_err(oracle::to_vec(fr.beta), beta_r));
        CHECK(fr.variance == doctest::Approx(oracle::mean_squared_residual(phi_r, y_r, beta_r)).epsilon(1e-8));

        const auto phi_m = oracle_design(ref, mov, p);
        const auto y_m = values(mov);
        const auto beta_m = oracle::least_squares(phi_m, y_m);
        const auto fm = fit_moving(mov, "r", basis, fr.beta, fr.variance,
                                   Eigen::VectorXd::Zero(basis.degree + 1), 0.0);
        worst = std::max(worst, oracle::rel_err(oracle::to_vec(fm.beta), beta_m));
        CHECK(fm.empirical_variance ==
              doctest::Approx(oracle::mean_squared_residual(phi_m, y_m, beta_m)).epsilon(1e-8));
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("regularized fit_moving matches the stacked oracle") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    for (int inst = 0; inst < 50; ++inst) {
        const auto ref = random_site(rng, "ref", 40, {1.0, 0.5, -0.2}, 0.2);
        const auto mov = random_site(rng, "mov", 6, {1.3, 0.1, 0.3}, 0.2, 50.0, 70.0);
        const auto basis = make_basis(ref, 2);
        const auto fr = fit_reference(ref, "r", basis);
        const Eigen::Vector3d lambda(u(rng), u(rng), u(rng));
        const auto fm = fit_moving(mov, "r", basis, fr.beta, fr.variance, lambda, 0.0);
        const auto expect = oracle::ridge_to_prior(oracle_design(ref, mov, 2), values(mov),
                                                   oracle::to_vec(lambda), oracle::to_vec(fr.beta));
        CHECK(oracle::rel_err(oracle::to_vec(fm.beta), expect) < 1e-8);
    }
}

TEST_CASE("variance shrinkage identities") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> pos(1e-3, 10.0);
    std::uniform_int_distribution<int> count(1, 200);
    for (int inst = 0; inst < 1000; ++inst) {
        const double emp = pos(rng), vr = pos(rng);
        const double j = count(rng);
        const double nu = pos(rng) * 10.0;
        const double v = shrink_variance(emp, vr, j, nu);
        CHECK(v >= std::min(emp, vr));
        CHECK(v <= std::max(emp, vr));
        CHECK(shrink_variance(emp, vr, j, 0.0) == emp);
        CHECK(std::abs(shrink_variance(emp, vr, j, j) - 0.5 * (emp + vr)) <= 1e-12 * (emp + vr));
        CHECK(shrink_variance(emp, vr, 0.0, nu) == doctest::Approx(vr).epsilon(1e-15));
    }

    // The same identities through fit_moving on random data.
    for (int inst = 0; inst < 50; ++inst) {
        const auto ref = random_site(rng, "ref", 30, {1.0, 0.4}, 0.3);
        const auto mov = random_site(rng, "mov", 5, {1.2, 0.2}, 0.6);
        const auto basis = make_basis(ref, 1);
        const auto fr = fit_reference(ref, "r", basis);
        const Eigen::VectorXd lam = Eigen::VectorXd::Constant(1, 0.5);
        const auto f0 = fit_moving(mov, "r", basis, fr.beta, fr.variance, lam, 0.0);
        CHECK(f0.variance == f0.empirical_variance);
        const auto f5 = fit_moving(mov, "r", basis, fr.beta, fr.variance, lam, 5.0);
        CHECK(std::abs(f5.variance - 0.5 * (f5.empirical_variance + fr.variance)) <=
              1e-12 * (f5.empirical_variance + fr.variance));
    }
}

TEST_CASE("large lambda pins the moving weights to the reference") {
    std::mt19937_64 rng(14);
    for (int inst = 0; inst < 20; ++inst) {
        const auto ref = random_site(rng, "ref", 50, {1.0, -0.5, 0.3, 0.1}, 0.1);
        const auto mov = random_site(rng, "mov", 8, {2.0, 0.5, -0.3, 0.0}, 0.1);
        const auto basis = make_basis(ref, 3);
        const auto fr = fit_reference(ref, "r", basis);
        const auto fm = fit_moving(mov, "r", basis, fr.beta, fr.variance,
                                   Eigen::VectorXd::Constant(4, 1e12), 5.0);
        CHECK((fm.beta - fr.beta).norm() / fr.beta.norm() < 1e-4);
    }
}

TEST_CASE("increasing lambda never moves the weights away from the reference") {
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> coef(-1.0, 1.0);
    for (int inst = 0; inst < 200; ++inst) {
        const int p = 1 + inst % 3;
        const auto ref = random_site(rng, "ref", 40, {coef(rng), coef(rng), coef(rng), coef(rng)}, 0.2);
        const auto mov = random_site(rng, "mov", 12, {coef(rng), coef(rng), coef(rng), coef(rng)}, 0.2);
        const auto basis = make_basis(ref, p);
        const auto fr = fit_reference(ref, "r", basis);
        double previous = std::numeric_limits<double>::infinity();
        for (double lam = 1e-4; lam < 1e5; lam *= 3.0) {
            const auto fm = fit_moving(mov, "r", basis, fr.beta, fr.variance,
                                       Eigen::VectorXd::Constant(1, lam), 5.0);
            const double dist = (fm.beta - fr.beta).norm();
            CHECK(dist <= previous * (1.0 + 1e-12));
            previous = dist;
        }
    }
}

TEST_CASE("self-harmonization is the identity") {
    std::mt19937_64 rng(16);
    const auto ref = random_site(rng, "ref", 60, {7.4e-4, 2.5e-5, 4.5e-5}, 3e-6);
    auto ref2 = ref;
    for (auto& r : ref2.records) r.metrics["s"] = r.metrics["r"] * 2.0 + 1e-4;
    const auto bundle = fit_bundle(ref2, ref2, fixed(0.0, 5.0));
    for (const auto& [region, m] : bundle.models) {
        CHECK(oracle::rel_err(oracle::to_vec(m.beta_mov), oracle::to_vec(m.beta_ref)) < 1e-12);
        CHECK(m.var_mov == doctest::Approx(m.var_ref).epsilon(1e-12));
        CHECK(bundle.qc.at(region) < 1e-6);
    }
    const auto out = ccombat::apply(bundle, ref2.records);
    for (std::size_t j = 0; j < out.size(); ++j)
        for (const auto& [region, v] : ref2.records[j].metrics)
            CHECK(std::abs(out[j].metrics.at(region) - v) <= 1e-8 * std::abs(v));
}

TEST_CASE("apply maps the moving curve onto the reference curve") {
    std::mt19937_64 rng(17);
    const auto ref = random_site(rng, "ref", 60, {1.0, 0.5, 0.2}, 0.1);
    const auto mov = random_site(rng, "mov", 40, {1.5, 0.3, 0.1}, 0.3);
    const auto bundle = fit_bundle(ref, mov, fixed(0.0, 0.0));
    const auto& m = bundle.models.at("r");

    SubjectRecord s;
    s.subject_id = "x";
    s.covariates = {{95.0}, {"age"}};  // outside the training range
    const Eigen::VectorXd phi = expand_basis(s.covariates, m.basis);
    s.metrics["r"] = phi.dot(m.beta_mov);
    const auto out = ccombat::apply(bundle, std::span<const SubjectRecord>(&s, 1));
    CHECK(out[0].metrics.at("r") == doctest::Approx(phi.dot(m.beta_ref)).epsilon(1e-14));

    // Variance-ratio compatibility mode leaves on-curve values unchanged too.
    CHECK(harmonize_value(m, phi, s.metrics["r"], VarianceScaling::VarianceRatio) ==
          doctest::Approx(phi.dot(m.beta_ref)).epsilon(1e-14));

    s.metrics["other"] = 1.0;
    CHECK(kind_of([&] { (void)ccombat::apply(bundle, std::span<const SubjectRecord>(&s, 1)); }) ==
          ErrorKind::UnknownRegion);
}

TEST_CASE("harmonized moving residuals take the reference mean and variance") {
    std::mt19937_64 rng(18);
    const auto ref = random_site(rng, "ref", 300, {1.0, 0.5, 0.2}, 0.1);
    const auto mov = random_site(rng, "mov", 2000, {1.4, 0.2, 0.3}, 0.35);
    const auto bundle = fit_bundle(ref, mov, fixed(0.0, 0.0));
    const auto& m = bundle.models.at("r");
    const auto out = ccombat::apply(bundle, mov.records);
    SiteDataset h = mov;
    h.records = out;
    const auto z = rectify(design_matrix(h, m.basis), h.region_values("r"), m.beta_ref,
                           ResidualSource::MovingHarmonized);
    const double mean = z.values.mean();
    const double var = (z.values.array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-8);
    CHECK(var == doctest::Approx(m.var_ref).epsilon(1e-6));
    CHECK(bundle.qc.at("r") < bundle.qc_before.at("r"));
}

TEST_CASE("degenerate moving variance is reported") {
    // Moving values lie exactly on a line; with nu = 0 the harmonized moving
    // residuals collapse and QC cannot be computed.
    const auto ref = site_from("ref", {20, 30, 40, 50, 60}, {{"r", {1.0, 2.5, 2.9, 4.4, 5.2}}});
    const auto mov = site_from("mov", {25, 35, 45}, {{"r", {2.0, 3.0, 4.0}}});
    CHECK(kind_of([&] { (void)fit_bundle(ref, mov, fixed(0.0, 0.0, 1)); }) == ErrorKind::DegenerateVariance);

    RegionModel m;
    m.region_id = "r";
    m.basis = make_basis(ref, 1);
    m.beta_ref = Eigen::Vector2d(3.0, 1.0);
    m.beta_mov = Eigen::Vector2d(2.0, 1.0);
    m.var_ref = 0.5;
    m.var_mov = 0.0;
    const Eigen::Vector2d phi(1.0, 0.5);
    CHECK(harmonize_value(m, phi, 2.5) == 3.5);  // on the moving curve
    CHECK(kind_of([&] { (void)harmonize_value(m, phi, 2.6); }) == ErrorKind::DegenerateVariance);
}

TEST_CASE("Bhattacharyya distance closed form") {
    CHECK(bhattacharyya_distance(0.0, 1.0, 1.0, 1.0) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(bhattacharyya_distance(3.0, 1.0, 3.0, 4.0) == doctest::Approx(0.5 * std::log(1.25)).epsilon(1e-15));
    CHECK(bhattacharyya_distance(2.0, 0.7, 2.0, 0.7) == 0.0);
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (int i = 0; i < 100; ++i) {
        const double m1 = u(rng), s1 = u(rng), m2 = u(rng), s2 = u(rng);
        const double d = bhattacharyya_distance(m1, s1 * s1, m2, s2 * s2);
        CHECK(d == doctest::Approx(oracle::bhattacharyya(m1, s1, m2, s2)).epsilon(1e-13));
        CHECK(d >= 0.0);
    }
    CHECK(kind_of([] { (void)bhattacharyya_distance(0.0, 0.0, 0.0, 1.0); }) == ErrorKind::DegenerateVariance);

    RectifiedResiduals a{Eigen::Vector3d(1.0, 2.0, 3.0), ResidualSource::Reference};
    CHECK(bhattacharyya_distance(a, a) == 0.0);
}

TEST_CASE("tuner criterion and initial direction") {
    CHECK(tune_criterion(1.0, 2.0, 1.0, 3.0, 2.0, 2.0) == 0.0);
    CHECK(tune_criterion(1.0, 2.0, 0.2, 3.0, 2.0, 2.0) == 2.0);
    CHECK(tune_criterion(1.0, 2.0, 0.2, 5.0, 2.0, 2.0) == 4.0);
    CHECK(tune_criterion(2.0, 2.0, 1.0, 4.0, 2.0, 2.0) == 4.0);  // sign(0) counts as +1

    const auto l0 = initial_lambda(Eigen::Vector3d(2.0, -4.0, 0.0));
    CHECK(l0(0) == 1.0);
    CHECK(l0(1) == 0.5);
    CHECK(l0(2) == 1.0);  // zero entry takes the largest finite ratio
}

TEST_CASE("tuner on identical sites stops at the first step") {
    std::mt19937_64 rng(20);
    const auto ref = random_site(rng, "ref", 80, {1.0, 0.5, 0.2}, 0.1);
    Hyperparameters hp;
    const auto res = auto_tune(ref, ref, "r", hp);
    CHECK(res.diagnostics.converged);
    CHECK(res.diagnostics.iterations == 1);
    CHECK(res.diagnostics.multiplier == hp.autotune.lambda_min);
}

TEST_CASE("huge tau accepts the smallest lambda") {
    std::mt19937_64 rng(21);
    const auto ref = random_site(rng, "ref", 80, {1.0, 0.5, 0.2}, 0.1);
    const auto mov = random_site(rng, "mov", 15, {1.3, 0.2, 0.4}, 0.2, 40.0, 70.0);
    Hyperparameters hp;
    hp.tau = 1e6;
    const auto res = auto_tune(ref, mov, "r", hp);
    CHECK(res.diagnostics.converged);
    CHECK(res.diagnostics.iterations == 1);
    CHECK(oracle::rel_err(oracle::to_vec(res.lambda), oracle::to_vec(hp.autotune.lambda_min * res.lambda0)) == 0.0);
}

TEST_CASE("tuner diagnostics are ordered and consistent") {
    auto spec = default_fixture(3, 300);
    spec.regions.resize(1);
    const auto ref = generate_reference(spec).data;
    const auto mov = inject_bias(spec, sample_size_bias(), 10, {60.0, 80.0}, 4).data;
    Hyperparameters hp;
    hp.degree = 3;
    const auto res = auto_tune(ref, mov, "wm_skeleton", hp);
    const auto& d = res.diagnostics;
    CHECK(d.d_min <= d.d_max);
    CHECK(d.d_1 <= d.d_2);
    CHECK(d.d_1 <= d.d_min);
    CHECK(d.d_max <= d.d_2);
    CHECK(static_cast<int>(d.lambda_trace.size()) == d.iterations);
    CHECK(d.lambda_trace.back().second == tune_criterion(d.d_min, d.d_max, d.d_1, d.d_2, hp.tau, hp.tau));
    for (std::size_t t = 1; t < d.lambda_trace.size(); ++t)
        CHECK(d.lambda_trace[t].first == doctest::Approx(d.lambda_trace[t - 1].first * hp.autotune.k));
}

TEST_CASE("regions are fit independently") {
    auto spec = default_fixture(5, 120);
    spec.regions.resize(4);
    const auto ref = generate_reference(spec).data;
    const auto mov = inject_bias(spec, sample_size_bias(), 20, {18.0, 87.0}, 6).data;
    Hyperparameters hp;
    const auto base = fit_bundle(ref, mov, hp);
    const std::string target = spec.regions[0].region_id;

    auto mutated = mov;
    for (auto& r : mutated.records)
        for (auto& [region, v] : r.metrics)
            if (region != target) v = v * 3.0 + 1.0;
    const auto other = fit_bundle(ref, mutated, hp);

    auto ref_only = ref, mov_only = mov;
    for (auto* s : {&ref_only, &mov_only})
        for (auto& r : s->records) r.metrics = {{target, r.metrics.at(target)}};
    const auto alone = fit_bundle(ref_only, mov_only, hp);

    for (const auto* b : {&other, &alone}) {
        const auto& m0 = base.models.at(target);
        const auto& m1 = b->models.at(target);
        CHECK(m0.beta_ref == m1.beta_ref);
        CHECK(m0.beta_mov == m1.beta_mov);
        CHECK(m0.var_ref == m1.var_ref);
        CHECK(m0.var_mov == m1.var_mov);
        CHECK(base.qc.at(target) == b->qc.at(target));
    }
    CHECK(base.models.at(spec.regions[1].region_id).beta_mov != other.models.at(spec.regions[1].region_id).beta_mov);
}

TEST_CASE("fit_bundle is bit-identical across thread counts") {
    const auto spec = default_fixture(7, 200);
    const auto ref = generate_reference(spec).data;
    const auto mov = inject_bias(spec, sample_size_bias(), 30, {18.0, 87.0}, 8).data;
    const auto a = fit_bundle(ref, mov, Hyperparameters{}, ExecutionOptions{1});
    const auto b = fit_bundle(ref, mov, Hyperparameters{}, ExecutionOptions{4});
    REQUIRE(a.models.size() == 43);
    for (const auto& [region, m] : a.models) {
        CHECK(m.beta_mov == b.models.at(region).beta_mov);
        CHECK(m.var_mov == b.models.at(region).var_mov);
        CHECK(a.tuned_lambda.at(region) == b.tuned_lambda.at(region));
        CHECK(a.qc.at(region) == b.qc.at(region));
    }
}

TEST_CASE("fit_bundle error paths") {
    std::mt19937_64 rng(22);
    const auto ref = random_site(rng, "ref", 30, {1.0, 0.5}, 0.1);
    const auto small = random_site(rng, "mov", 2, {1.0, 0.5}, 0.1);
    try {
        (void)fit_bundle(ref, small, fixed(0.0, 5.0, 2));
        FAIL("expected SingularDesign");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::SingularDesign);
        CHECK(std::string(e.what()).find("region(s) r:") != std::string::npos);
    }
    auto renamed = small;
    for (auto& r : renamed.records) r.metrics = {{"q", r.metrics.at("r")}};
    CHECK(kind_of([&] { (void)fit_bundle(ref, renamed, Hyperparameters{}); }) == ErrorKind::RegionMismatch);
    auto other_cov = small;
    for (auto& r : other_cov.records) r.covariates.names = {"years"};
    CHECK(kind_of([&] { (void)fit_bundle(ref, other_cov, Hyperparameters{}); }) == ErrorKind::CovariateMismatch);
    auto other_metric = small;
    other_metric.metric_name = "fa";
    CHECK(kind_of([&] { (void)fit_bundle(ref, other_metric, Hyperparameters{}); }) == ErrorKind::InvalidArgument);
}
