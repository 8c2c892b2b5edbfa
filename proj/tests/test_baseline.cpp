#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ccombat/baseline.hpp"
#include "ccombat/clinical.hpp"
#include "test_util.hpp"

#include <random>

using namespace ccombat;
using testutil::kind_of;

namespace {

struct SiteTruth {
    std::string id;
    std::size_t n;
    std::vector<double> gamma;  // per region
    std::vector<double> delta;  // per region
};

// y = alpha_v + beta_v * age + gamma_iv + delta_iv * eps, ages uniform on [20, 80].
std::vector<SiteDataset> combat_data(const std::vector<SiteTruth>& truth, std::size_t n_regions,
                                     std::uint64_t seed, double slope = 0.02) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> age(20.0, 80.0);
    std::normal_distribution<double> eps(0.0, 1.0);
    std::vector<SiteDataset> sites;
    for (const auto& t : truth) {
        SiteDataset s;
        s.site_id = t.id;
        s.metric_name = "md";
        for (std::size_t j = 0; j < t.n; ++j) {
            SubjectRecord r;
            r.subject_id = t.id + std::to_string(j);
            const double a = age(rng);
            r.covariates = {{a}, {"age"}};
            for (std::size_t v = 0; v < n_regions; ++v) {
                const double alpha = 1.0 + 0.1 * static_cast<double>(v);
                r.metrics["r" + std::to_string(v)] =
                    alpha + slope * a + t.gamma[v] + t.delta[v] * eps(rng);
            }
            s.records.push_back(std::move(r));
        }
        sites.push_back(std::move(s));
    }
    return sites;
}

std::vector<SiteTruth> three_sites(std::size_t n, std::size_t regions) {
    std::vector<SiteTruth> t{{"a", n, {}, {}}, {"b", n, {}, {}}, {"c", n, {}, {}}};
    for (std::size_t v = 0; v < regions; ++v) {
        const double g = 0.05 * static_cast<double>(v % 5) - 0.1;
        t[0].gamma.push_back(g);
        t[1].gamma.push_back(-g + 0.2);
        t[2].gamma.push_back(-0.2);  // sums to zero across sites
        t[0].delta.push_back(0.3);
        t[1].delta.push_back(0.5 + 0.02 * static_cast<double>(v));
        t[2].delta.push_back(0.2);
    }
    return t;
}

}  // namespace

TEST_CASE("identical sites show no batch effect") {
    auto sites = combat_data(three_sites(50, 3), 3, 1);
    sites[1] = sites[0];
    sites[1].site_id = "b";
    sites.resize(2);
    const auto m = fit_ls_combat(sites);
    for (const auto& s : {"a", "b"}) CHECK(m.site_gamma.at(s).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((m.site_delta2.at("a") - m.site_delta2.at("b")).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("intercept-only pooled model uses the grand mean") {
    auto sites = combat_data(three_sites(10, 2), 2, 2);
    double sum = 0.0;
    std::size_t count = 0;
    for (auto& s : sites)
        for (auto& r : s.records) {
            r.covariates = {};
            sum += r.metrics.at("r0");
            ++count;
        }
    const auto m = fit_ls_combat(sites);
    CHECK(m.alpha(0) == doctest::Approx(sum / static_cast<double>(count)).epsilon(1e-14));
}

TEST_CASE("location-scale estimates recover the generating biases") {
    const auto truth = three_sites(4000, 4);
    const auto sites = combat_data(truth, 4, 3);
    const auto m = fit_ls_combat(sites);
    CHECK(m.beta(0, 0) == doctest::Approx(0.02).epsilon(0.05));
    for (const auto& t : truth)
        for (std::size_t v = 0; v < 4; ++v) {
            const auto vi = static_cast<Eigen::Index>(v);
            const double se_gamma = t.delta[v] / std::sqrt(static_cast<double>(t.n));
            CHECK(std::abs(m.site_gamma.at(t.id)(vi) - t.gamma[v]) < 4.0 * se_gamma + 0.01);
            const double var = t.delta[v] * t.delta[v];
            const double se_var = var * std::sqrt(2.0 / static_cast<double>(t.n - 1));
            CHECK(std::abs(m.site_delta2.at(t.id)(vi) - var) < 4.0 * se_var);
        }
}

TEST_CASE("a site harmonized onto itself is unchanged") {
    const auto sites = combat_data(three_sites(40, 6), 6, 4);
    for (const auto& m : {fit_ls_combat(sites), fit_eb_combat(sites)}) {
        const auto out = apply_combat(m, std::span<const SiteDataset>(&sites[1], 1), std::string("b"));
        for (std::size_t j = 0; j < sites[1].size(); ++j)
            for (const auto& [region, v] : sites[1].records[j].metrics)
                CHECK(std::abs(out[0].records[j].metrics.at(region) - v) <= 1e-8 * std::abs(v));
    }
}

TEST_CASE("harmonization removes site differences") {
    const auto sites = combat_data(three_sites(200, 6), 6, 5);
    const auto m = fit_eb_combat(sites);
    const auto out = apply_combat(m, sites, std::string("a"));
    for (std::size_t v = 0; v < 6; ++v) {
        const std::string region = "r" + std::to_string(v);
        const auto moments = [&](const SiteDataset& s) {
            Eigen::VectorXd r = s.region_values(region);
            for (std::size_t j = 0; j < s.size(); ++j)
                r(static_cast<Eigen::Index>(j)) -= 0.02 * s.records[j].covariates.values[0];
            const double mean = r.mean();
            return std::pair{mean, (r.array() - mean).square().mean()};
        };
        const auto [ma, va] = moments(sites[0]);
        for (std::size_t i = 1; i < 3; ++i) {
            const auto [mb, vb] = moments(sites[i]);
            const auto [mh, vh] = moments(out[i]);
            CHECK(bhattacharyya_distance(ma, va, mh, vh) < bhattacharyya_distance(ma, va, mb, vb));
        }
    }
}

TEST_CASE("EB iteration reaches the same fixed point from both starts") {
    const auto sites = combat_data(three_sites(60, 10), 10, 6);
    EBOptions a, b;
    a.tol = b.tol = 1e-12;
    a.init = EBInitialization::SampleVariance;
    b.init = EBInitialization::Unit;
    const auto ma = fit_eb_combat(sites, a);
    const auto mb = fit_eb_combat(sites, b);
    for (const auto& id : {"a", "b", "c"}) {
        CHECK(ma.iterations.at(id) < 100);
        CHECK(mb.iterations.at(id) < 100);
        CHECK((ma.site_gamma.at(id) - mb.site_gamma.at(id)).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((ma.site_delta2.at(id) - mb.site_delta2.at(id)).cwiseAbs().maxCoeff() < 1e-9);
        const auto& h = ma.change_history.at(id);
        for (std::size_t t = 3; t + 1 < h.size(); ++t) CHECK(h[t + 1] <= h[t]);
        const auto& p = ma.eb_priors.at(id);
        CHECK(p.tau2_bar >= 0.0);
        CHECK(p.lambda_bar > 2.0);
    }
}

TEST_CASE("zero prior variance pins gamma to the prior mean") {
    auto truth = three_sites(30, 4);
    for (auto& t : truth) t.gamma.assign(4, t.gamma[0]);
    auto sites = combat_data(truth, 4, 7);
    // Shift each region of each site so the standardized means coincide. The
    // shifts move the pooled fit a little, so repeat until they settle.
    for (int pass = 0; pass < 50; ++pass) {
        const auto m0 = fit_ls_combat(sites);
        for (auto& s : sites) {
            const Eigen::VectorXd g = m0.site_gamma.at(s.site_id);
            const Eigen::VectorXd sigma = m0.sigma2.cwiseSqrt();
            const double target = (g.array() / sigma.array()).mean();
            for (auto& r : s.records)
                for (std::size_t v = 0; v < 4; ++v) {
                    const auto vi = static_cast<Eigen::Index>(v);
                    r.metrics["r" + std::to_string(v)] += target * sigma(vi) - g(vi);
                }
        }
    }
    const auto m = fit_eb_combat(sites);
    for (const auto& [id, p] : m.eb_priors) {
        CHECK(p.tau2_bar < 1e-24);
        if (p.tau2_bar == 0.0) CHECK((m.site_gamma.at(id).array() == p.mu_bar).all());
        else CHECK((m.site_gamma.at(id).array() - p.mu_bar).abs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("non-convergence carries the last iterate") {
    const auto sites = combat_data(three_sites(30, 5), 5, 8);
    EBOptions o;
    o.max_iters = 1;
    o.tol = 1e-15;
    try {
        (void)fit_eb_combat(sites, o);
        FAIL("expected EBConvergenceError");
    } catch (const EBConvergenceError& e) {
        CHECK(e.kind() == ErrorKind::ConvergenceFailure);
        CHECK(e.last_iterate().site_gamma.size() == 3);
        CHECK(e.last_iterate().iterations.at("a") == 1);
    }
}

TEST_CASE("baseline input errors") {
    const auto sites = combat_data(three_sites(5, 1), 1, 9);
    CHECK(kind_of([&] { (void)fit_eb_combat(sites); }) == ErrorKind::InsufficientRegions);
    CHECK(kind_of([&] { (void)fit_ls_combat(std::span<const SiteDataset>(sites.data(), 1)); }) ==
          ErrorKind::InsufficientData);
    auto tiny = sites;
    tiny[2].records.resize(1);
    CHECK(kind_of([&] { (void)fit_ls_combat(tiny); }) == ErrorKind::InsufficientData);
    const auto m = fit_ls_combat(sites);
    auto stranger = sites[0];
    stranger.site_id = "z";
    CHECK(kind_of([&] { (void)apply_combat(m, std::span<const SiteDataset>(&stranger, 1)); }) ==
          ErrorKind::UnknownSite);
    CHECK(kind_of([&] { (void)apply_combat(m, sites, std::string("z")); }) == ErrorKind::UnknownSite);
}

TEST_CASE("EB fit is identical across thread counts") {
    const auto sites = combat_data(three_sites(40, 8), 8, 10);
    const auto a = fit_eb_combat(sites, {}, ExecutionOptions{1});
    const auto b = fit_eb_combat(sites, {}, ExecutionOptions{3});
    for (const auto& id : {"a", "b", "c"}) {
        CHECK(a.site_gamma.at(id) == b.site_gamma.at(id));
        CHECK(a.site_delta2.at(id) == b.site_delta2.at(id));
    }
}
