#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ccombat/synth.hpp"
#include "test_util.hpp"

#include <set>

using namespace ccombat;
using testutil::kind_of;

namespace {

GeneratorSpec one_region(double noise, std::size_t n = 200) {
    GeneratorSpec s;
    s.n_subjects = n;
    s.seed = 42;
    s.regions = {{"r", 7.4e-4, {2.5e-5, 4.5e-5}, noise}};
    return s;
}

bool same(const SiteDataset& a, const SiteDataset& b) {
    if (a.size() != b.size() || a.site_id != b.site_id) return false;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const auto& x = a.records[j];
        const auto& y = b.records[j];
        if (x.subject_id != y.subject_id || x.covariates.values != y.covariates.values ||
            x.metrics != y.metrics)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("noiseless reference lies on its curve") {
    const auto spec = one_region(1e-12);
    const auto site = generate_reference(spec);
    for (std::size_t j = 0; j < site.data.size(); ++j) {
        const double age = site.data.records[j].covariates.values[0];
        const double curve = 7.4e-4 + spec.regions[0].age_effect(spec.standardized_age(age));
        CHECK(std::abs(site.data.records[j].metrics.at("r") - curve) < 1e-9);
        CHECK(site.truth.clean(static_cast<Eigen::Index>(j), 0) == curve);
    }
}

TEST_CASE("generation is seed-deterministic") {
    const auto spec = default_fixture(9, 50);
    CHECK(same(generate_reference(spec).data, generate_reference(spec).data));
    auto other = spec;
    other.seed = 10;
    CHECK_FALSE(same(generate_reference(spec).data, generate_reference(other).data));
    const auto a = inject_bias(spec, sample_size_bias(), 30, {18.0, 87.0}, 3);
    const auto b = inject_bias(spec, sample_size_bias(), 30, {18.0, 87.0}, 3);
    CHECK(same(a.data, b.data));
    CHECK(a.truth.unbiased == b.truth.unbiased);
}

TEST_CASE("region noise streams do not depend on region order") {
    auto spec = default_fixture(9, 50);
    const auto full = generate_reference(spec);
    // Regions own their stream by position; dropping trailing regions keeps the rest.
    spec.regions.resize(3);
    const auto part = generate_reference(spec);
    for (std::size_t j = 0; j < part.data.size(); ++j)
        for (const auto& [region, v] : part.data.records[j].metrics)
            CHECK(full.data.records[j].metrics.at(region) == v);
}

TEST_CASE("uniform ages have the expected mean") {
    auto spec = one_region(1e-6, 10000);
    const auto site = generate_reference(spec);
    double mean = 0.0;
    for (const auto& r : site.data.records) {
        mean += r.covariates.values[0];
        CHECK(r.covariates.values[0] >= 18.0);
        CHECK(r.covariates.values[0] <= 87.0);
    }
    mean /= 10000.0;
    CHECK(std::abs(mean - 52.5) < 1.0);

    spec.age_distribution = {AgeDistributionKind::TruncatedGaussian, 30.0, 5.0};
    spec.n_subjects = 2000;
    const auto g = generate_reference(spec);
    double gm = 0.0;
    for (const auto& r : g.data.records) gm += r.covariates.values[0];
    CHECK(std::abs(gm / 2000.0 - 30.0) < 0.5);
}

TEST_CASE("bias injection follows its definition") {
    const auto spec = one_region(3e-6);
    const BiasSpec bias{1.1, 0.5, 1.75, std::nullopt};
    const auto site = inject_bias(spec, bias, 300, {18.0, 87.0}, 5);
    const auto cohort = draw_cohort(spec, 300, {18.0, 87.0}, 5, "moving");
    for (std::size_t j = 0; j < site.data.size(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double t = spec.standardized_age(cohort.ages(jj));
        const double effect = spec.regions[0].age_effect(t);
        const double noise = 3e-6 * cohort.eps(jj, 0);
        CHECK(site.data.records[j].metrics.at("r") ==
              doctest::Approx(1.1 * 7.4e-4 + 0.5 * effect + 1.75 * noise).epsilon(1e-14));
        CHECK(site.truth.unbiased(jj, 0) == doctest::Approx(7.4e-4 + effect + noise).epsilon(1e-14));
    }
}

TEST_CASE("identity bias reproduces the reference law") {
    const auto spec = one_region(3e-6);
    const auto ref = generate_reference(spec);
    const auto cohort = draw_cohort(spec, spec.n_subjects, {spec.age_min, spec.age_max}, spec.seed, "x");
    const auto same_draw = realize(spec, cohort, BiasSpec{}, "x");
    for (std::size_t j = 0; j < ref.data.size(); ++j)
        CHECK(same_draw.data.records[j].metrics.at("r") == ref.data.records[j].metrics.at("r"));
}

TEST_CASE("zero slope gives a flat expected value") {
    const auto spec = one_region(3e-6);
    const auto site = inject_bias(spec, BiasSpec{0.9, 0.0, 1e-9, std::nullopt}, 100, {18.0, 87.0}, 6);
    for (const auto& r : site.data.records) CHECK(r.metrics.at("r") == doctest::Approx(0.9 * 7.4e-4).epsilon(1e-9));
}

TEST_CASE("noise scale multiplies the residual std") {
    const auto spec = one_region(3e-6);
    const auto site = inject_bias(spec, BiasSpec{1.0, 1.0, 1.75, std::nullopt}, 20000, {18.0, 87.0}, 7);
    double ss = 0.0;
    for (Eigen::Index j = 0; j < site.truth.clean.rows(); ++j) {
        const double res = site.data.records[static_cast<std::size_t>(j)].metrics.at("r") - site.truth.clean(j, 0);
        ss += res * res;
    }
    const double sd = std::sqrt(ss / 20000.0);
    CHECK(std::abs(sd / (1.75 * 3e-6) - 1.0) < 0.05);
}

TEST_CASE("windowed sampling") {
    const auto spec = one_region(3e-6, 441);
    const auto site = generate_reference(spec).data;
    const auto [train, test] = sample_restricted(site, 20, AgeWindow{50.0, 10.0}, 3);
    CHECK(train.size() == 20);
    CHECK(test.size() == 421);
    for (const auto& r : train.records) {
        CHECK(r.covariates.values[0] >= 40.0);
        CHECK(r.covariates.values[0] <= 60.0);
    }
    const auto [all, none] = sample_restricted(site, 441, std::nullopt, 3);
    CHECK(none.empty());
    CHECK(same(all, site));
    CHECK(kind_of([&] { (void)sample_restricted(site, 400, AgeWindow{50.0, 10.0}, 3); }) ==
          ErrorKind::InsufficientData);
    CHECK(kind_of([&] { (void)sample_restricted(site, 442, std::nullopt, 3); }) == ErrorKind::InsufficientData);
}

TEST_CASE("repeated draws cover the window population") {
    const auto spec = one_region(3e-6, 441);
    const auto site = generate_reference(spec).data;
    std::size_t in_window = 0;
    for (const auto& r : site.records)
        if (std::abs(r.covariates.values[0] - 50.0) <= 10.0) ++in_window;
    std::set<std::string> seen;
    std::vector<std::size_t> growth;
    for (std::uint64_t s = 0; s < 30; ++s) {
        for (const auto& r : sample_restricted(site, 10, AgeWindow{50.0, 10.0}, s).first.records)
            seen.insert(r.subject_id);
        growth.push_back(seen.size());
    }
    for (std::size_t k = 1; k < growth.size(); ++k) CHECK(growth[k] >= growth[k - 1]);
    CHECK(growth.back() > growth.front());
    CHECK(seen.size() <= in_window);
    CHECK(static_cast<double>(seen.size()) > 0.6 * static_cast<double>(in_window));
}

TEST_CASE("bias injection commutes with subsetting") {
    const auto spec = default_fixture(4, 200);
    const auto bias = sample_size_bias();
    const auto injected = inject_bias(spec, bias, 200, {18.0, 87.0}, 11);
    const auto [train, rest] = sample_restricted(injected.data, 25, AgeWindow{40.0, 15.0}, 12);

    const auto cohort = draw_cohort(spec, 200, {18.0, 87.0}, 11, "moving");
    const auto idx = select_indices(cohort.ages, 25, AgeWindow{40.0, 15.0}, 12);
    const auto direct = realize(spec, subset(cohort, idx), bias, "moving");
    CHECK(same(train, direct.data));

    std::vector<std::string> ids;
    for (const auto& r : train.records) ids.push_back(r.subject_id);
    CHECK(injected.truth.subset(ids).unbiased == direct.truth.unbiased);
    CHECK(kind_of([&] { (void)injected.truth.subset({"nobody"}); }) == ErrorKind::AlignmentError);
}

TEST_CASE("default fixture and presets") {
    const auto spec = default_fixture();
    CHECK(spec.regions.size() == 43);
    CHECK(spec.regions[0].region_id == "wm_skeleton");
    CHECK(spec.regions[1].region_id == "bundle_01");
    CHECK(spec.n_subjects == 441);
    const auto site = generate_reference(spec);
    const auto v = site.data.region_values("wm_skeleton");
    CHECK(v.minCoeff() > 6e-4);
    CHECK(v.maxCoeff() < 9e-4);

    const auto a = sample_size_bias();
    CHECK((a.S == 0.75 && a.M == 1.5 && a.A == 0.9));
    const auto b = sample_size_bias_alt();
    CHECK((b.S == 0.5 && b.M == 1.25 && b.A == 1.1));
    const auto c = age_window_bias();
    CHECK((c.S == 1.0 && c.M == 1.5 && c.A == 0.9));

    CHECK(kind_of([] { BiasSpec{1.0, 1.0, 0.0, std::nullopt}.validate(); }) == ErrorKind::InvalidArgument);
    auto bad = spec;
    bad.age_max = bad.age_min;
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::InvalidArgument);
}
