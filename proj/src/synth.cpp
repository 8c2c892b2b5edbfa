#include "ccombat/synth.hpp"

#include "ccombat/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <unordered_map>

namespace ccombat {

namespace {

// Independent engine per (seed, stream) so each region draws its noise from
// its own sequence.
std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

constexpr std::uint64_t kAgeStream = 0;
constexpr std::uint64_t kNoiseStreamBase = 1;

std::string subject_id(const std::string& prefix, std::size_t j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu", j + 1);
    return prefix + "-" + buf;
}

}  // namespace

double RegionCurve::age_effect(double t) const {
    double acc = 0.0;
    double power = t;
    for (double c : coefficients) {
        acc += c * power;
        power *= t;
    }
    return acc;
}

void GeneratorSpec::validate() const {
    if (n_subjects == 0) throw Error(ErrorKind::InvalidArgument, "generator needs at least one subject");
    if (!(age_max > age_min)) throw Error(ErrorKind::InvalidArgument, "age range is empty");
    if (!(age_scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "age scale must be positive");
    if (regions.empty()) throw Error(ErrorKind::InvalidArgument, "generator has no regions");
    if (age_distribution.kind == AgeDistributionKind::TruncatedGaussian &&
        !(age_distribution.std > 0.0))
        throw Error(ErrorKind::InvalidArgument, "age distribution std must be positive");
    for (const auto& r : regions) {
        if (!(r.noise_std >= 0.0)) throw Error(ErrorKind::InvalidArgument, "noise std must be >= 0");
    }
}

void BiasSpec::validate() const {
    if (!std::isfinite(A) || !std::isfinite(S)) throw Error(ErrorKind::InvalidArgument, "bias must be finite");
    if (!(M > 0.0) || !std::isfinite(M)) throw Error(ErrorKind::InvalidArgument, "bias M must be > 0");
    if (b && !std::isfinite(*b)) throw Error(ErrorKind::InvalidArgument, "baseline override must be finite");
}

GroundTruth GroundTruth::subset(const std::vector<std::string>& ids) const {
    std::unordered_map<std::string, Eigen::Index> row;
    for (std::size_t j = 0; j < subject_ids.size(); ++j) row.emplace(subject_ids[j], static_cast<Eigen::Index>(j));
    GroundTruth out;
    out.subject_ids = ids;
    out.region_ids = region_ids;
    out.clean.resize(static_cast<Eigen::Index>(ids.size()), clean.cols());
    out.unbiased.resize(static_cast<Eigen::Index>(ids.size()), unbiased.cols());
    for (std::size_t j = 0; j < ids.size(); ++j) {
        auto it = row.find(ids[j]);
        if (it == row.end())
            throw Error(ErrorKind::AlignmentError, "subject '" + ids[j] + "' has no ground truth");
        out.clean.row(static_cast<Eigen::Index>(j)) = clean.row(it->second);
        out.unbiased.row(static_cast<Eigen::Index>(j)) = unbiased.row(it->second);
    }
    return out;
}

Cohort draw_cohort(const GeneratorSpec& spec, std::size_t n_subjects,
                   std::pair<double, double> age_range, std::uint64_t seed,
                   const std::string& id_prefix) {
    spec.validate();
    const auto [lo, hi] = age_range;
    if (!(hi >= lo)) throw Error(ErrorKind::InvalidArgument, "age range is empty");
    const auto n = static_cast<Eigen::Index>(n_subjects);
    const auto n_reg = static_cast<Eigen::Index>(spec.regions.size());

    Cohort c;
    c.ages.resize(n);
    c.eps.resize(n, n_reg);
    c.subject_ids.reserve(n_subjects);

    auto age_rng = make_engine(seed, kAgeStream);
    if (spec.age_distribution.kind == AgeDistributionKind::Uniform) {
        std::uniform_real_distribution<double> u(lo, hi);
        for (Eigen::Index j = 0; j < n; ++j) c.ages(j) = lo == hi ? lo : u(age_rng);
    } else {
        std::normal_distribution<double> g(spec.age_distribution.mean, spec.age_distribution.std);
        for (Eigen::Index j = 0; j < n; ++j) {
            double a = g(age_rng);
            for (int attempt = 0; (a < lo || a > hi) && attempt < 100000; ++attempt) a = g(age_rng);
            if (a < lo || a > hi)
                throw Error(ErrorKind::InvalidArgument, "age distribution has no mass in the range");
            c.ages(j) = a;
        }
    }
    for (Eigen::Index r = 0; r < n_reg; ++r) {
        auto rng = make_engine(seed, kNoiseStreamBase + static_cast<std::uint64_t>(r));
        std::normal_distribution<double> g(0.0, 1.0);
        for (Eigen::Index j = 0; j < n; ++j) c.eps(j, r) = g(rng);
    }
    for (std::size_t j = 0; j < n_subjects; ++j) c.subject_ids.push_back(subject_id(id_prefix, j));
    return c;
}

SyntheticSite realize(const GeneratorSpec& spec, const Cohort& cohort, const BiasSpec& bias,
                      const std::string& site_id) {
    spec.validate();
    bias.validate();
    const auto n = cohort.ages.size();
    const auto n_reg = static_cast<Eigen::Index>(spec.regions.size());
    if (cohort.eps.rows() != n || cohort.eps.cols() != n_reg ||
        cohort.subject_ids.size() != static_cast<std::size_t>(n))
        throw Error(ErrorKind::AlignmentError, "cohort does not match the generator regions");

    SyntheticSite out;
    out.data.site_id = site_id;
    out.data.metric_name = spec.metric_name;
    out.truth.subject_ids = cohort.subject_ids;
    for (const auto& r : spec.regions) out.truth.region_ids.push_back(r.region_id);
    out.truth.clean.resize(n, n_reg);
    out.truth.unbiased.resize(n, n_reg);
    out.data.records.resize(static_cast<std::size_t>(n));

    for (Eigen::Index j = 0; j < n; ++j) {
        auto& rec = out.data.records[static_cast<std::size_t>(j)];
        rec.subject_id = cohort.subject_ids[static_cast<std::size_t>(j)];
        rec.covariates.names = {"age"};
        rec.covariates.values = {cohort.ages(j)};
        const double t = spec.standardized_age(cohort.ages(j));
        for (Eigen::Index r = 0; r < n_reg; ++r) {
            const auto& curve = spec.regions[static_cast<std::size_t>(r)];
            const double b = bias.b.value_or(curve.intercept);
            const double effect = curve.age_effect(t);
            const double noise = curve.noise_std * cohort.eps(j, r);
            out.truth.clean(j, r) = curve.intercept + effect;
            out.truth.unbiased(j, r) = curve.intercept + effect + noise;
            rec.metrics[curve.region_id] = bias.A * b + bias.S * effect + bias.M * noise;
        }
    }
    return out;
}

SyntheticSite generate_reference(const GeneratorSpec& spec) {
    const Cohort c = draw_cohort(spec, spec.n_subjects, {spec.age_min, spec.age_max}, spec.seed,
                                 spec.site_id);
    return realize(spec, c, BiasSpec{}, spec.site_id);
}

SyntheticSite inject_bias(const GeneratorSpec& reference_spec, const BiasSpec& bias,
                          std::size_t n_subjects, std::pair<double, double> age_range,
                          std::uint64_t seed, const std::string& site_id) {
    const Cohort c = draw_cohort(reference_spec, n_subjects, age_range, seed, site_id);
    return realize(reference_spec, c, bias, site_id);
}

std::vector<std::size_t> select_indices(const Eigen::VectorXd& ages, std::size_t n,
                                        const std::optional<AgeWindow>& window, std::uint64_t seed) {
    std::vector<std::size_t> eligible;
    for (Eigen::Index j = 0; j < ages.size(); ++j) {
        if (!window || std::abs(ages(j) - window->center) <= window->half_width)
            eligible.push_back(static_cast<std::size_t>(j));
    }
    if (eligible.size() < n)
        throw Error(ErrorKind::InsufficientData,
                    "requested " + std::to_string(n) + " subjects but only " +
                        std::to_string(eligible.size()) + " are eligible");
    auto rng = make_engine(seed, kAgeStream);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(n);
    std::sort(eligible.begin(), eligible.end());
    return eligible;
}

std::pair<SiteDataset, SiteDataset> sample_restricted(const SiteDataset& dataset, std::size_t n,
                                                      const std::optional<AgeWindow>& window,
                                                      std::uint64_t seed) {
    Eigen::VectorXd ages(static_cast<Eigen::Index>(dataset.size()));
    for (std::size_t j = 0; j < dataset.size(); ++j) {
        const auto& v = dataset.records[j].covariates.values;
        if (v.empty()) throw Error(ErrorKind::CovariateMismatch, "sampling needs an age covariate");
        ages(static_cast<Eigen::Index>(j)) = v.front();
    }
    const auto picked = select_indices(ages, n, window, seed);
    std::pair<SiteDataset, SiteDataset> out;
    out.first.site_id = out.second.site_id = dataset.site_id;
    out.first.metric_name = out.second.metric_name = dataset.metric_name;
    std::size_t p = 0;
    for (std::size_t j = 0; j < dataset.size(); ++j) {
        if (p < picked.size() && picked[p] == j) {
            out.first.records.push_back(dataset.records[j]);
            ++p;
        } else {
            out.second.records.push_back(dataset.records[j]);
        }
    }
    return out;
}

Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& indices) {
    Cohort out;
    out.ages.resize(static_cast<Eigen::Index>(indices.size()));
    out.eps.resize(static_cast<Eigen::Index>(indices.size()), cohort.eps.cols());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto j = static_cast<Eigen::Index>(indices[k]);
        if (j >= cohort.ages.size()) throw Error(ErrorKind::AlignmentError, "cohort index out of range");
        out.ages(static_cast<Eigen::Index>(k)) = cohort.ages(j);
        out.eps.row(static_cast<Eigen::Index>(k)) = cohort.eps.row(j);
        out.subject_ids.push_back(cohort.subject_ids[indices[k]]);
    }
    return out;
}

GeneratorSpec default_fixture(std::uint64_t seed, std::size_t n_subjects) {
    GeneratorSpec spec;
    spec.n_subjects = n_subjects;
    spec.seed = seed;

    // MD-like skeleton curve: flat through midlife, rising after 60.
    spec.regions.push_back({"wm_skeleton", 7.4e-4, {2.5e-5, 4.5e-5}, 3.0e-6});

    // Bundles share the shape with fixed perturbations, independent of `seed`.
    auto rng = make_engine(0x5eedf1c7u, 0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 1; k <= 42; ++k) {
        char name[16];
        std::snprintf(name, sizeof name, "bundle_%02d", k);
        const double b = 7.4e-4 * (1.0 + 0.12 * u(rng));
        const double c1 = 2.5e-5 * (1.0 + 0.4 * u(rng));
        const double c2 = 4.5e-5 * (1.0 + 0.4 * u(rng));
        const double s = 3.0e-6 * (1.0 + 0.3 * u(rng));
        spec.regions.push_back({name, b, {c1, c2}, s});
    }
    return spec;
}

BiasSpec sample_size_bias() { return {0.90, 0.75, 1.50, std::nullopt}; }
BiasSpec sample_size_bias_alt() { return {1.10, 0.50, 1.25, std::nullopt}; }
BiasSpec age_window_bias() { return {0.90, 1.00, 1.50, std::nullopt}; }

}  // namespace ccombat
