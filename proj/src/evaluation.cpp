#include "ccombat/evaluation.hpp"

#include "ccombat/basis.hpp"
#include "ccombat/clinical.hpp"
#include "ccombat/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_map>

namespace ccombat {

namespace {

constexpr std::uint64_t kReferenceStream = 1;
constexpr std::uint64_t kMovingStream = 2;
constexpr std::uint64_t kSplitStream = 3;
constexpr std::uint64_t kTrainStream = 4;
constexpr std::uint64_t kTestStream = 5;

const std::string kReferenceSite = "reference";
const std::string kMovingSite = "moving";

// Pooled ComBAT models covariates linearly; it gets the same polynomial
// terms of age that Clinical-ComBAT's basis uses so both see one model class.
SiteDataset polynomial_covariates(const SiteDataset& data, int degree) {
    SiteDataset out = data;
    for (auto& rec : out.records) {
        const double age = rec.covariates.values.at(0);
        rec.covariates.values.clear();
        rec.covariates.names.clear();
        double p = 1.0;
        for (int k = 1; k <= degree; ++k) {
            p *= age;
            rec.covariates.values.push_back(p);
            rec.covariates.names.push_back(k == 1 ? "age" : "age^" + std::to_string(k));
        }
    }
    return out;
}

struct ReferenceQc {
    BasisSpec basis;
    std::map<std::string, Eigen::VectorXd> beta;
};

ReferenceQc reference_qc(const SiteDataset& reference, const std::vector<std::string>& regions,
                         const Hyperparameters& hp) {
    ReferenceQc q;
    q.basis = make_basis(reference, hp.degree, hp.basis_mode);
    for (const auto& r : regions) q.beta[r] = fit_reference(reference, r, q.basis).beta;
    return q;
}

double mean_qc(const ReferenceQc& q, const SiteDataset& reference, const SiteDataset& moving,
               const std::vector<std::string>& regions) {
    double acc = 0.0;
    for (const auto& r : regions)
        acc += qc_bhattacharyya(reference, moving.records, r, q.beta.at(r), q.basis);
    return acc / static_cast<double>(regions.size());
}

void score(RepetitionResult& res, const SiteDataset& harmonized, const GroundTruth& truth,
           const std::vector<std::string>& regions) {
    res.metrics["rmse"] = rmse_to_truth(harmonized, truth, regions);
    for (const auto& r : regions) res.per_region_rmse[r] = rmse_to_truth(harmonized, truth, {r});
}

std::vector<std::string> ids_of(const SiteDataset& data) {
    std::vector<std::string> ids;
    ids.reserve(data.size());
    for (const auto& rec : data.records) ids.push_back(rec.subject_id);
    return ids;
}

SiteDataset with_site(SiteDataset data, const std::string& site_id) {
    data.site_id = site_id;
    return data;
}

// One repetition of one condition: every requested method trained on
// `train` and scored on `test`.
struct JobData {
    SiteDataset reference;  // all regions
    SiteDataset train;      // all regions
    SiteDataset test;       // all regions
    GroundTruth truth;      // rows of `test`
};

SiteDataset harmonize_clinical(const JobData& d, const std::vector<std::string>& regions,
                               const Hyperparameters& hp, HarmonizationBundle* bundle_out) {
    const auto ref = select_regions(d.reference, regions);
    const auto train = select_regions(d.train, regions);
    const auto test = select_regions(d.test, regions);
    HarmonizationBundle bundle = fit_bundle(ref, train, hp);
    SiteDataset out = test;
    out.records = ccombat::apply(bundle, test.records);
    if (bundle_out) *bundle_out = std::move(bundle);
    return out;
}

SiteDataset harmonize_eb(const JobData& d, const std::vector<std::string>& regions,
                         const Hyperparameters& hp, const EBOptions& eb) {
    const std::vector<SiteDataset> sites{polynomial_covariates(d.reference, hp.degree),
                                         polynomial_covariates(d.train, hp.degree)};
    const PooledModel model = fit_eb_combat(sites, eb);
    const std::vector<SiteDataset> test{polynomial_covariates(d.test, hp.degree)};
    SiteDataset out = apply_combat(model, test, kReferenceSite).front();
    // Restore the original covariates so downstream QC sees ages.
    for (std::size_t j = 0; j < out.records.size(); ++j)
        out.records[j].covariates = d.test.records[j].covariates;
    return select_regions(out, regions);
}

std::vector<RepetitionResult> run_methods(const JobData& d, const ExperimentSettings& s,
                                          const Hyperparameters& hp, std::size_t condition,
                                          int repetition, std::uint64_t seed,
                                          const std::optional<AgeWindow>& window) {
    std::vector<RepetitionResult> out;
    std::optional<ReferenceQc> qc;
    std::string qc_error;
    try {
        qc = reference_qc(d.reference, s.regions, hp);
    } catch (const std::exception& e) {
        qc_error = e.what();
    }
    const auto raw_test = select_regions(d.test, s.regions);
    const double d_before = qc ? mean_qc(*qc, d.reference, raw_test, s.regions) : 0.0;

    std::vector<std::size_t> outside;
    if (window) {
        for (std::size_t j = 0; j < d.test.size(); ++j) {
            if (std::abs(d.test.records[j].covariates.values.at(0) - window->center) > window->half_width)
                outside.push_back(j);
        }
    }

    for (Method m : s.methods) {
        RepetitionResult res;
        res.condition = condition;
        res.repetition = repetition;
        res.method = m;
        res.seed = seed;
        try {
            if (!qc) throw Error(ErrorKind::InsufficientData, qc_error);
            SiteDataset harmonized;
            switch (m) {
            case Method::ClinicalComBAT:
                harmonized = harmonize_clinical(d, s.regions, hp, nullptr);
                break;
            case Method::ClinicalComBATUnregularized: {
                Hyperparameters h = hp;
                h.fixed_lambda = std::vector<double>{0.0};
                harmonized = harmonize_clinical(d, s.regions, h, nullptr);
                break;
            }
            case Method::EBComBAT:
                harmonized = harmonize_eb(d, s.regions, hp, s.eb);
                break;
            case Method::None:
                harmonized = raw_test;
                break;
            }
            score(res, harmonized, d.truth, s.regions);
            res.metrics["d_b_before"] = d_before;
            res.metrics["d_b_after"] = mean_qc(*qc, d.reference, harmonized, s.regions);
            if (window) {
                SiteDataset out_win;
                out_win.site_id = harmonized.site_id;
                out_win.metric_name = harmonized.metric_name;
                for (std::size_t j : outside) out_win.records.push_back(harmonized.records[j]);
                res.metrics["rmse_out_of_window"] =
                    out_win.empty() ? 0.0 : rmse_to_truth(out_win, d.truth, s.regions);
            }
        } catch (const std::exception& e) {
            res.error = e.what();
            res.metrics.clear();
            res.per_region_rmse.clear();
        }
        out.push_back(std::move(res));
    }
    return out;
}

SyntheticSite make_reference(const ExperimentSettings& s, std::size_t n, int rep) {
    GeneratorSpec spec = s.spec;
    spec.site_id = kReferenceSite;
    spec.n_subjects = n;
    spec.seed = derive_seed(s.seed, kReferenceStream, static_cast<std::uint64_t>(rep));
    return generate_reference(spec);
}

SyntheticSite make_moving(const ExperimentSettings& s, const BiasSpec& bias, std::size_t n, int rep,
                          std::uint64_t extra = 0) {
    return inject_bias(s.spec, bias, n, {s.spec.age_min, s.spec.age_max},
                       derive_seed(s.seed, kMovingStream, static_cast<std::uint64_t>(rep), extra),
                       kMovingSite);
}

// Runs `conditions x repetitions` jobs in parallel and collects the results
// in (condition, repetition, method) order.
template <class Job>
void run_jobs(ExperimentReport& report, const ExperimentSettings& s, const Job& job) {
    const std::size_t n_cond = report.conditions.size();
    const auto reps = static_cast<std::size_t>(std::max(s.repetitions, 0));
    std::vector<std::vector<RepetitionResult>> slots(n_cond * reps);
    const auto errors = parallel_for(slots.size(), ExecutionOptions{s.threads}, [&](std::size_t i) {
        slots[i] = job(i / reps, static_cast<int>(i % reps));
    });
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (errors[i]) {
            std::string what = "unknown failure";
            try {
                std::rethrow_exception(errors[i]);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            for (Method m : s.methods) {
                RepetitionResult r;
                r.condition = i / reps;
                r.repetition = static_cast<int>(i % reps);
                r.method = m;
                r.error = what;
                slots[i].push_back(std::move(r));
            }
        }
        for (auto& r : slots[i]) report.results.push_back(std::move(r));
    }
}

void check_settings(const ExperimentSettings& s) {
    s.spec.validate();
    s.hp.validate();
    if (s.repetitions < 1) throw Error(ErrorKind::InvalidArgument, "repetitions must be >= 1");
    if (s.methods.empty()) throw Error(ErrorKind::InvalidArgument, "no methods requested");
    if (s.regions.empty()) throw Error(ErrorKind::InvalidArgument, "no regions to score");
    for (const auto& r : s.regions) {
        const bool known = std::any_of(s.spec.regions.begin(), s.spec.regions.end(),
                                       [&](const RegionCurve& c) { return c.region_id == r; });
        if (!known) throw Error(ErrorKind::UnknownRegion, "region '" + r + "' is not generated");
    }
}

std::string format_label(const std::string& key, double v) {
    std::ostringstream os;
    os << key << "=" << v;
    return os.str();
}

}  // namespace

std::string_view to_string(Method m) {
    switch (m) {
    case Method::ClinicalComBAT: return "ClinicalComBAT";
    case Method::ClinicalComBATUnregularized: return "ClinicalComBATLambda0";
    case Method::EBComBAT: return "EBComBAT";
    case Method::None: return "None";
    }
    return "None";
}

Method method_from_string(std::string_view name) {
    for (Method m : {Method::ClinicalComBAT, Method::ClinicalComBATUnregularized, Method::EBComBAT,
                     Method::None}) {
        if (to_string(m) == name) return m;
    }
    throw Error(ErrorKind::InvalidArgument, "unknown method '" + std::string(name) + "'");
}

double rmse_to_truth(const SiteDataset& harmonized, const GroundTruth& truth,
                     const std::vector<std::string>& regions) {
    std::unordered_map<std::string, Eigen::Index> row;
    for (std::size_t j = 0; j < truth.subject_ids.size(); ++j)
        row.emplace(truth.subject_ids[j], static_cast<Eigen::Index>(j));
    const auto& wanted = regions.empty() ? truth.region_ids : regions;
    std::vector<Eigen::Index> cols;
    for (const auto& r : wanted) {
        auto it = std::find(truth.region_ids.begin(), truth.region_ids.end(), r);
        if (it == truth.region_ids.end())
            throw Error(ErrorKind::AlignmentError, "region '" + r + "' has no ground truth");
        cols.push_back(static_cast<Eigen::Index>(it - truth.region_ids.begin()));
    }
    if (harmonized.empty() || cols.empty())
        throw Error(ErrorKind::AlignmentError, "nothing to score");
    double ss = 0.0;
    std::size_t count = 0;
    for (const auto& rec : harmonized.records) {
        auto it = row.find(rec.subject_id);
        if (it == row.end())
            throw Error(ErrorKind::AlignmentError, "subject '" + rec.subject_id + "' has no ground truth");
        for (std::size_t k = 0; k < cols.size(); ++k) {
            auto v = rec.metrics.find(wanted[k]);
            if (v == rec.metrics.end())
                throw Error(ErrorKind::AlignmentError,
                            "subject '" + rec.subject_id + "' lacks region '" + wanted[k] + "'");
            const double diff = v->second - truth.unbiased(it->second, cols[k]);
            ss += diff * diff;
            ++count;
        }
    }
    return std::sqrt(ss / static_cast<double>(count));
}

Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    a.count = values.size();
    if (values.empty()) return a;
    double sum = 0.0;
    for (double v : values) sum += v;
    a.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return a;
}

std::vector<double> ExperimentReport::values(std::size_t condition, Method method,
                                             const std::string& metric) const {
    std::vector<double> out;
    for (const auto& r : results) {
        if (r.condition != condition || r.method != method || !r.error.empty()) continue;
        auto it = r.metrics.find(metric);
        if (it != r.metrics.end()) out.push_back(it->second);
    }
    return out;
}

Aggregate ExperimentReport::summary(std::size_t condition, Method method,
                                    const std::string& metric) const {
    return aggregate(values(condition, method, metric));
}

std::size_t ExperimentReport::condition_index(const std::string& label) const {
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        if (conditions[i].label == label) return i;
    }
    throw Error(ErrorKind::InvalidArgument, "no condition '" + label + "'");
}

SiteDataset select_regions(const SiteDataset& data, const std::vector<std::string>& regions) {
    SiteDataset out;
    out.site_id = data.site_id;
    out.metric_name = data.metric_name;
    out.records.reserve(data.size());
    for (const auto& rec : data.records) {
        SubjectRecord r;
        r.subject_id = rec.subject_id;
        r.covariates = rec.covariates;
        for (const auto& name : regions) {
            auto it = rec.metrics.find(name);
            if (it == rec.metrics.end())
                throw Error(ErrorKind::UnknownRegion,
                            "region '" + name + "' missing for subject '" + rec.subject_id + "'");
            r.metrics.emplace(name, it->second);
        }
        out.records.push_back(std::move(r));
    }
    return out;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
                      static_cast<std::uint32_t>(c),    static_cast<std::uint32_t>(c >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

ExperimentReport run_bias_grid(const BiasGridConfig& grid, const ExperimentSettings& settings) {
    check_settings(settings);
    if (grid.S.empty() || grid.M.empty()) throw Error(ErrorKind::InvalidArgument, "bias grid is empty");
    ExperimentReport report;
    report.experiment_id = "bias_grid";
    report.settings = settings;
    report.parameters = {{"A", grid.A},
                         {"n_reference", static_cast<double>(grid.n_reference)},
                         {"n_moving", static_cast<double>(grid.n_moving)}};
    for (double s : grid.S) {
        for (double m : grid.M) {
            BiasSpec{grid.A, s, m, std::nullopt}.validate();
            report.conditions.push_back({format_label("S", s) + "," + format_label("M", m), {{"S", s}, {"M", m}}});
        }
    }
    run_jobs(report, settings, [&](std::size_t c, int rep) {
        const auto& p = report.conditions[c].params;
        const BiasSpec bias{grid.A, p.at("S"), p.at("M"), std::nullopt};
        JobData d;
        d.reference = make_reference(settings, grid.n_reference, rep).data;
        // The cell index keeps cells independent; the latent cohort is shared
        // across methods within the cell.
        auto moving = make_moving(settings, bias, grid.n_moving, rep, c);
        d.train = moving.data;
        d.test = moving.data;
        d.truth = std::move(moving.truth);
        return run_methods(d, settings, settings.hp, c, rep,
                           derive_seed(settings.seed, kMovingStream, static_cast<std::uint64_t>(rep), c),
                           std::nullopt);
    });
    return report;
}

namespace {

// Shared by the sample-size and age-window curves so a window covering the
// whole range reproduces the sample-size result.
JobData split_job(const ExperimentSettings& s, const BiasSpec& bias, std::size_t n_reference,
                  std::size_t n_moving, std::size_t n_test, std::size_t n_train,
                  const std::optional<AgeWindow>& window, int rep) {
    if (n_test >= n_moving)
        throw Error(ErrorKind::InvalidArgument, "test set must leave a training pool");
    JobData d;
    d.reference = make_reference(s, n_reference, rep).data;
    auto moving = make_moving(s, bias, n_moving, rep);
    const auto r = static_cast<std::uint64_t>(rep);
    auto [test, pool] = sample_restricted(moving.data, n_test, std::nullopt,
                                          derive_seed(s.seed, kSplitStream, r));
    auto [train, rest] = sample_restricted(pool, n_train, window, derive_seed(s.seed, kTrainStream, r));
    d.train = std::move(train);
    d.test = std::move(test);
    d.truth = moving.truth.subset(ids_of(d.test));
    return d;
}

}  // namespace

ExperimentReport run_sample_size_curve(const SampleSizeConfig& config,
                                       const ExperimentSettings& settings) {
    check_settings(settings);
    config.bias.validate();
    if (config.sizes.empty()) throw Error(ErrorKind::InvalidArgument, "no sample sizes");
    const std::size_t pool = config.n_moving > config.n_test ? config.n_moving - config.n_test : 0;
    for (auto n : config.sizes) {
        if (n > pool)
            throw Error(ErrorKind::InsufficientData,
                        "size " + std::to_string(n) + " exceeds the training pool of " + std::to_string(pool));
    }
    ExperimentReport report;
    report.experiment_id = "sample_size";
    report.settings = settings;
    report.parameters = {{"A", config.bias.A},
                         {"S", config.bias.S},
                         {"M", config.bias.M},
                         {"n_reference", static_cast<double>(config.n_reference)},
                         {"n_moving", static_cast<double>(config.n_moving)},
                         {"n_test", static_cast<double>(config.n_test)}};
    for (auto n : config.sizes)
        report.conditions.push_back({"n=" + std::to_string(n), {{"n", static_cast<double>(n)}}});
    run_jobs(report, settings, [&](std::size_t c, int rep) {
        const auto n = config.sizes[c];
        const JobData d = split_job(settings, config.bias, config.n_reference, config.n_moving,
                                    config.n_test, n, std::nullopt, rep);
        return run_methods(d, settings, settings.hp, c, rep,
                           derive_seed(settings.seed, kTrainStream, static_cast<std::uint64_t>(rep)),
                           std::nullopt);
    });
    return report;
}

ExperimentReport run_age_window_curve(const AgeWindowConfig& config,
                                      const ExperimentSettings& settings) {
    check_settings(settings);
    config.bias.validate();
    if (config.centers.empty()) throw Error(ErrorKind::InvalidArgument, "no window centers");
    if (!(config.half_width > 0.0)) throw Error(ErrorKind::InvalidArgument, "half width must be > 0");
    ExperimentReport report;
    report.experiment_id = "age_window";
    report.settings = settings;
    report.parameters = {{"A", config.bias.A},
                         {"S", config.bias.S},
                         {"M", config.bias.M},
                         {"half_width", config.half_width},
                         {"tau", config.tau.value_or(settings.hp.tau)},
                         {"n_train", static_cast<double>(config.n_train)},
                         {"n_reference", static_cast<double>(config.n_reference)},
                         {"n_moving", static_cast<double>(config.n_moving)},
                         {"n_test", static_cast<double>(config.n_test)}};
    for (double c : config.centers) {
        if (c + config.half_width < settings.spec.age_min || c - config.half_width > settings.spec.age_max)
            throw Error(ErrorKind::InvalidArgument, format_label("window center", c) + " misses the age range");
        report.conditions.push_back({format_label("center", c), {{"center", c}}});
    }
    run_jobs(report, settings, [&](std::size_t c, int rep) {
        const AgeWindow w{config.centers[c], config.half_width};
        const JobData d = split_job(settings, config.bias, config.n_reference, config.n_moving,
                                    config.n_test, config.n_train, w, rep);
        Hyperparameters hp = settings.hp;
        if (config.tau) hp.tau = *config.tau;
        return run_methods(d, settings, hp, c, rep,
                           derive_seed(settings.seed, kTrainStream, static_cast<std::uint64_t>(rep)), w);
    });
    return report;
}

ExperimentReport run_nu_sweep(const NuSweepConfig& config, const ExperimentSettings& settings) {
    check_settings(settings);
    config.bias.validate();
    if (config.nu.empty()) throw Error(ErrorKind::InvalidArgument, "no nu values");
    ExperimentReport report;
    report.experiment_id = "nu_sweep";
    report.settings = settings;
    report.settings.methods = {Method::ClinicalComBAT};
    report.parameters = {{"A", config.bias.A},
                         {"S", config.bias.S},
                         {"M", config.bias.M},
                         {"n_train", static_cast<double>(config.n_train)},
                         {"n_test", static_cast<double>(config.n_test)},
                         {"n_reference", static_cast<double>(config.n_reference)}};
    for (double nu : config.nu) {
        if (!(nu >= 0.0)) throw Error(ErrorKind::InvalidArgument, "nu must be >= 0");
        report.conditions.push_back({format_label("nu", nu), {{"nu", nu}}});
    }
    const ExperimentSettings& s = report.settings;
    run_jobs(report, s, [&](std::size_t c, int rep) {
        Hyperparameters hp = s.hp;
        hp.nu = config.nu[c];
        const auto r = static_cast<std::uint64_t>(rep);
        JobData d;
        d.reference = make_reference(s, config.n_reference, rep).data;
        // Same training and test subjects for every nu.
        d.train = inject_bias(s.spec, config.bias, config.n_train, {s.spec.age_min, s.spec.age_max},
                              derive_seed(s.seed, kTrainStream, r), kMovingSite)
                      .data;
        auto test = inject_bias(s.spec, config.bias, config.n_test, {s.spec.age_min, s.spec.age_max},
                                derive_seed(s.seed, kTestStream, r), kMovingSite + "-test");
        d.test = with_site(std::move(test.data), kMovingSite);
        d.truth = std::move(test.truth);
        auto results = run_methods(d, s, hp, c, rep, derive_seed(s.seed, kTrainStream, r), std::nullopt);

        // Residual spread of the harmonized test draw against the reference.
        auto& res = results.front();
        if (res.error.empty()) {
            try {
                HarmonizationBundle bundle;
                const SiteDataset harmonized = harmonize_clinical(d, s.regions, hp, &bundle);
                double ratio = 0.0;
                for (const auto& region : s.regions) {
                    const auto& model = bundle.models.at(region);
                    const auto rr = rectify(design_matrix(harmonized, model.basis),
                                            harmonized.region_values(region), model.beta_ref,
                                            ResidualSource::MovingHarmonized);
                    const double mean = rr.values.mean();
                    const double sd = std::sqrt((rr.values.array() - mean).square().mean());
                    ratio += sd / std::sqrt(model.var_ref);
                }
                res.metrics["std_ratio"] = ratio / static_cast<double>(s.regions.size());
            } catch (const std::exception& e) {
                res.error = e.what();
                res.metrics.clear();
            }
        }
        return results;
    });
    return report;
}

}  // namespace ccombat
