#include "ccombat/clinical.hpp"

#include "ccombat/basis.hpp"
#include "ccombat/error.hpp"
#include "linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ccombat {

namespace {

Eigen::VectorXd broadcast_lambda(const Eigen::VectorXd& lambda, Eigen::Index dim) {
    if (lambda.size() == 1) return Eigen::VectorXd::Constant(dim, lambda(0));
    if (lambda.size() != dim)
        throw Error(ErrorKind::InvalidArgument,
                    "lambda has " + std::to_string(lambda.size()) + " entries, expected " +
                        std::to_string(dim));
    return lambda;
}

double sign(double x) { return x >= 0.0 ? 1.0 : -1.0; }

struct Moments {
    double mean = 0.0;
    double variance = 0.0;
};

Moments population_moments(const Eigen::VectorXd& v) {
    if (v.size() == 0) throw Error(ErrorKind::InsufficientData, "empty residual population");
    const double n = static_cast<double>(v.size());
    const double mean = v.sum() / n;
    const double var = (v.array() - mean).square().sum() / n;
    return {mean, var};
}

// Stacks the covariates and one region's values of subject records.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> collect(std::span<const SubjectRecord> records,
                                                    const std::string& region,
                                                    const BasisSpec& basis) {
    const auto n = static_cast<Eigen::Index>(records.size());
    Eigen::MatrixXd phi(n, static_cast<Eigen::Index>(feature_dimension(basis)));
    Eigen::VectorXd y(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& rec = records[static_cast<std::size_t>(j)];
        phi.row(j) = expand_basis(rec.covariates, basis).transpose();
        auto it = rec.metrics.find(region);
        if (it == rec.metrics.end())
            throw Error(ErrorKind::UnknownRegion,
                        "region '" + region + "' missing for subject '" + rec.subject_id + "'");
        y(j) = it->second;
    }
    return {phi, y};
}

}  // namespace

ReferenceFit fit_reference(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y) {
    if (phi.rows() != y.size())
        throw Error(ErrorKind::InvalidArgument, "design matrix and values differ in length");
    if (phi.rows() <= phi.cols())
        throw Error(ErrorKind::InsufficientData,
                    "reference needs more than " + std::to_string(phi.cols()) +
                        " subjects, got " + std::to_string(phi.rows()));
    ReferenceFit fit;
    fit.beta = detail::solve_spd(phi.transpose() * phi, phi.transpose() * y);
    fit.variance = (y - phi * fit.beta).squaredNorm() / static_cast<double>(y.size());
    return fit;
}

ReferenceFit fit_reference(const SiteDataset& reference, const std::string& region,
                           const BasisSpec& basis) {
    return fit_reference(design_matrix(reference, basis), reference.region_values(region));
}

double shrink_variance(double empirical, double var_ref, double n_moving, double nu) {
    if (nu == 0.0 && n_moving > 0.0) return empirical;
    const double total = n_moving + nu;
    if (total <= 0.0) return var_ref;
    return n_moving * empirical / total + nu * var_ref / total;
}

MovingFit fit_moving(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& beta_ref, double var_ref,
                     const Eigen::VectorXd& lambda, double nu) {
    if (phi.rows() != y.size())
        throw Error(ErrorKind::InvalidArgument, "design matrix and values differ in length");
    if (phi.rows() < 1) throw Error(ErrorKind::InsufficientData, "moving site has no subjects");
    if (beta_ref.size() != phi.cols())
        throw Error(ErrorKind::InvalidArgument, "reference weights do not match the basis");
    if (!(nu >= 0.0)) throw Error(ErrorKind::InvalidArgument, "nu must be >= 0");
    const Eigen::VectorXd lam = broadcast_lambda(lambda, phi.cols());
    if ((lam.array() < 0.0).any() || !lam.allFinite())
        throw Error(ErrorKind::InvalidArgument, "lambda entries must be finite and >= 0");

    Eigen::MatrixXd normal = phi.transpose() * phi;
    normal.diagonal() += lam;
    const Eigen::VectorXd rhs = phi.transpose() * y + lam.cwiseProduct(beta_ref);

    MovingFit fit;
    fit.beta = detail::solve_spd(normal, rhs);
    const double n = static_cast<double>(y.size());
    fit.empirical_variance = (y - phi * fit.beta).squaredNorm() / n;
    fit.variance = shrink_variance(fit.empirical_variance, var_ref, n, nu);
    return fit;
}

MovingFit fit_moving(const SiteDataset& moving, const std::string& region, const BasisSpec& basis,
                     const Eigen::VectorXd& beta_ref, double var_ref,
                     const Eigen::VectorXd& lambda, double nu) {
    return fit_moving(design_matrix(moving, basis), moving.region_values(region), beta_ref,
                      var_ref, lambda, nu);
}

double harmonize_value(const RegionModel& model, const Eigen::VectorXd& phi, double y,
                       VarianceScaling scaling) {
    const double residual = y - model.beta_mov.dot(phi);
    const double on_reference = model.beta_ref.dot(phi);
    // A moving variance at rounding level of the fitted value counts as zero;
    // so do residuals of that size.
    const double fitted = std::abs(model.beta_mov.dot(phi));
    const double tol = 64.0 * std::numeric_limits<double>::epsilon() * std::max(fitted, std::abs(y));
    if (std::sqrt(model.var_mov) <= tol) {
        if (std::abs(residual) <= tol) return on_reference;
        throw Error(ErrorKind::DegenerateVariance,
                    "region '" + model.region_id + "' has zero moving variance");
    }
    const double ratio = model.var_ref / model.var_mov;
    const double factor = scaling == VarianceScaling::StdRatio ? std::sqrt(ratio) : ratio;
    return residual * factor + on_reference;
}

std::vector<SubjectRecord> apply(const HarmonizationBundle& bundle,
                                 std::span<const SubjectRecord> subjects) {
    std::vector<SubjectRecord> out;
    out.reserve(subjects.size());
    if (subjects.empty()) return out;
    const BasisSpec& basis = bundle.basis();
    const auto scaling = bundle.hyperparameters.scaling;
    for (const auto& subject : subjects) {
        subject.validate();
        const Eigen::VectorXd phi = expand_basis(subject.covariates, basis);
        SubjectRecord harmonized = subject;
        for (auto& [region, value] : harmonized.metrics) {
            auto it = bundle.models.find(region);
            if (it == bundle.models.end())
                throw Error(ErrorKind::UnknownRegion, "region '" + region + "' is not in the model");
            value = harmonize_value(it->second, phi, value, scaling);
        }
        out.push_back(std::move(harmonized));
    }
    return out;
}

double bhattacharyya_distance(double mean_a, double var_a, double mean_b, double var_b) {
    if (!(var_a > 0.0) || !(var_b > 0.0))
        throw Error(ErrorKind::DegenerateVariance, "Bhattacharyya distance needs positive variances");
    const double sum = var_a + var_b;
    const double diff = mean_a - mean_b;
    const double d = 0.25 * diff * diff / sum + 0.5 * std::log(sum / (2.0 * std::sqrt(var_a * var_b)));
    return std::max(d, 0.0);
}

double bhattacharyya_distance(const RectifiedResiduals& a, const RectifiedResiduals& b) {
    const Moments ma = population_moments(a.values);
    const Moments mb = population_moments(b.values);
    return bhattacharyya_distance(ma.mean, ma.variance, mb.mean, mb.variance);
}

RectifiedResiduals rectify(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& beta_ref, ResidualSource source) {
    if (phi.rows() != y.size() || phi.cols() != beta_ref.size())
        throw Error(ErrorKind::InvalidArgument, "rectification dimensions disagree");
    return {y - phi * beta_ref, source};
}

double qc_bhattacharyya(const SiteDataset& reference,
                        std::span<const SubjectRecord> harmonized_moving,
                        const std::string& region, const Eigen::VectorXd& beta_ref,
                        const BasisSpec& basis) {
    if (reference.empty() || harmonized_moving.empty())
        throw Error(ErrorKind::InsufficientData, "QC needs two nonempty populations");
    const auto ref = rectify(design_matrix(reference, basis), reference.region_values(region),
                             beta_ref, ResidualSource::Reference);
    const auto [phi_m, y_m] = collect(harmonized_moving, region, basis);
    const auto mov = rectify(phi_m, y_m, beta_ref, ResidualSource::MovingHarmonized);
    return bhattacharyya_distance(ref, mov);
}

Eigen::VectorXd initial_lambda(const Eigen::VectorXd& beta_ref) {
    const Eigen::Index dim = beta_ref.size();
    if (dim == 0) throw Error(ErrorKind::InvalidArgument, "empty reference weights");
    if (beta_ref(0) == 0.0 || !std::isfinite(beta_ref(0))) return Eigen::VectorXd::Ones(dim);
    Eigen::VectorXd lambda0(dim);
    double largest = 0.0;
    for (Eigen::Index k = 0; k < dim; ++k) {
        lambda0(k) = beta_ref(k) == 0.0 ? std::numeric_limits<double>::infinity()
                                         : std::abs(beta_ref(0) / beta_ref(k));
        if (std::isfinite(lambda0(k))) largest = std::max(largest, lambda0(k));
    }
    for (Eigen::Index k = 0; k < dim; ++k) {
        if (!std::isfinite(lambda0(k))) lambda0(k) = largest;
    }
    return lambda0;
}

double tune_criterion(double d_min, double d_max, double d_1, double d_2, double tau_lower,
                      double tau_upper) {
    return sign(d_min / tau_lower - d_1) + sign(d_2 - d_max * tau_upper) + 2.0;
}

TuneProblem make_tune_problem(const SiteDataset& reference, const SiteDataset& moving,
                              const std::string& region, const BasisSpec& basis,
                              const ReferenceFit& ref_fit, int grid_points) {
    if (grid_points < 2) throw Error(ErrorKind::InvalidArgument, "grid_points must be >= 2");
    TuneProblem problem;
    problem.phi_moving = design_matrix(moving, basis);
    problem.y_moving = moving.region_values(region);
    problem.beta_ref = ref_fit.beta;
    problem.var_ref = ref_fit.variance;

    // Gaps are measured along the first covariate; the others sit at the
    // reference means, which are the basis centers.
    const Eigen::MatrixXd x_ref = reference.covariate_matrix();
    const Eigen::MatrixXd x_mov = moving.covariate_matrix();
    const double lo = x_ref.col(0).minCoeff();
    const double hi = x_ref.col(0).maxCoeff();
    const auto n_cov = static_cast<Eigen::Index>(basis.covariate_count());

    Eigen::MatrixXd moving_points(x_mov.rows(), n_cov);
    for (Eigen::Index j = 0; j < x_mov.rows(); ++j) {
        for (Eigen::Index k = 0; k < n_cov; ++k)
            moving_points(j, k) = basis.standardization[static_cast<std::size_t>(k)].center;
        moving_points(j, 0) = x_mov(j, 0);
    }
    Eigen::MatrixXd full(grid_points + x_mov.rows(), n_cov);
    for (int g = 0; g < grid_points; ++g) {
        for (Eigen::Index k = 0; k < n_cov; ++k)
            full(g, k) = basis.standardization[static_cast<std::size_t>(k)].center;
        full(g, 0) = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
    }
    full.bottomRows(x_mov.rows()) = moving_points;

    problem.phi_moving_points = design_matrix(moving_points, basis);
    problem.phi_full_range = design_matrix(full, basis);
    return problem;
}

TuneResult auto_tune(const TuneProblem& problem, const Hyperparameters& hp) {
    hp.validate();
    const Eigen::VectorXd lambda0 = initial_lambda(problem.beta_ref);
    const double tau_lower = hp.effective_tau_lower();
    const double tau_upper = hp.effective_tau_upper();

    // Reference curve magnitude, used to recognise curves that coincide to
    // rounding error.
    const double curve_scale = (problem.phi_full_range * problem.beta_ref).cwiseAbs().maxCoeff();
    const double coincide_tol = 64.0 * std::numeric_limits<double>::epsilon() * curve_scale;

    TuneResult best;
    double best_criterion = std::numeric_limits<double>::infinity();
    double best_excess = std::numeric_limits<double>::infinity();
    std::vector<std::pair<double, double>> trace;

    for (int t = 0; t <= hp.autotune.max_iters; ++t) {
        const double multiplier = hp.autotune.lambda_min * std::pow(hp.autotune.k, t);
        const Eigen::VectorXd lambda = multiplier * lambda0;
        MovingFit fit = fit_moving(problem.phi_moving, problem.y_moving, problem.beta_ref,
                                   problem.var_ref, lambda, hp.nu);
        const Eigen::VectorXd delta = problem.beta_ref - fit.beta;
        const Eigen::VectorXd gap_moving = (problem.phi_moving_points * delta).cwiseAbs();
        const Eigen::VectorXd gap_full = (problem.phi_full_range * delta).cwiseAbs();

        TuneDiagnostics diag;
        diag.d_min = gap_moving.size() > 0 ? gap_moving.minCoeff() : 0.0;
        diag.d_max = gap_moving.size() > 0 ? gap_moving.maxCoeff() : 0.0;
        diag.d_1 = gap_full.minCoeff();
        diag.d_2 = gap_full.maxCoeff();
        diag.multiplier = multiplier;
        diag.iterations = t + 1;

        const double criterion =
            diag.d_2 <= coincide_tol
                ? 0.0
                : tune_criterion(diag.d_min, diag.d_max, diag.d_1, diag.d_2, tau_lower, tau_upper);
        const double excess = std::max(0.0, diag.d_min / tau_lower - diag.d_1) +
                              std::max(0.0, diag.d_2 - diag.d_max * tau_upper);
        trace.emplace_back(multiplier, criterion);

        if (criterion < best_criterion || (criterion == best_criterion && excess < best_excess)) {
            best_criterion = criterion;
            best_excess = excess;
            best.lambda = lambda;
            best.diagnostics = diag;
            best.moving_fit = std::move(fit);
        }
        if (criterion == 0.0) {
            best.diagnostics.converged = true;
            break;
        }
    }
    best.lambda0 = lambda0;
    best.diagnostics.lambda_trace = std::move(trace);
    return best;
}

TuneResult auto_tune(const SiteDataset& reference, const SiteDataset& moving,
                     const std::string& region, const Hyperparameters& hp) {
    hp.validate();
    const BasisSpec basis = make_basis(reference, hp.degree, hp.basis_mode);
    const ReferenceFit ref_fit = fit_reference(reference, region, basis);
    return auto_tune(make_tune_problem(reference, moving, region, basis, ref_fit,
                                       hp.autotune.grid_points),
                     hp);
}

HarmonizationBundle fit_bundle(const SiteDataset& reference, const SiteDataset& moving,
                               const Hyperparameters& hp, const ExecutionOptions& exec) {
    hp.validate();
    reference.validate();
    moving.validate();
    if (reference.metric_name != moving.metric_name)
        throw Error(ErrorKind::InvalidArgument, "metric '" + reference.metric_name +
                                                    "' does not match '" + moving.metric_name + "'");
    if (reference.covariate_names() != moving.covariate_names())
        throw Error(ErrorKind::CovariateMismatch, "reference and moving covariates differ");
    const auto regions = reference.region_ids();
    if (regions != moving.region_ids())
        throw Error(ErrorKind::RegionMismatch, "reference and moving region sets differ");

    const BasisSpec basis = make_basis(reference, hp.degree, hp.basis_mode);
    const Eigen::MatrixXd phi_ref = design_matrix(reference, basis);
    const Eigen::MatrixXd phi_mov = design_matrix(moving, basis);
    const auto dim = phi_ref.cols();

    struct RegionResult {
        RegionModel model;
        double qc = 0.0;
        double qc_before = 0.0;
        Eigen::VectorXd lambda;
        bool converged = true;
    };
    std::vector<RegionResult> results(regions.size());

    auto errors = parallel_for(regions.size(), exec, [&](std::size_t r) {
        const std::string& region = regions[r];
        const Eigen::VectorXd y_ref = reference.region_values(region);
        const Eigen::VectorXd y_mov = moving.region_values(region);
        const ReferenceFit ref_fit = fit_reference(phi_ref, y_ref);

        RegionResult& out = results[r];
        MovingFit mov_fit;
        if (hp.fixed_lambda) {
            const Eigen::VectorXd given = Eigen::Map<const Eigen::VectorXd>(
                hp.fixed_lambda->data(), static_cast<Eigen::Index>(hp.fixed_lambda->size()));
            out.lambda = broadcast_lambda(given, dim);
            mov_fit = fit_moving(phi_mov, y_mov, ref_fit.beta, ref_fit.variance, out.lambda, hp.nu);
        } else {
            const TuneProblem problem = make_tune_problem(reference, moving, region, basis, ref_fit,
                                                          hp.autotune.grid_points);
            TuneResult tuned = auto_tune(problem, hp);
            out.lambda = tuned.lambda;
            out.converged = tuned.diagnostics.converged;
            mov_fit = std::move(tuned.moving_fit);
        }

        out.model.region_id = region;
        out.model.beta_ref = ref_fit.beta;
        out.model.var_ref = ref_fit.variance;
        out.model.beta_mov = mov_fit.beta;
        out.model.var_mov = mov_fit.variance;
        out.model.basis = basis;

        Eigen::VectorXd harmonized(y_mov.size());
        for (Eigen::Index j = 0; j < y_mov.size(); ++j)
            harmonized(j) = harmonize_value(out.model, phi_mov.row(j).transpose(), y_mov(j), hp.scaling);
        const auto z_ref = rectify(phi_ref, y_ref, ref_fit.beta, ResidualSource::Reference);
        out.qc = bhattacharyya_distance(
            z_ref, rectify(phi_mov, harmonized, ref_fit.beta, ResidualSource::MovingHarmonized));
        out.qc_before = bhattacharyya_distance(
            z_ref, rectify(phi_mov, y_mov, ref_fit.beta, ResidualSource::MovingHarmonized));
    });

    std::ostringstream failures;
    std::optional<ErrorKind> first_kind;
    for (std::size_t r = 0; r < errors.size(); ++r) {
        if (!errors[r]) continue;
        try {
            std::rethrow_exception(errors[r]);
        } catch (const Error& e) {
            if (!first_kind) first_kind = e.kind();
            failures << (failures.tellp() > 0 ? "; " : "") << regions[r] << ": " << e.what();
        } catch (const std::exception& e) {
            if (!first_kind) first_kind = ErrorKind::InvalidArgument;
            failures << (failures.tellp() > 0 ? "; " : "") << regions[r] << ": " << e.what();
        }
    }
    if (first_kind) throw Error(*first_kind, "fit failed for region(s) " + failures.str());

    HarmonizationBundle bundle;
    bundle.reference_site_id = reference.site_id;
    bundle.moving_site_id = moving.site_id;
    bundle.metric_name = reference.metric_name;
    bundle.hyperparameters = hp;
    for (std::size_t r = 0; r < regions.size(); ++r) {
        auto& res = results[r];
        bundle.qc[regions[r]] = res.qc;
        bundle.qc_before[regions[r]] = res.qc_before;
        bundle.tuned_lambda[regions[r]] = res.lambda;
        bundle.tune_converged[regions[r]] = res.converged;
        bundle.models.emplace(regions[r], std::move(res.model));
    }
    return bundle;
}

}  // namespace ccombat
