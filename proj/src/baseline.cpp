#include "ccombat/baseline.hpp"

#include "linalg.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace ccombat {

namespace {

constexpr double kChangeFloor = 1e-12;
constexpr double kLambdaBarFloor = 2.0 + 1e-6;

void validate_sites(std::span<const SiteDataset> sites) {
    if (sites.size() < 2)
        throw Error(ErrorKind::InsufficientData, "pooled ComBAT needs at least 2 sites");
    std::set<std::string> ids;
    for (const auto& site : sites) {
        site.validate(true);
        if (site.size() < 2)
            throw Error(ErrorKind::InsufficientData,
                        "site '" + site.site_id + "' needs at least 2 subjects");
        if (!ids.insert(site.site_id).second)
            throw Error(ErrorKind::InvalidArgument, "duplicate site '" + site.site_id + "'");
        if (site.covariate_names() != sites.front().covariate_names())
            throw Error(ErrorKind::CovariateMismatch,
                        "site '" + site.site_id + "' covariates differ");
        if (site.region_ids() != sites.front().region_ids())
            throw Error(ErrorKind::RegionMismatch, "site '" + site.site_id + "' regions differ");
    }
}

// Pooled least squares shared by both flavors. Fills alpha, beta, sigma2 and
// the location/scale site biases; returns the per-site residual matrices
// (subjects x regions) of y - alpha - x'beta.
std::vector<Eigen::MatrixXd> fit_pooled(std::span<const SiteDataset> sites, PooledModel& model) {
    validate_sites(sites);
    model.region_ids = sites.front().region_ids();
    model.covariate_names = sites.front().covariate_names();
    const auto n_cov = static_cast<Eigen::Index>(model.covariate_names.size());
    const auto n_reg = static_cast<Eigen::Index>(model.region_ids.size());

    Eigen::Index total = 0;
    for (const auto& s : sites) total += static_cast<Eigen::Index>(s.size());
    if (total <= n_cov + 1)
        throw Error(ErrorKind::InsufficientData, "pooled subject count must exceed covariates + 1");

    Eigen::MatrixXd x(total, n_cov);
    Eigen::MatrixXd y(total, n_reg);
    std::vector<Eigen::Index> offsets;
    Eigen::Index row = 0;
    for (const auto& s : sites) {
        offsets.push_back(row);
        const auto rows = static_cast<Eigen::Index>(s.size());
        if (n_cov > 0) x.middleRows(row, rows) = s.covariate_matrix();
        for (Eigen::Index v = 0; v < n_reg; ++v)
            y.block(row, v, rows, 1) = s.region_values(model.region_ids[static_cast<std::size_t>(v)]);
        row += rows;
    }

    // Centered and scaled design for conditioning; coefficients are mapped
    // back to raw units below.
    Eigen::VectorXd center = Eigen::VectorXd::Zero(n_cov);
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(n_cov);
    for (Eigen::Index k = 0; k < n_cov; ++k) {
        center(k) = x.col(k).mean();
        const double sd = std::sqrt((x.col(k).array() - center(k)).square().mean());
        if (sd > 0.0) scale(k) = sd;
    }
    Eigen::MatrixXd design(total, n_cov + 1);
    design.col(0).setOnes();
    for (Eigen::Index k = 0; k < n_cov; ++k)
        design.col(k + 1) = (x.col(k).array() - center(k)) / scale(k);

    const Eigen::MatrixXd normal = design.transpose() * design;
    model.alpha.resize(n_reg);
    model.beta.resize(n_reg, n_cov);
    model.sigma2.resize(n_reg);
    Eigen::MatrixXd residual(total, n_reg);
    for (Eigen::Index v = 0; v < n_reg; ++v) {
        const Eigen::VectorXd coef = detail::solve_spd(normal, design.transpose() * y.col(v));
        for (Eigen::Index k = 0; k < n_cov; ++k) model.beta(v, k) = coef(k + 1) / scale(k);
        const Eigen::VectorXd xb = n_cov > 0 ? Eigen::VectorXd(x * model.beta.row(v).transpose())
                                             : Eigen::VectorXd::Zero(total);
        model.alpha(v) = (y.col(v) - xb).mean();
        residual.col(v) = y.col(v) - xb - Eigen::VectorXd::Constant(total, model.alpha(v));
    }

    std::vector<Eigen::MatrixXd> per_site;
    Eigen::VectorXd pooled_ss = Eigen::VectorXd::Zero(n_reg);
    for (std::size_t i = 0; i < sites.size(); ++i) {
        const auto rows = static_cast<Eigen::Index>(sites[i].size());
        Eigen::MatrixXd r = residual.middleRows(offsets[i], rows);
        Eigen::VectorXd gamma = r.colwise().mean().transpose();
        Eigen::VectorXd delta2(n_reg);
        for (Eigen::Index v = 0; v < n_reg; ++v) {
            const double ss = (r.col(v).array() - gamma(v)).square().sum();
            delta2(v) = ss / static_cast<double>(rows - 1);
            pooled_ss(v) += ss;
        }
        model.site_gamma[sites[i].site_id] = gamma;
        model.site_delta2[sites[i].site_id] = delta2;
        per_site.push_back(std::move(r));
    }
    model.sigma2 = pooled_ss / static_cast<double>(total);
    return per_site;
}

EBHyperparams moment_priors(const Eigen::VectorXd& gamma_hat, const Eigen::VectorXd& delta2_hat) {
    const double v = static_cast<double>(gamma_hat.size());
    EBHyperparams p;
    p.mu_bar = gamma_hat.mean();
    p.tau2_bar = (gamma_hat.array() - p.mu_bar).square().sum() / (v - 1.0);
    const double g = delta2_hat.mean();
    double s2 = (delta2_hat.array() - g).square().sum() / (v - 1.0);
    // Identical variances across regions give an infinitely sharp prior;
    // keep it finite.
    s2 = std::max(s2, 1e-12 * g * g);
    p.lambda_bar = std::max((g * g + 2.0 * s2) / s2, kLambdaBarFloor);
    p.theta_bar = (g * g * g + g * s2) / s2;
    return p;
}

}  // namespace

std::size_t PooledModel::region_index(const std::string& region) const {
    auto it = std::find(region_ids.begin(), region_ids.end(), region);
    if (it == region_ids.end())
        throw Error(ErrorKind::UnknownRegion, "region '" + region + "' is not in the pooled model");
    return static_cast<std::size_t>(it - region_ids.begin());
}

Eigen::VectorXd PooledModel::additive_bias(const std::string& site) const {
    auto it = site_gamma.find(site);
    if (it == site_gamma.end()) throw Error(ErrorKind::UnknownSite, "site '" + site + "' is unknown");
    if (flavor == CombatFlavor::LocationScale) return it->second;
    return it->second.cwiseProduct(sigma2.cwiseSqrt());
}

Eigen::VectorXd PooledModel::residual_variance(const std::string& site) const {
    auto it = site_delta2.find(site);
    if (it == site_delta2.end()) throw Error(ErrorKind::UnknownSite, "site '" + site + "' is unknown");
    if (flavor == CombatFlavor::LocationScale) return it->second;
    return it->second.cwiseProduct(sigma2);
}

PooledModel fit_ls_combat(std::span<const SiteDataset> sites) {
    PooledModel model;
    model.flavor = CombatFlavor::LocationScale;
    fit_pooled(sites, model);
    return model;
}

PooledModel fit_eb_combat(std::span<const SiteDataset> sites, const EBOptions& options,
                          const ExecutionOptions& exec) {
    if (!(options.tol > 0.0) || options.max_iters < 1)
        throw Error(ErrorKind::InvalidArgument, "EB tolerance must be > 0 and max_iters >= 1");
    PooledModel model;
    model.flavor = CombatFlavor::EmpiricalBayes;
    const auto residuals = fit_pooled(sites, model);
    const auto n_reg = static_cast<Eigen::Index>(model.region_ids.size());
    if (n_reg < 2)
        throw Error(ErrorKind::InsufficientRegions,
                    "empirical-Bayes priors pool across regions; need at least 2");
    if ((model.sigma2.array() <= 0.0).any())
        throw Error(ErrorKind::DegenerateVariance, "a region has zero pooled variance");
    const Eigen::VectorXd sigma = model.sigma2.cwiseSqrt();

    struct SiteResult {
        Eigen::VectorXd gamma;
        Eigen::VectorXd delta2;
        EBHyperparams prior;
        int iterations = 0;
        std::vector<double> history;
        bool converged = false;
    };
    std::vector<SiteResult> results(sites.size());

    auto errors = parallel_for(sites.size(), exec, [&](std::size_t i) {
        const Eigen::MatrixXd z = residuals[i] * sigma.cwiseInverse().asDiagonal();
        const double n = static_cast<double>(z.rows());
        const Eigen::VectorXd gamma_hat = z.colwise().mean().transpose();
        Eigen::VectorXd delta2_hat(n_reg);
        for (Eigen::Index v = 0; v < n_reg; ++v)
            delta2_hat(v) = (z.col(v).array() - gamma_hat(v)).square().sum() / (n - 1.0);

        SiteResult& out = results[i];
        out.prior = moment_priors(gamma_hat, delta2_hat);
        const auto& p = out.prior;

        Eigen::VectorXd gamma = gamma_hat;
        Eigen::VectorXd delta2 = options.init == EBInitialization::SampleVariance
                                     ? delta2_hat
                                     : Eigen::VectorXd::Ones(n_reg);
        for (int it = 1; it <= options.max_iters; ++it) {
            Eigen::VectorXd gamma_new(n_reg);
            Eigen::VectorXd delta2_new(n_reg);
            for (Eigen::Index v = 0; v < n_reg; ++v) {
                gamma_new(v) = p.tau2_bar == 0.0
                                   ? p.mu_bar
                                   : (n * p.tau2_bar * gamma_hat(v) + delta2(v) * p.mu_bar) /
                                         (n * p.tau2_bar + delta2(v));
                const double ss = (z.col(v).array() - gamma_new(v)).square().sum();
                delta2_new(v) = (p.theta_bar + 0.5 * ss) / (n / 2.0 + p.lambda_bar - 1.0);
            }
            double change = 0.0;
            for (Eigen::Index v = 0; v < n_reg; ++v) {
                change = std::max(change, std::abs(gamma_new(v) - gamma(v)) /
                                              (std::abs(gamma(v)) + kChangeFloor));
                change = std::max(change, std::abs(delta2_new(v) - delta2(v)) /
                                              (std::abs(delta2(v)) + kChangeFloor));
            }
            gamma = std::move(gamma_new);
            delta2 = std::move(delta2_new);
            out.history.push_back(change);
            out.iterations = it;
            if (change < options.tol) {
                out.converged = true;
                break;
            }
        }
        out.gamma = std::move(gamma);
        out.delta2 = std::move(delta2);
    });
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    bool all_converged = true;
    std::string stalled;
    for (std::size_t i = 0; i < sites.size(); ++i) {
        const auto& id = sites[i].site_id;
        model.site_gamma[id] = results[i].gamma;
        model.site_delta2[id] = results[i].delta2;
        model.eb_priors[id] = results[i].prior;
        model.iterations[id] = results[i].iterations;
        model.change_history[id] = results[i].history;
        if (!results[i].converged) {
            all_converged = false;
            stalled += (stalled.empty() ? "" : ", ") + id;
        }
    }
    if (!all_converged)
        throw EBConvergenceError("EB iteration did not converge within " +
                                     std::to_string(options.max_iters) + " iterations for site(s) " +
                                     stalled,
                                 std::move(model));
    return model;
}

std::vector<SiteDataset> apply_combat(const PooledModel& model, std::span<const SiteDataset> sites,
                                      const std::optional<std::string>& reference_site) {
    std::optional<Eigen::VectorXd> ref_gamma;
    std::optional<Eigen::VectorXd> ref_sd;
    if (reference_site) {
        ref_gamma = model.additive_bias(*reference_site);
        ref_sd = model.residual_variance(*reference_site).cwiseSqrt();
    }
    const Eigen::VectorXd pooled_sd = model.sigma2.cwiseSqrt();

    std::vector<SiteDataset> out;
    out.reserve(sites.size());
    for (const auto& site : sites) {
        const Eigen::VectorXd gamma = model.additive_bias(site.site_id);
        const Eigen::VectorXd sd = model.residual_variance(site.site_id).cwiseSqrt();
        SiteDataset harmonized = site;
        for (auto& rec : harmonized.records) {
            if (rec.covariates.names != model.covariate_names)
                throw Error(ErrorKind::CovariateMismatch,
                            "subject '" + rec.subject_id + "' covariates do not match the model");
            for (auto& [region, value] : rec.metrics) {
                const std::size_t v = model.region_index(region);
                const auto vi = static_cast<Eigen::Index>(v);
                double trend = model.alpha(vi);
                for (std::size_t k = 0; k < rec.covariates.values.size(); ++k)
                    trend += model.beta(vi, static_cast<Eigen::Index>(k)) * rec.covariates.values[k];
                if (!(sd(vi) > 0.0))
                    throw Error(ErrorKind::DegenerateVariance,
                                "site '" + site.site_id + "' region '" + region + "' has zero variance");
                const double standardized = (value - trend - gamma(vi)) / sd(vi);
                value = reference_site
                            ? standardized * (*ref_sd)(vi) + (*ref_gamma)(vi) + trend
                            : standardized * pooled_sd(vi) + trend;
            }
        }
        out.push_back(std::move(harmonized));
    }
    return out;
}

}  // namespace ccombat
