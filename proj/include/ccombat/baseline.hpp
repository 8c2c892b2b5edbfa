#ifndef CCOMBAT_BASELINE_HPP
#define CCOMBAT_BASELINE_HPP

#include "ccombat/error.hpp"
#include "ccombat/parallel.hpp"
#include "ccombat/types.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccombat {

// Pooled ComBAT baselines: a single covariate model shared by all sites plus
// per-site additive and multiplicative biases, estimated either by location
// and scale moments or by empirical-Bayes posterior expectations.

enum class CombatFlavor { LocationScale, EmpiricalBayes };

/// Moment-matched prior hyperparameters of one site.
struct EBHyperparams {
    double mu_bar = 0.0;
    double tau2_bar = 0.0;
    double lambda_bar = 0.0;
    double theta_bar = 0.0;
};

struct PooledModel {
    CombatFlavor flavor = CombatFlavor::LocationScale;
    std::vector<std::string> region_ids;
    std::vector<std::string> covariate_names;
    /// Per-region intercept.
    Eigen::VectorXd alpha;
    /// Regions x covariates, raw covariate units.
    Eigen::MatrixXd beta;
    /// Per-region pooled residual variance.
    Eigen::VectorXd sigma2;
    /// LocationScale: raw-unit gamma-hat. EmpiricalBayes: standardized gamma-bar-star.
    std::map<std::string, Eigen::VectorXd> site_gamma;
    /// LocationScale: raw-unit delta-hat squared. EmpiricalBayes: standardized delta-bar-star squared.
    std::map<std::string, Eigen::VectorXd> site_delta2;
    std::map<std::string, EBHyperparams> eb_priors;
    /// EmpiricalBayes only: iterations used and max relative change per
    /// iteration, per site.
    std::map<std::string, int> iterations;
    std::map<std::string, std::vector<double>> change_history;

    std::size_t region_index(const std::string& region) const;
    /// Site additive bias in the units of the data.
    Eigen::VectorXd additive_bias(const std::string& site) const;
    /// Site residual variance in the units of the data.
    Eigen::VectorXd residual_variance(const std::string& site) const;
};

enum class EBInitialization {
    /// Start from the per-region sample variance of the standardized data.
    SampleVariance,
    /// Start every variance at 1.
    Unit,
};

struct EBOptions {
    double tol = 1e-6;
    int max_iters = 100;
    EBInitialization init = EBInitialization::SampleVariance;
};

/// Raised when the empirical-Bayes iteration does not settle; carries the
/// last iterate.
class EBConvergenceError : public Error {
public:
    EBConvergenceError(const std::string& message, PooledModel last)
        : Error(ErrorKind::ConvergenceFailure, message), last_(std::move(last)) {}
    const PooledModel& last_iterate() const noexcept { return last_; }

private:
    PooledModel last_;
};

PooledModel fit_ls_combat(std::span<const SiteDataset> sites);

PooledModel fit_eb_combat(std::span<const SiteDataset> sites, const EBOptions& options = {},
                          const ExecutionOptions& exec = {});

/// Removes the site biases. Without `reference_site` values land on the
/// pooled model; with it they are re-expressed with that site's biases, so
/// a site harmonized onto itself is unchanged.
std::vector<SiteDataset> apply_combat(const PooledModel& model, std::span<const SiteDataset> sites,
                                      const std::optional<std::string>& reference_site = std::nullopt);

}  // namespace ccombat

#endif
