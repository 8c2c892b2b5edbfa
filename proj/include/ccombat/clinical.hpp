#ifndef CCOMBAT_CLINICAL_HPP
#define CCOMBAT_CLINICAL_HPP

#include "ccombat/parallel.hpp"
#include "ccombat/types.hpp"

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ccombat {

// Sitewise harmonization of a moving site onto a reference site, one region
// at a time: fit, apply, Bhattacharyya QC and regularization auto-tuning.

struct ReferenceFit {
    Eigen::VectorXd beta;
    /// Maximum-likelihood residual variance (1/J denominator).
    double variance = 0.0;
};

struct MovingFit {
    Eigen::VectorXd beta;
    /// Residual variance after shrinkage toward the reference variance.
    double variance = 0.0;
    /// Residual variance of the moving data before shrinkage.
    double empirical_variance = 0.0;
};

/// Ordinary least squares of the reference values on their basis features.
ReferenceFit fit_reference(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y);
ReferenceFit fit_reference(const SiteDataset& reference, const std::string& region,
                           const BasisSpec& basis);

/// Ridge regression pulled toward `beta_ref` with per-coefficient strength
/// `lambda`, followed by the nu-weighted variance prior. A `lambda` of size 1
/// is broadcast to every coefficient.
MovingFit fit_moving(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& beta_ref, double var_ref,
                     const Eigen::VectorXd& lambda, double nu);
MovingFit fit_moving(const SiteDataset& moving, const std::string& region, const BasisSpec& basis,
                     const Eigen::VectorXd& beta_ref, double var_ref,
                     const Eigen::VectorXd& lambda, double nu);

/// Convex combination of the empirical moving variance and the reference
/// variance with weights J_M and nu.
double shrink_variance(double empirical, double var_ref, double n_moving, double nu);

/// Harmonizes one value given its basis features.
double harmonize_value(const RegionModel& model, const Eigen::VectorXd& phi, double y,
                       VarianceScaling scaling = VarianceScaling::StdRatio);

/// Harmonizes every region present in each subject. Unknown regions raise
/// UnknownRegion; covariate mismatch raises CovariateMismatch.
std::vector<SubjectRecord> apply(const HarmonizationBundle& bundle,
                                 std::span<const SubjectRecord> subjects);

enum class ResidualSource { Reference, MovingHarmonized };

struct RectifiedResiduals {
    Eigen::VectorXd values;
    ResidualSource source = ResidualSource::Reference;
};

/// Closed-form Bhattacharyya distance between N(mu_a, var_a) and N(mu_b, var_b).
double bhattacharyya_distance(double mean_a, double var_a, double mean_b, double var_b);

/// Distance between the empirical Gaussians of two residual sets (population variance).
double bhattacharyya_distance(const RectifiedResiduals& a, const RectifiedResiduals& b);

RectifiedResiduals rectify(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& beta_ref, ResidualSource source);

/// QC score: both populations rectified with the reference weights.
double qc_bhattacharyya(const SiteDataset& reference,
                        std::span<const SubjectRecord> harmonized_moving,
                        const std::string& region, const Eigen::VectorXd& beta_ref,
                        const BasisSpec& basis);

struct TuneDiagnostics {
    /// Smallest and largest |reference - moving| curve gap at the moving covariates.
    double d_min = 0.0;
    double d_max = 0.0;
    /// Same over the reference covariate range (grid plus moving points).
    double d_1 = 0.0;
    double d_2 = 0.0;
    /// (lambda multiplier, criterion value) for each scanned step.
    std::vector<std::pair<double, double>> lambda_trace;
    bool converged = false;
    int iterations = 0;
    double multiplier = 0.0;
};

struct TuneResult {
    Eigen::VectorXd lambda;
    /// |beta_ref[0] / beta_ref| with zero-division guard.
    Eigen::VectorXd lambda0;
    TuneDiagnostics diagnostics;
    MovingFit moving_fit;
};

/// Everything auto-tuning needs for one region.
struct TuneProblem {
    Eigen::MatrixXd phi_moving;
    Eigen::VectorXd y_moving;
    Eigen::VectorXd beta_ref;
    double var_ref = 0.0;
    /// Feature rows at which the curve gaps are measured.
    Eigen::MatrixXd phi_moving_points;
    Eigen::MatrixXd phi_full_range;
};

/// Builds the evaluation points: moving first covariates (others at their
/// reference means) and a uniform grid over the reference range.
TuneProblem make_tune_problem(const SiteDataset& reference, const SiteDataset& moving,
                              const std::string& region, const BasisSpec& basis,
                              const ReferenceFit& ref_fit, int grid_points);

/// Zero-sum acceptance test of the tuner; returns 0 when satisfied, 2 or 4 otherwise.
double tune_criterion(double d_min, double d_max, double d_1, double d_2, double tau_lower,
                      double tau_upper);

/// Initial regularization direction |beta_ref[0] / beta_ref|.
Eigen::VectorXd initial_lambda(const Eigen::VectorXd& beta_ref);

TuneResult auto_tune(const TuneProblem& problem, const Hyperparameters& hp);
TuneResult auto_tune(const SiteDataset& reference, const SiteDataset& moving,
                     const std::string& region, const Hyperparameters& hp);

/// Fits every shared region independently (in parallel when requested).
HarmonizationBundle fit_bundle(const SiteDataset& reference, const SiteDataset& moving,
                               const Hyperparameters& hp, const ExecutionOptions& exec = {});

}  // namespace ccombat

#endif
