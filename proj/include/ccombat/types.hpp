#ifndef CCOMBAT_TYPES_HPP
#define CCOMBAT_TYPES_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ccombat {

/// Ordered covariates of one subject (e.g. age in years, sex as 0/1).
struct CovariateVector {
    std::vector<double> values;
    std::vector<std::string> names;

    void validate(bool allow_empty = false) const;
};

struct SubjectRecord {
    std::string subject_id;
    CovariateVector covariates;
    /// region id -> scalar metric value
    std::map<std::string, double> metrics;

    void validate(bool allow_empty_covariates = false) const;
};

/// Subjects from one acquisition site for one metric. Data must be
/// rectangular: every record has the same covariate names and regions.
struct SiteDataset {
    std::string site_id;
    std::string metric_name;
    std::vector<SubjectRecord> records;

    /// Empty covariate vectors are accepted only by the pooled baselines.
    void validate(bool allow_empty_covariates = false) const;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }

    std::vector<std::string> covariate_names() const;
    /// Sorted region ids of the first record (empty when there are no records).
    std::vector<std::string> region_ids() const;
    /// Values of one region in record order. Throws UnknownRegion.
    Eigen::VectorXd region_values(const std::string& region_id) const;
    /// Subjects x covariates matrix in raw units.
    Eigen::MatrixXd covariate_matrix() const;
};

enum class BasisMode {
    /// All monomials of total degree <= P over the standardized covariates.
    MonomialsUpToP,
    /// Distinct monomials of (x'x + 1)^P, i.e. even powers only.
    LiteralKernelExpansion,
};

struct CovariateScaling {
    double center = 0.0;
    double scale = 1.0;

    friend bool operator==(const CovariateScaling&, const CovariateScaling&) = default;
};

struct BasisSpec {
    int degree = 2;
    BasisMode mode = BasisMode::MonomialsUpToP;
    std::vector<std::string> covariate_names;
    std::vector<CovariateScaling> standardization;

    void validate() const;
    std::size_t covariate_count() const { return standardization.size(); }

    friend bool operator==(const BasisSpec&, const BasisSpec&) = default;
};

/// Fitted parameters of one region: reference and moving weights and variances.
struct RegionModel {
    std::string region_id;
    Eigen::VectorXd beta_ref;
    double var_ref = 0.0;
    Eigen::VectorXd beta_mov;
    double var_mov = 0.0;
    BasisSpec basis;

    void validate() const;
};

struct AutoTuneSettings {
    double k = 2.0;
    double lambda_min = 1e-3;
    int max_iters = 60;
    int grid_points = 200;

    friend bool operator==(const AutoTuneSettings&, const AutoTuneSettings&) = default;
};

enum class VarianceScaling {
    /// Residuals rescaled by sqrt(var_ref / var_mov).
    StdRatio,
    /// Residuals rescaled by var_ref / var_mov (compatibility mode).
    VarianceRatio,
};

struct Hyperparameters {
    int degree = 2;
    BasisMode basis_mode = BasisMode::MonomialsUpToP;
    double nu = 5.0;
    double tau = 2.0;
    /// Separate tolerances for the lower and upper distance tests of the
    /// tuner. Both default to `tau`.
    std::optional<double> tau_lower;
    std::optional<double> tau_upper;
    /// Fixed regularization; std::nullopt selects auto-tuning. A single
    /// entry is broadcast to every coefficient.
    std::optional<std::vector<double>> fixed_lambda;
    AutoTuneSettings autotune;
    VarianceScaling scaling = VarianceScaling::StdRatio;

    void validate() const;
    double effective_tau_lower() const { return tau_lower.value_or(tau); }
    double effective_tau_upper() const { return tau_upper.value_or(tau); }
    bool autotuned() const { return !fixed_lambda.has_value(); }
};

bool operator==(const Hyperparameters& a, const Hyperparameters& b);

/// Everything produced by a fit, persistable and re-appliable to new subjects.
struct HarmonizationBundle {
    std::string reference_site_id;
    std::string moving_site_id;
    std::string metric_name;
    Hyperparameters hyperparameters;
    std::map<std::string, RegionModel> models;
    /// Bhattacharyya distance after harmonizing the training moving data.
    std::map<std::string, double> qc;
    /// Bhattacharyya distance of the raw moving data.
    std::map<std::string, double> qc_before;
    std::map<std::string, Eigen::VectorXd> tuned_lambda;
    std::map<std::string, bool> tune_converged;

    void validate() const;
    const BasisSpec& basis() const;
};

}  // namespace ccombat

#endif
