#include "ccombat/types.hpp"

#include "ccombat/basis.hpp"
#include "ccombat/error.hpp"

#include <cmath>
#include <set>

namespace ccombat {

void CovariateVector::validate(bool allow_empty) const {
    if (values.size() != names.size())
        throw Error(ErrorKind::CovariateMismatch, "covariate values and names differ in length");
    if (values.empty() && !allow_empty)
        throw Error(ErrorKind::CovariateMismatch, "covariate vector is empty");
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (!std::isfinite(values[k]))
            throw Error(ErrorKind::InvalidArgument, "covariate '" + names[k] + "' is not finite");
    }
}

void SubjectRecord::validate(bool allow_empty_covariates) const {
    covariates.validate(allow_empty_covariates);
    for (const auto& [region, value] : metrics) {
        if (!std::isfinite(value))
            throw Error(ErrorKind::InvalidArgument,
                        "subject '" + subject_id + "' region '" + region + "' is not finite");
    }
}

void SiteDataset::validate(bool allow_empty_covariates) const {
    if (records.empty())
        throw Error(ErrorKind::InsufficientData, "site '" + site_id + "' has no records");
    const auto& first = records.front();
    for (const auto& rec : records) {
        rec.validate(allow_empty_covariates);
        if (rec.covariates.names != first.covariates.names)
            throw Error(ErrorKind::CovariateMismatch,
                        "subject '" + rec.subject_id + "' covariates differ from '" +
                            first.subject_id + "'");
        if (rec.metrics.size() != first.metrics.size())
            throw Error(ErrorKind::RegionMismatch,
                        "subject '" + rec.subject_id + "' has a different region set");
        auto a = rec.metrics.begin();
        auto b = first.metrics.begin();
        for (; a != rec.metrics.end(); ++a, ++b) {
            if (a->first != b->first)
                throw Error(ErrorKind::RegionMismatch,
                            "subject '" + rec.subject_id + "' has a different region set");
        }
    }
}

std::vector<std::string> SiteDataset::covariate_names() const {
    if (records.empty()) return {};
    return records.front().covariates.names;
}

std::vector<std::string> SiteDataset::region_ids() const {
    std::vector<std::string> ids;
    if (records.empty()) return ids;
    for (const auto& [region, value] : records.front().metrics) ids.push_back(region);
    return ids;
}

Eigen::VectorXd SiteDataset::region_values(const std::string& region_id) const {
    Eigen::VectorXd y(static_cast<Eigen::Index>(records.size()));
    for (std::size_t j = 0; j < records.size(); ++j) {
        auto it = records[j].metrics.find(region_id);
        if (it == records[j].metrics.end())
            throw Error(ErrorKind::UnknownRegion, "region '" + region_id +
                                                      "' missing for subject '" +
                                                      records[j].subject_id + "'");
        y(static_cast<Eigen::Index>(j)) = it->second;
    }
    return y;
}

Eigen::MatrixXd SiteDataset::covariate_matrix() const {
    const std::size_t n_cov = records.empty() ? 0 : records.front().covariates.values.size();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(n_cov));
    for (std::size_t j = 0; j < records.size(); ++j) {
        const auto& v = records[j].covariates.values;
        if (v.size() != n_cov)
            throw Error(ErrorKind::CovariateMismatch,
                        "subject '" + records[j].subject_id + "' covariate count differs");
        for (std::size_t k = 0; k < n_cov; ++k)
            x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = v[k];
    }
    return x;
}

void BasisSpec::validate() const {
    if (degree < 0) throw Error(ErrorKind::InvalidArgument, "basis degree must be >= 0");
    if (standardization.empty())
        throw Error(ErrorKind::InvalidArgument, "basis needs at least one covariate");
    if (!covariate_names.empty() && covariate_names.size() != standardization.size())
        throw Error(ErrorKind::InvalidArgument, "basis covariate names and scaling differ in length");
    for (const auto& s : standardization) {
        if (!std::isfinite(s.center) || !std::isfinite(s.scale) || s.scale <= 0.0)
            throw Error(ErrorKind::InvalidArgument, "basis scale must be finite and positive");
    }
}

void RegionModel::validate() const {
    basis.validate();
    const auto dim = static_cast<Eigen::Index>(feature_dimension(basis));
    if (beta_ref.size() != dim || beta_mov.size() != dim)
        throw Error(ErrorKind::InvalidArgument,
                    "region '" + region_id + "' weights do not match the basis dimension");
    if (!(var_ref >= 0.0) || !(var_mov >= 0.0))
        throw Error(ErrorKind::InvalidArgument, "region '" + region_id + "' has a negative variance");
}

void Hyperparameters::validate() const {
    if (degree < 0) throw Error(ErrorKind::InvalidArgument, "degree must be >= 0");
    if (!(nu >= 0.0) || !std::isfinite(nu)) throw Error(ErrorKind::InvalidArgument, "nu must be >= 0");
    if (!(tau >= 1.0)) throw Error(ErrorKind::InvalidArgument, "tau must be >= 1");
    if (tau_lower && !(*tau_lower >= 1.0))
        throw Error(ErrorKind::InvalidArgument, "tau_lower must be >= 1");
    if (tau_upper && !(*tau_upper >= 1.0))
        throw Error(ErrorKind::InvalidArgument, "tau_upper must be >= 1");
    if (fixed_lambda) {
        if (fixed_lambda->empty()) throw Error(ErrorKind::InvalidArgument, "fixed lambda is empty");
        for (double l : *fixed_lambda) {
            if (!(l >= 0.0) || !std::isfinite(l))
                throw Error(ErrorKind::InvalidArgument, "lambda entries must be finite and >= 0");
        }
    }
    if (!(autotune.k > 1.0)) throw Error(ErrorKind::InvalidArgument, "autotune k must be > 1");
    if (!(autotune.lambda_min > 0.0))
        throw Error(ErrorKind::InvalidArgument, "autotune lambda_min must be > 0");
    if (autotune.max_iters < 0) throw Error(ErrorKind::InvalidArgument, "autotune max_iters must be >= 0");
    if (autotune.grid_points < 2)
        throw Error(ErrorKind::InvalidArgument, "autotune grid_points must be >= 2");
}

bool operator==(const Hyperparameters& a, const Hyperparameters& b) {
    return a.degree == b.degree && a.basis_mode == b.basis_mode && a.nu == b.nu && a.tau == b.tau &&
           a.tau_lower == b.tau_lower && a.tau_upper == b.tau_upper &&
           a.fixed_lambda == b.fixed_lambda && a.autotune == b.autotune && a.scaling == b.scaling;
}

void HarmonizationBundle::validate() const {
    hyperparameters.validate();
    if (models.empty()) throw Error(ErrorKind::InvalidArgument, "bundle has no region models");
    std::set<std::string> keys;
    for (const auto& [region, model] : models) {
        if (model.region_id != region)
            throw Error(ErrorKind::InvalidArgument, "bundle model key '" + region + "' mismatches its id");
        model.validate();
        if (!(model.basis == models.begin()->second.basis))
            throw Error(ErrorKind::InvalidArgument, "bundle regions use different bases");
        keys.insert(region);
    }
    std::set<std::string> qc_keys;
    for (const auto& [region, value] : qc) qc_keys.insert(region);
    if (keys != qc_keys) throw Error(ErrorKind::InvalidArgument, "bundle models and qc keys differ");
}

const BasisSpec& HarmonizationBundle::basis() const {
    if (models.empty()) throw Error(ErrorKind::InvalidArgument, "bundle has no region models");
    return models.begin()->second.basis;
}

}  // namespace ccombat
