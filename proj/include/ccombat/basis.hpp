#ifndef CCOMBAT_BASIS_HPP
#define CCOMBAT_BASIS_HPP

#include "ccombat/types.hpp"

#include <span>
#include <vector>

namespace ccombat {

/// Mean and population standard deviation of every covariate over the
/// reference records. Constant covariates get scale 1.
std::vector<CovariateScaling> fit_standardization(const SiteDataset& reference);

BasisSpec make_basis(const SiteDataset& reference, int degree,
                     BasisMode mode = BasisMode::MonomialsUpToP);

std::size_t feature_dimension(int degree, BasisMode mode, std::size_t covariate_count);
std::size_t feature_dimension(const BasisSpec& basis);

/// Exponent tuples of the features, constant first, then by total degree,
/// lexicographic (first covariate highest) within a degree.
std::vector<std::vector<int>> basis_exponents(int degree, BasisMode mode,
                                              std::size_t covariate_count);

/// Feature vector of one subject. Covariates are standardized with the basis
/// statistics before the monomials are formed.
Eigen::VectorXd expand_basis(std::span<const double> covariates, const BasisSpec& basis);
Eigen::VectorXd expand_basis(const CovariateVector& x, const BasisSpec& basis);

/// Stacked feature vectors, one row per record.
Eigen::MatrixXd design_matrix(const SiteDataset& data, const BasisSpec& basis);
Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& covariates, const BasisSpec& basis);

}  // namespace ccombat

#endif
