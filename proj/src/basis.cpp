#include "ccombat/basis.hpp"

#include "ccombat/error.hpp"

#include <cmath>
#include <string>

namespace ccombat {

namespace {

// Appends every exponent tuple of total degree `remaining` over covariates
// [k, n) in lexicographic order (earlier covariates get the larger power first).
void append_degree(std::vector<int>& current, std::size_t k, int remaining,
                   std::vector<std::vector<int>>& out) {
    const std::size_t n = current.size();
    if (k + 1 == n) {
        current[k] = remaining;
        out.push_back(current);
        return;
    }
    for (int e = remaining; e >= 0; --e) {
        current[k] = e;
        append_degree(current, k + 1, remaining - e, out);
    }
    current[k] = 0;
}

double int_power(double base, int exponent) {
    double result = 1.0;
    for (int i = 0; i < exponent; ++i) result *= base;
    return result;
}

}  // namespace

std::vector<CovariateScaling> fit_standardization(const SiteDataset& reference) {
    if (reference.size() < 2)
        throw Error(ErrorKind::InsufficientData,
                    "standardization needs at least 2 reference records, got " +
                        std::to_string(reference.size()));
    const Eigen::MatrixXd x = reference.covariate_matrix();
    const double n = static_cast<double>(x.rows());
    std::vector<CovariateScaling> scaling(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const double mean = x.col(k).sum() / n;
        const double var = (x.col(k).array() - mean).square().sum() / n;
        const double sd = std::sqrt(var);
        scaling[static_cast<std::size_t>(k)] = {mean, sd > 0.0 ? sd : 1.0};
    }
    return scaling;
}

BasisSpec make_basis(const SiteDataset& reference, int degree, BasisMode mode) {
    BasisSpec basis;
    basis.degree = degree;
    basis.mode = mode;
    basis.covariate_names = reference.covariate_names();
    basis.standardization = fit_standardization(reference);
    basis.validate();
    return basis;
}

std::vector<std::vector<int>> basis_exponents(int degree, BasisMode mode,
                                              std::size_t covariate_count) {
    if (degree < 0) throw Error(ErrorKind::InvalidArgument, "basis degree must be >= 0");
    if (covariate_count == 0) throw Error(ErrorKind::InvalidArgument, "basis needs a covariate");
    std::vector<std::vector<int>> out;
    std::vector<int> current(covariate_count, 0);
    for (int d = 0; d <= degree; ++d) {
        const std::size_t start = out.size();
        append_degree(current, 0, d, out);
        if (mode == BasisMode::LiteralKernelExpansion) {
            // (x'x + 1)^P only produces products of squares.
            for (std::size_t i = start; i < out.size(); ++i)
                for (int& e : out[i]) e *= 2;
        }
    }
    return out;
}

std::size_t feature_dimension(int degree, BasisMode, std::size_t covariate_count) {
    // C(n + P, P) in both modes.
    std::size_t dim = 1;
    for (int i = 1; i <= degree; ++i) {
        dim = dim * (covariate_count + static_cast<std::size_t>(i)) / static_cast<std::size_t>(i);
    }
    return dim;
}

std::size_t feature_dimension(const BasisSpec& basis) {
    return feature_dimension(basis.degree, basis.mode, basis.covariate_count());
}

Eigen::VectorXd expand_basis(std::span<const double> covariates, const BasisSpec& basis) {
    if (covariates.size() != basis.covariate_count())
        throw Error(ErrorKind::CovariateMismatch,
                    "expected " + std::to_string(basis.covariate_count()) + " covariates, got " +
                        std::to_string(covariates.size()));
    std::vector<double> z(covariates.size());
    for (std::size_t k = 0; k < covariates.size(); ++k) {
        if (!std::isfinite(covariates[k]))
            throw Error(ErrorKind::InvalidArgument, "covariate is not finite");
        const auto& s = basis.standardization[k];
        z[k] = (covariates[k] - s.center) / s.scale;
    }
    const auto exponents = basis_exponents(basis.degree, basis.mode, covariates.size());
    Eigen::VectorXd phi(static_cast<Eigen::Index>(exponents.size()));
    for (std::size_t f = 0; f < exponents.size(); ++f) {
        double term = 1.0;
        for (std::size_t k = 0; k < z.size(); ++k) term *= int_power(z[k], exponents[f][k]);
        phi(static_cast<Eigen::Index>(f)) = term;
    }
    return phi;
}

Eigen::VectorXd expand_basis(const CovariateVector& x, const BasisSpec& basis) {
    if (!basis.covariate_names.empty() && x.names != basis.covariate_names)
        throw Error(ErrorKind::CovariateMismatch, "covariate names do not match the basis");
    return expand_basis(std::span<const double>(x.values), basis);
}

Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& covariates, const BasisSpec& basis) {
    const auto dim = static_cast<Eigen::Index>(feature_dimension(basis));
    Eigen::MatrixXd phi(covariates.rows(), dim);
    std::vector<double> row(static_cast<std::size_t>(covariates.cols()));
    for (Eigen::Index j = 0; j < covariates.rows(); ++j) {
        for (Eigen::Index k = 0; k < covariates.cols(); ++k)
            row[static_cast<std::size_t>(k)] = covariates(j, k);
        phi.row(j) = expand_basis(std::span<const double>(row), basis).transpose();
    }
    return phi;
}

Eigen::MatrixXd design_matrix(const SiteDataset& data, const BasisSpec& basis) {
    if (!basis.covariate_names.empty() && !data.empty() &&
        data.covariate_names() != basis.covariate_names)
        throw Error(ErrorKind::CovariateMismatch,
                    "site '" + data.site_id + "' covariates do not match the basis");
    return design_matrix(data.covariate_matrix(), basis);
}

}  // namespace ccombat
