#ifndef CCOMBAT_SRC_LINALG_HPP
#define CCOMBAT_SRC_LINALG_HPP

#include <Eigen/Dense>

namespace ccombat::detail {

/// Largest accepted condition number of a (Jacobi-scaled) normal matrix.
inline constexpr double kMaxCondition = 1e12;

/// Solves the symmetric positive-definite system `a x = b`. The condition
/// number is measured after symmetric diagonal scaling so that a large ridge
/// on one coefficient does not count as ill-conditioning. Throws
/// SingularDesign when it exceeds kMaxCondition.
Eigen::VectorXd solve_spd(const Eigen::MatrixXd& a, const Eigen::VectorXd& b);

}  // namespace ccombat::detail

#endif
