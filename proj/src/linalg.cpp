#include "linalg.hpp"

#include "ccombat/error.hpp"

#include <cmath>
#include <sstream>

namespace ccombat::detail {

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    const Eigen::Index n = a.rows();
    Eigen::VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(a(i, i) > 0.0) || !std::isfinite(a(i, i)))
            throw Error(ErrorKind::SingularDesign, "normal matrix has a non-positive diagonal entry");
        d(i) = 1.0 / std::sqrt(a(i, i));
    }
    const Eigen::MatrixXd scaled = d.asDiagonal() * a * d.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(scaled, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > kMaxCondition) {
        std::ostringstream msg;
        msg << "normal equations are singular or ill-conditioned (condition ";
        if (lo > 0.0)
            msg << hi / lo;
        else
            msg << "inf";
        msg << ")";
        throw Error(ErrorKind::SingularDesign, msg.str());
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(scaled);
    const Eigen::VectorXd y = ldlt.solve(d.asDiagonal() * b);
    return d.asDiagonal() * y;
}

}  // namespace ccombat::detail
