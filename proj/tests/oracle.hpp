// Reference computations for tests. Deliberately written without Eigen's
// solvers: plain loops over std::vector so they share no code path with the
// library.
#ifndef CCOMBAT_TESTS_ORACLE_HPP
#define CCOMBAT_TESTS_ORACLE_HPP

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // row-major
using Vec = std::vector<double>;

inline Mat to_mat(const Eigen::MatrixXd& m) {
    Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
    return out;
}

inline Vec to_vec(const Eigen::VectorXd& v) { return Vec(v.data(), v.data() + v.size()); }

/// Moore-Penrose pseudoinverse of a full-column-rank matrix via modified
/// Gram-Schmidt with one reorthogonalization pass: A = QR, A+ = R^-1 Q'.
inline Mat pseudoinverse(const Mat& a) {
    const std::size_t m = a.size();
    const std::size_t n = a.empty() ? 0 : a[0].size();
    if (m < n) throw std::invalid_argument("pseudoinverse oracle needs rows >= cols");
    Mat q(n, Vec(m));  // columns of Q
    Mat r(n, Vec(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
        Vec v(m);
        for (std::size_t i = 0; i < m; ++i) v[i] = a[i][j];
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t i = 0; i < m; ++i) dot += q[k][i] * v[i];
                r[k][j] += dot;
                for (std::size_t i = 0; i < m; ++i) v[i] -= dot * q[k][i];
            }
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) throw std::invalid_argument("rank-deficient matrix");
        r[j][j] = norm;
        for (std::size_t i = 0; i < m; ++i) q[j][i] = v[i] / norm;
    }
    // Back substitution R X = Q' column by column of Q'.
    Mat pinv(n, Vec(m, 0.0));
    for (std::size_t col = 0; col < m; ++col) {
        for (std::size_t ii = n; ii-- > 0;) {
            double s = q[ii][col];
            for (std::size_t k = ii + 1; k < n; ++k) s -= r[ii][k] * pinv[k][col];
            pinv[ii][col] = s / r[ii][ii];
        }
    }
    return pinv;
}

inline Vec mat_vec(const Mat& a, const Vec& x) {
    Vec out(a.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < x.size(); ++j) out[i] += a[i][j] * x[j];
    return out;
}

/// argmin ||phi b - y||^2
inline Vec least_squares(const Mat& phi, const Vec& y) { return mat_vec(pseudoinverse(phi), y); }

/// argmin ||phi b - y||^2 + sum_k lambda_k (b_k - prior_k)^2, solved as the
/// stacked least-squares problem [phi; sqrt(L)] b = [y; sqrt(L) prior].
inline Vec ridge_to_prior(const Mat& phi, const Vec& y, const Vec& lambda, const Vec& prior) {
    Mat a = phi;
    Vec b = y;
    const std::size_t n = prior.size();
    for (std::size_t k = 0; k < n; ++k) {
        Vec row(n, 0.0);
        row[k] = std::sqrt(lambda[k]);
        a.push_back(row);
        b.push_back(std::sqrt(lambda[k]) * prior[k]);
    }
    return least_squares(a, b);
}

inline double mean_squared_residual(const Mat& phi, const Vec& y, const Vec& beta) {
    const Vec fit = mat_vec(phi, beta);
    double ss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) ss += (y[i] - fit[i]) * (y[i] - fit[i]);
    return ss / static_cast<double>(y.size());
}

/// All exponent tuples of `n` variables with total degree <= p, by brute force.
inline std::vector<std::vector<int>> monomials(int n, int p) {
    std::vector<std::vector<int>> out;
    std::vector<int> e(static_cast<std::size_t>(n), 0);
    while (true) {
        int total = 0;
        for (int x : e) total += x;
        if (total <= p) out.push_back(e);
        std::size_t k = 0;
        while (k < e.size() && ++e[k] > p) e[k++] = 0;
        if (k == e.size()) break;
    }
    return out;
}

inline double rel_err(const Vec& a, const Vec& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

/// Bhattacharyya distance between two univariate Gaussians, written out.
inline double bhattacharyya(double m1, double s1, double m2, double s2) {
    const double v1 = s1 * s1, v2 = s2 * s2;
    return 0.25 * (m1 - m2) * (m1 - m2) / (v1 + v2) + 0.5 * std::log((v1 + v2) / (2.0 * s1 * s2));
}

}  // namespace oracle

#endif
