/**
 * @file nnls.hpp
 * @brief Nonnegative least squares via the Lawson-Hanson active-set method.
 */
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace polyproj {

struct NnlsResult {
    Eigen::VectorXd x;        // >= 0 elementwise
    double residual_norm = 0; // |Mx - b|_2 at the returned x
    int iterations = 0;
    bool converged = false;
};

/**
 * @brief Solve min |Mx - b|_2 subject to x >= 0.
 *
 * Finite termination on exact arithmetic; `tol` guards the stationarity test
 * max_i (M'(b - Mx))_i <= tol. Defaults scale with the problem data.
 */
inline NnlsResult nnls(const Eigen::MatrixXd& M, const Eigen::VectorXd& b, double tol = -1.0,
                       int max_iter = -1) {
    if (M.rows() != b.size()) throw std::invalid_argument("nnls: M rows != b length");
    const Eigen::Index rows = M.rows();
    const Eigen::Index cols = M.cols();

    NnlsResult out;
    out.x = Eigen::VectorXd::Zero(cols);
    if (cols == 0 || rows == 0) {
        out.residual_norm = b.norm();
        out.converged = true;
        return out;
    }
    if (tol <= 0) {
        const double scale = std::max(1.0, (M.transpose() * b).lpNorm<Eigen::Infinity>());
        tol = 1e2 * std::numeric_limits<double>::epsilon() *
              static_cast<double>(std::max(rows, cols)) * scale;
    }
    if (max_iter <= 0) max_iter = 3 * static_cast<int>(cols) + 30;

    std::vector<bool> passive(static_cast<std::size_t>(cols), false);
    std::vector<Eigen::Index> pidx;
    Eigen::VectorXd resid = b;

    auto solve_passive = [&]() -> Eigen::VectorXd {
        Eigen::MatrixXd Mp(rows, static_cast<Eigen::Index>(pidx.size()));
        for (std::size_t j = 0; j < pidx.size(); ++j) Mp.col(static_cast<Eigen::Index>(j)) = M.col(pidx[j]);
        return Mp.colPivHouseholderQr().solve(b);
    };

    for (; out.iterations < max_iter; ++out.iterations) {
        Eigen::VectorXd grad = M.transpose() * resid;
        Eigen::Index best = -1;
        double best_val = tol;
        for (Eigen::Index j = 0; j < cols; ++j) {
            if (!passive[static_cast<std::size_t>(j)] && grad(j) > best_val) {
                best_val = grad(j);
                best = j;
            }
        }
        if (best < 0) {
            out.converged = true;
            break;
        }
        passive[static_cast<std::size_t>(best)] = true;
        pidx.push_back(best);

        // Inner loop: retreat until the passive coordinates are all positive.
        while (true) {
            Eigen::VectorXd zp = solve_passive();
            double alpha = 1.0;
            for (std::size_t j = 0; j < pidx.size(); ++j) {
                const double zj = zp(static_cast<Eigen::Index>(j));
                if (zj <= 0) {
                    const double xj = out.x(pidx[j]);
                    const double step = xj / (xj - zj);
                    alpha = std::min(alpha, step);
                }
            }
            if (alpha >= 1.0) {
                for (std::size_t j = 0; j < pidx.size(); ++j) out.x(pidx[j]) = zp(static_cast<Eigen::Index>(j));
                break;
            }
            for (std::size_t j = 0; j < pidx.size(); ++j) {
                const Eigen::Index c = pidx[j];
                out.x(c) += alpha * (zp(static_cast<Eigen::Index>(j)) - out.x(c));
            }
            // Drop coordinates that hit zero.
            std::vector<Eigen::Index> keep;
            for (Eigen::Index c : pidx) {
                if (out.x(c) > 1e-14 * (1.0 + out.x.lpNorm<Eigen::Infinity>())) {
                    keep.push_back(c);
                } else {
                    out.x(c) = 0.0;
                    passive[static_cast<std::size_t>(c)] = false;
                }
            }
            pidx.swap(keep);
            if (pidx.empty()) break;
        }
        resid = b - M * out.x;
    }
    out.residual_norm = (b - M * out.x).norm();
    return out;
}

} // namespace polyproj
