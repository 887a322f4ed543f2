/**
 * @file constraints.hpp
 * @brief Inequality systems, active-set detection, independent-row selection,
 *        and numerical rank: the shared substrate for the divergence formulas.
 */
#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <variant>
#include <vector>

namespace polyproj {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ----------------------------------------------------------------------------
// Domain types
// ----------------------------------------------------------------------------

/// Polyhedron {theta : A theta <= b} in inequality form. An empty system (m = 0)
/// denotes all of R^n.
struct ConstraintSystem {
    Matrix A; // m x n, one constraint normal per row
    Vector b; // m

    Eigen::Index m() const { return A.rows(); }
    Eigen::Index n() const { return A.cols(); }

    void validate() const {
        if (A.rows() != b.size()) throw std::invalid_argument("ConstraintSystem: A rows != b length");
        if (A.cols() < 1) throw std::invalid_argument("ConstraintSystem: n must be >= 1");
    }
};

struct NoPerturbation {};
struct LinearPerturbation {
    Vector d; // length p, objective gains d'xi
};
struct QuadraticPerturbation {
    double lambda; // > 0, objective gains (lambda/2)|xi|^2
};
using Perturbation = std::variant<NoPerturbation, LinearPerturbation, QuadraticPerturbation>;

/// Lifted polyhedron {(xi, theta) : A xi + B theta <= c} plus the objective
/// perturbation acting on the auxiliary block.
struct LiftedSystem {
    Matrix A; // m x p
    Matrix B; // m x n
    Vector c; // m
    Perturbation perturbation = NoPerturbation{};

    Eigen::Index m() const { return B.rows(); }
    Eigen::Index n() const { return B.cols(); }
    Eigen::Index p() const { return A.cols(); }

    void validate() const {
        if (A.rows() != B.rows() || B.rows() != c.size())
            throw std::invalid_argument("LiftedSystem: A, B, c row counts differ");
        if (std::holds_alternative<LinearPerturbation>(perturbation) &&
            std::get<LinearPerturbation>(perturbation).d.size() != A.cols())
            throw std::invalid_argument("LiftedSystem: linear perturbation length != p");
        if (std::holds_alternative<QuadraticPerturbation>(perturbation) &&
            std::get<QuadraticPerturbation>(perturbation).lambda <= 0)
            throw std::invalid_argument("LiftedSystem: quadratic perturbation needs lambda > 0");
    }
};

/// Indices of constraints holding with equality at a point, at the recorded
/// tolerance. `near_degenerate` marks classifications where some residual fell
/// within a decade of the tolerance boundary on either side.
struct ActiveSet {
    std::vector<int> indices; // strictly increasing
    double tolerance_used = 0.0;
    bool near_degenerate = false;

    bool contains(int i) const {
        return std::binary_search(indices.begin(), indices.end(), i);
    }
    std::size_t size() const { return indices.size(); }
};

// ----------------------------------------------------------------------------
// Operations
// ----------------------------------------------------------------------------

/// Default classification tolerance, scaled by the point's magnitude.
inline double default_active_tol(const Vector& point) {
    const double mag = point.size() ? point.lpNorm<Eigen::Infinity>() : 0.0;
    return 1e-7 * (1.0 + mag);
}

namespace detail {

inline ActiveSet classify_rows(const Vector& residual, double tol) {
    if (tol <= 0) throw std::invalid_argument("active_set: tol must be > 0");
    ActiveSet as;
    as.tolerance_used = tol;
    for (int i = 0; i < residual.size(); ++i) {
        const double r = std::abs(residual(i));
        if (r <= tol) as.indices.push_back(i);
        if (r > 0.1 * tol && r <= 10.0 * tol) as.near_degenerate = true;
    }
    return as;
}

} // namespace detail

/// Rows i with |<a_i, theta> - b_i| <= tol.
inline ActiveSet active_set(const ConstraintSystem& sys, const Vector& theta, double tol) {
    sys.validate();
    if (theta.size() != sys.n()) throw std::invalid_argument("active_set: point dimension != n");
    return detail::classify_rows(sys.A * theta - sys.b, tol);
}

inline ActiveSet active_set(const ConstraintSystem& sys, const Vector& theta) {
    return active_set(sys, theta, default_active_tol(theta));
}

/// Rows i with |<a_i, xi> + <b_i, theta> - c_i| <= tol.
inline ActiveSet active_set(const LiftedSystem& sys, const Vector& xi, const Vector& theta,
                            double tol) {
    sys.validate();
    if (xi.size() != sys.p() || theta.size() != sys.n())
        throw std::invalid_argument("active_set: point dimension != (p, n)");
    return detail::classify_rows(sys.A * xi + sys.B * theta - sys.c, tol);
}

inline ActiveSet active_set(const LiftedSystem& sys, const Vector& xi, const Vector& theta) {
    Vector point(xi.size() + theta.size());
    point << xi, theta;
    return active_set(sys, xi, theta, default_active_tol(point));
}

/// Numerical rank report. `near_degenerate` is set when the smallest retained
/// singular value sits within a decade of the cutoff, i.e. the integer rank is
/// not comfortably separated from the noise floor.
struct RankInfo {
    int rank = 0;
    bool near_degenerate = false;
    double smallest_kept = 0.0;
    double cutoff = 0.0;
};

inline RankInfo numerical_rank_info(const Matrix& M, double rel_tol = 1e-12) {
    if (!M.allFinite()) throw std::invalid_argument("numerical_rank: non-finite entries");
    RankInfo info;
    if (M.size() == 0) return info;
    Eigen::BDCSVD<Matrix> svd(M);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) == 0.0) return info;
    info.cutoff = rel_tol * static_cast<double>(std::max(M.rows(), M.cols())) * sv(0);
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > info.cutoff) ++info.rank;
    if (info.rank > 0) {
        info.smallest_kept = sv(info.rank - 1);
        info.near_degenerate = info.smallest_kept <= 10.0 * info.cutoff;
    }
    return info;
}

/// Count of singular values above rel_tol * max(dims) * sigma_max.
inline int numerical_rank(const Matrix& M, double rel_tol = 1e-12) {
    return numerical_rank_info(M, rel_tol).rank;
}

/**
 * @brief Greedy (ascending row index) maximal independent row subset of the
 *        stacked matrix [A_J, B_J].
 *
 * The returned subset I satisfies rank([A_I, B_I]) = rank([A_J, B_J]) with
 * linearly independent rows; the greedy order makes the selection
 * deterministic. Selection stops once the SVD rank is reached, so dependent
 * tail rows are never probed against a full basis.
 */
inline std::vector<int> maximal_independent_rows(const Matrix& A_J, const Matrix& B_J,
                                                 double rel_tol = 1e-12) {
    if (A_J.rows() != B_J.rows())
        throw std::invalid_argument("maximal_independent_rows: row counts differ");
    const Eigen::Index k = A_J.rows();
    const Eigen::Index w = A_J.cols() + B_J.cols();
    if (k == 0 || w == 0) return {};

    Matrix M(k, w);
    M << A_J, B_J;
    const RankInfo ri = numerical_rank_info(M, rel_tol);
    if (ri.rank == 0) return {};

    auto greedy = [&](double accept_tol) {
        std::vector<int> picked;
        Matrix Q(w, ri.rank); // orthonormal basis of the span of picked rows
        int r = 0;
        for (Eigen::Index i = 0; i < k && r < ri.rank; ++i) {
            Vector v = M.row(i).transpose();
            Vector res = v - Q.leftCols(r) * (Q.leftCols(r).transpose() * v);
            res -= Q.leftCols(r) * (Q.leftCols(r).transpose() * res); // reorthogonalize once
            const double nrm = res.norm();
            if (nrm > accept_tol) {
                Q.col(r++) = res / nrm;
                picked.push_back(static_cast<int>(i));
            }
        }
        return picked;
    };

    std::vector<int> picked = greedy(ri.cutoff);
    if (static_cast<int>(picked.size()) < ri.rank) picked = greedy(ri.cutoff * 1e-3);
    return picked;
}

} // namespace polyproj
