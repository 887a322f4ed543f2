/**
 * @file divergence.hpp
 * @brief Degrees-of-freedom formulas for projection estimators plus
 *        finite-difference and Monte Carlo checks.
 *
 * The divergence of a fit map at y is sum_i d theta_hat_i / d y_i. For
 * polyhedral projections it reduces to rank and component counts over the
 * active constraints; quadratic perturbations change it to a trace. All
 * formula routines report near-degeneracy diagnostics instead of silently
 * returning values at flagged points.
 */
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <polyproj/constraints.hpp>
#include <polyproj/isotonic.hpp>
#include <polyproj/problems.hpp>
#include <polyproj/rng.hpp>
#include <polyproj/solver.hpp>

namespace polyproj {

enum class DivergenceMethod {
    rank_formula,
    components,
    lifted_rank_formula,
    trace_formula,
    closed_form,
    finite_difference,
    monte_carlo,
};

inline const char* to_string(DivergenceMethod m) {
    switch (m) {
        case DivergenceMethod::rank_formula: return "rank_formula";
        case DivergenceMethod::components: return "components";
        case DivergenceMethod::lifted_rank_formula: return "lifted_rank_formula";
        case DivergenceMethod::trace_formula: return "trace_formula";
        case DivergenceMethod::closed_form: return "closed_form";
        case DivergenceMethod::finite_difference: return "finite_difference";
        case DivergenceMethod::monte_carlo: return "monte_carlo";
    }
    return "unknown";
}

struct DivergenceReport {
    double value = std::numeric_limits<double>::quiet_NaN();
    DivergenceMethod method = DivergenceMethod::rank_formula;
    bool ok = true;               // false when finite differences gave up
    bool near_degenerate = false; // active-set margin or rank-gap warning
    double smallest_kept = std::numeric_limits<double>::infinity();
    double rank_cutoff = 0.0;     // kept/cutoff pair measures the rank gap
    int retries = 0;              // jitter retries consumed (finite difference)
    double se = std::numeric_limits<double>::quiet_NaN(); // Monte Carlo only
    std::string note;
};

// ----------------------------------------------------------------------------
// Formula values
// ----------------------------------------------------------------------------

/// Projection onto {A theta <= b}: divergence = n - rank(A_J) over active rows.
inline DivergenceReport divergence_polyhedral(const ConstraintSystem& sys, const FitResult& fit) {
    DivergenceReport rep;
    rep.method = DivergenceMethod::rank_formula;
    rep.near_degenerate = fit.active.near_degenerate;
    const auto& J = fit.active.indices;
    const Eigen::Index n = sys.n();
    if (J.empty()) {
        rep.value = static_cast<double>(n);
        return rep;
    }
    Matrix AJ(static_cast<Eigen::Index>(J.size()), n);
    for (std::size_t r = 0; r < J.size(); ++r) AJ.row(static_cast<Eigen::Index>(r)) = sys.A.row(J[r]);
    RankInfo ri = numerical_rank_info(AJ);
    rep.value = static_cast<double>(n - ri.rank);
    rep.near_degenerate = rep.near_degenerate || ri.near_degenerate;
    rep.smallest_kept = ri.smallest_kept;
    rep.rank_cutoff = ri.cutoff;
    return rep;
}

namespace detail {

/// Active rows of a lifted system split into their xi and theta blocks.
inline void lifted_active_blocks(const LiftedSystem& sys, const FitResult& fit, Matrix& AJ,
                                 Matrix& BJ) {
    const auto& J = fit.active.indices;
    AJ.resize(static_cast<Eigen::Index>(J.size()), sys.p());
    BJ.resize(static_cast<Eigen::Index>(J.size()), sys.n());
    for (std::size_t r = 0; r < J.size(); ++r) {
        AJ.row(static_cast<Eigen::Index>(r)) = sys.A.row(J[r]);
        BJ.row(static_cast<Eigen::Index>(r)) = sys.B.row(J[r]);
    }
}

} // namespace detail

/**
 * @brief Divergence for lifted systems without curvature: n - |I| + rank(A_I)
 *        where I indexes a maximal independent subset of the active rows.
 */
inline DivergenceReport divergence_lifted_linear(const LiftedSystem& sys, const FitResult& fit) {
    if (std::holds_alternative<QuadraticPerturbation>(sys.perturbation))
        throw std::invalid_argument(
            "divergence_lifted_linear: quadratic perturbation needs the trace formula");
    DivergenceReport rep;
    rep.method = DivergenceMethod::lifted_rank_formula;
    rep.near_degenerate = fit.active.near_degenerate;
    const Eigen::Index n = sys.n();
    if (fit.active.indices.empty()) {
        rep.value = static_cast<double>(n);
        return rep;
    }
    Matrix AJ, BJ;
    detail::lifted_active_blocks(sys, fit, AJ, BJ);
    const std::vector<int> I = maximal_independent_rows(AJ, BJ);
    Eigen::Index rank_AI = 0;
    if (!I.empty() && sys.p() > 0) {
        Matrix AI(static_cast<Eigen::Index>(I.size()), sys.p());
        for (std::size_t r = 0; r < I.size(); ++r) AI.row(static_cast<Eigen::Index>(r)) = AJ.row(I[r]);
        RankInfo ri = numerical_rank_info(AI);
        rank_AI = ri.rank;
        rep.near_degenerate = rep.near_degenerate || ri.near_degenerate;
        rep.smallest_kept = ri.smallest_kept;
        rep.rank_cutoff = ri.cutoff;
    }
    rep.value = static_cast<double>(n - static_cast<Eigen::Index>(I.size()) + rank_AI);
    return rep;
}

/**
 * @brief Divergence under a quadratic perturbation of weight lambda:
 *        n - trace(B_I^T (B_I B_I^T + A_I A_I^T / lambda)^{-1} B_I).
 *
 * The middle matrix is positive definite whenever I is independent, so a
 * failed factorization indicates a broken row selection and throws.
 */
inline DivergenceReport divergence_lifted_quadratic(const LiftedSystem& sys,
                                                    const FitResult& fit) {
    const auto* quad = std::get_if<QuadraticPerturbation>(&sys.perturbation);
    if (quad == nullptr)
        throw std::invalid_argument("divergence_lifted_quadratic: quadratic perturbation required");
    DivergenceReport rep;
    rep.method = DivergenceMethod::trace_formula;
    rep.near_degenerate = fit.active.near_degenerate;
    const Eigen::Index n = sys.n();
    if (fit.active.indices.empty()) {
        rep.value = static_cast<double>(n);
        return rep;
    }
    Matrix AJ, BJ;
    detail::lifted_active_blocks(sys, fit, AJ, BJ);
    const std::vector<int> I = maximal_independent_rows(AJ, BJ);
    if (I.empty()) {
        rep.value = static_cast<double>(n);
        return rep;
    }
    const Eigen::Index k = static_cast<Eigen::Index>(I.size());
    Matrix AI(k, sys.p()), BI(k, n);
    for (Eigen::Index r = 0; r < k; ++r) {
        AI.row(r) = AJ.row(I[static_cast<std::size_t>(r)]);
        BI.row(r) = BJ.row(I[static_cast<std::size_t>(r)]);
    }
    Matrix M = BI * BI.transpose() + (1.0 / quad->lambda) * (AI * AI.transpose());
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error(
            "divergence_lifted_quadratic: factorization failed; selected rows are dependent");
    const Matrix MinvB = llt.solve(BI);
    rep.value = static_cast<double>(n) - (BI.array() * MinvB.array()).sum();
    return rep;
}

/// Ridge trace via the singular values of X: sum s_i^2 / (s_i^2 + lambda).
inline double closed_form_ridge(const Matrix& X, double lambda) {
    if (lambda <= 0) throw std::invalid_argument("closed_form_ridge: lambda > 0 required");
    if (X.size() == 0) return 0.0;
    Eigen::BDCSVD<Matrix> svd(X);
    double out = 0.0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
        const double s2 = svd.singularValues()(i) * svd.singularValues()(i);
        out += s2 / (s2 + lambda);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Finite differences
// ----------------------------------------------------------------------------

struct FdOptions {
    double h = std::numeric_limits<double>::quiet_NaN(); // default 1e-5*(1+|y|_inf)
    int max_retries = 5;
    double jitter_sd = 1e-6;
    std::uint64_t seed = 0x5eedf00dULL; // jitter stream
};

inline double default_fd_step(const Vector& y) {
    return 1e-5 * (1.0 + y.lpNorm<Eigen::Infinity>());
}

/**
 * @brief Central-difference divergence of a fit map.
 *
 * The estimate is only valid when all probes stay inside one face, so any
 * active-set change across the 2n+1 fits triggers a retry at a jittered
 * center. After max_retries failures the report carries ok = false and no
 * value rather than a silently wrong one.
 */
inline DivergenceReport finite_difference_divergence(
    const std::function<FitResult(const Vector&)>& fit_fn, const Vector& y, FdOptions opts = {}) {
    DivergenceReport rep;
    rep.method = DivergenceMethod::finite_difference;
    const Eigen::Index n = y.size();
    const double h = std::isnan(opts.h) ? default_fd_step(y) : opts.h;
    CounterRng jitter(opts.seed);

    for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
        Vector center = y;
        if (attempt > 0) center += opts.jitter_sd * jitter.normal_vector(static_cast<int>(n));
        const FitResult base = fit_fn(center);
        bool face_changed = false;
        double total = 0.0;
        for (Eigen::Index i = 0; i < n && !face_changed; ++i) {
            Vector up = center, dn = center;
            up(i) += h;
            dn(i) -= h;
            const FitResult fu = fit_fn(up);
            const FitResult fd = fit_fn(dn);
            if (fu.active.indices != base.active.indices ||
                fd.active.indices != base.active.indices) {
                face_changed = true;
                break;
            }
            total += (fu.theta_hat(i) - fd.theta_hat(i)) / (2.0 * h);
        }
        if (!face_changed) {
            rep.value = total;
            rep.retries = attempt;
            return rep;
        }
    }
    rep.ok = false;
    rep.retries = opts.max_retries;
    rep.note = "active set changed across probes at every jittered center";
    return rep;
}

// ----------------------------------------------------------------------------
// Monte Carlo
// ----------------------------------------------------------------------------

namespace detail {

/// Covariance-based df and its jackknife SE from fit/data sample columns.
inline std::pair<double, double> df_from_samples(const Matrix& T, const Matrix& Y, double sigma) {
    const Eigen::Index R = T.cols();
    const Vector st = T.rowwise().sum();
    const Vector sy = Y.rowwise().sum();
    const Vector sty = (T.array() * Y.array()).rowwise().sum();
    const double Rd = static_cast<double>(R);
    const double sig2 = sigma * sigma;

    const double value =
        ((sty.array() - st.array() * sy.array() / Rd) / (Rd - 1.0)).sum() / sig2;
    if (R < 3) return {value, std::numeric_limits<double>::infinity()};

    Vector loo(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        const auto tr = T.col(r).array();
        const auto yr = Y.col(r).array();
        const auto cov = (sty.array() - tr * yr) -
                         (st.array() - tr) * (sy.array() - yr) / (Rd - 1.0);
        loo(r) = cov.sum() / ((Rd - 2.0) * sig2);
    }
    const double mean_loo = loo.mean();
    const double se = std::sqrt((Rd - 1.0) / Rd * (loo.array() - mean_loo).square().sum());
    return {value, se};
}

} // namespace detail

/**
 * @brief Covariance-based degrees of freedom: draws y_r = theta_star +
 *        sigma z_r for r = 1..reps and returns (1/sigma^2) sum_i of the
 *        sample covariance between fit and data, with a jackknife standard
 *        error over replications.
 *
 * Streams are counter-based in (seed, rep), so equal seeds give common random
 * numbers across the points of a tuning grid.
 */
inline DivergenceReport monte_carlo_df(const Vector& theta_star, double sigma,
                                       const std::function<Vector(const Vector&)>& fit_fn,
                                       int reps, std::uint64_t seed) {
    if (reps < 2) throw std::invalid_argument("monte_carlo_df: reps >= 2 required");
    if (!(sigma > 0)) throw std::invalid_argument("monte_carlo_df: sigma > 0 required");
    const Eigen::Index n = theta_star.size();
    const Eigen::Index R = reps;
    Matrix T(n, R), Y(n, R);
    for (Eigen::Index r = 0; r < R; ++r) {
        CounterRng rng = CounterRng::replication_stream(seed, static_cast<std::uint64_t>(r + 1));
        Y.col(r) = theta_star + sigma * rng.normal_vector(static_cast<int>(n));
        T.col(r) = fit_fn(Y.col(r));
    }
    DivergenceReport rep;
    rep.method = DivergenceMethod::monte_carlo;
    std::tie(rep.value, rep.se) = detail::df_from_samples(T, Y, sigma);
    return rep;
}

// ----------------------------------------------------------------------------
// Dispatch
// ----------------------------------------------------------------------------

/// Class-appropriate formula for a built problem's fit.
inline DivergenceReport divergence_formula(const BuiltProblem& bp, const FitResult& fit) {
    if (const auto* plain = std::get_if<ConstraintSystem>(&bp.system))
        return divergence_polyhedral(*plain, fit);
    if (const auto* iso = std::get_if<BoundedIsotonicSystem>(&bp.system)) {
        DivergenceReport rep;
        rep.method = DivergenceMethod::components;
        rep.near_degenerate = fit.active.near_degenerate;
        rep.value = static_cast<double>(divergence_components(*iso, fit));
        return rep;
    }
    const auto& lift = std::get<LiftedSystem>(bp.system);
    if (std::holds_alternative<QuadraticPerturbation>(lift.perturbation))
        return divergence_lifted_quadratic(lift, fit);
    return divergence_lifted_linear(lift, fit);
}

} // namespace polyproj
