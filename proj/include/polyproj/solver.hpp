/**
 * @file solver.hpp
 * @brief Quadratic-program solver for the three projection classes: plain
 *        projection onto {A theta <= b}, linearly perturbed partial
 *        projection, and quadratically perturbed projection.
 *
 * Default pipeline: a predictor-corrector interior point method that exploits
 * the row sparsity of the constraint matrix, falling back to ADMM with an
 * active-set polish when it cannot certify the solution. The interior point
 * route is what keeps heavily degenerate constraint sets (near-parallel rows,
 * dependent active faces) solvable to tight absolute KKT residuals, which the
 * integer-valued divergence formulas downstream rely on.
 */
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include <polyproj/constraints.hpp>
#include <polyproj/nnls.hpp>

namespace polyproj {

enum class SolveStatus { optimal, max_iter, infeasible, unbounded };
enum class SolveMethod { interior_point, active_set, operator_splitting_with_polish };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return "optimal";
        case SolveStatus::max_iter: return "max_iter";
        case SolveStatus::infeasible: return "infeasible";
        case SolveStatus::unbounded: return "unbounded";
    }
    return "unknown";
}

struct SolverConfig {
    int max_iterations = 20000;
    double primal_tol = 1e-8;
    double dual_tol = 1e-8;
    SolveMethod method = SolveMethod::interior_point;

    void validate() const {
        if (max_iterations < 1) throw std::invalid_argument("SolverConfig: max_iterations >= 1");
        if (primal_tol <= 0 || dual_tol <= 0)
            throw std::invalid_argument("SolverConfig: tolerances must be > 0");
    }
};

/// Max-norm residuals of the Karush-Kuhn-Tucker system at the returned point,
/// always measured against the unregularized problem.
struct KktResiduals {
    double stationarity = 0.0;
    double primal_feasibility = 0.0;
    double complementary_slackness = 0.0;
    double dual_negativity = 0.0;

    double worst() const {
        return std::max(std::max(stationarity, primal_feasibility),
                        std::max(complementary_slackness, dual_negativity));
    }
    bool within(const SolverConfig& cfg) const {
        return stationarity <= cfg.primal_tol && primal_feasibility <= cfg.primal_tol &&
               complementary_slackness <= cfg.primal_tol && dual_negativity <= cfg.dual_tol;
    }
};

struct FitResult {
    Vector theta_hat;
    std::optional<Vector> xi_hat; // present for lifted systems with p > 0
    Vector duals;                 // length m, >= 0
    ActiveSet active;
    double objective = 0.0;
    SolveStatus status = SolveStatus::max_iter;
    KktResiduals kkt;
    int iterations = 0;
};

/// Farkas-type certificate for boundedness of the linearly perturbed program.
struct BoundednessCertificate {
    bool bounded = false;
    Vector lambda;         // >= 0 with A' lambda = -d when bounded
    double residual = 0.0; // |A' lambda + d|_2 at the certificate
};

/**
 * @brief Boundedness test for a lifted system: with a linear perturbation d,
 *        the optimal value is bounded iff -d = A' lambda for some lambda >= 0.
 *
 * Tested by nonnegative least squares. Systems without a linear perturbation
 * are trivially bounded.
 */
inline BoundednessCertificate check_bounded(const LiftedSystem& sys, double tol = 1e-8) {
    sys.validate();
    BoundednessCertificate cert;
    if (!std::holds_alternative<LinearPerturbation>(sys.perturbation)) {
        cert.bounded = true;
        cert.lambda = Vector::Zero(sys.m());
        return cert;
    }
    const Vector& d = std::get<LinearPerturbation>(sys.perturbation).d;
    if (d.size() == 0 || d.lpNorm<Eigen::Infinity>() == 0.0) {
        cert.bounded = true;
        cert.lambda = Vector::Zero(sys.m());
        return cert;
    }
    NnlsResult res = nnls(sys.A.transpose(), -d);
    cert.lambda = res.x;
    cert.residual = res.residual_norm;
    cert.bounded = res.converged && res.residual_norm <= tol * (1.0 + d.norm());
    return cert;
}

namespace detail {

/// Canonical form min (1/2) z' diag(Pdiag) z + q' z  s.t.  G z <= h, with
/// z = (xi, theta). All three projection classes have a diagonal quadratic.
struct Canonical {
    Vector Pdiag;
    Vector q;
    Matrix G;
    Vector h;
    Eigen::Index p = 0;
    Eigen::Index n = 0;

    Eigen::Index w() const { return p + n; }
    Eigen::Index m() const { return G.rows(); }
    double objective_const() const { return 0.5 * q.tail(n).squaredNorm(); }
    double objective_at(const Vector& z) const {
        return 0.5 * z.dot(Pdiag.cwiseProduct(z)) + q.dot(z) + objective_const();
    }
};

inline Canonical canonicalize(const ConstraintSystem& sys, const Vector& y) {
    sys.validate();
    if (y.size() != sys.n()) throw std::invalid_argument("solver: y length != n");
    Canonical c;
    c.p = 0;
    c.n = sys.n();
    c.Pdiag = Vector::Ones(c.n);
    c.q = -y;
    c.G = sys.A;
    c.h = sys.b;
    return c;
}

inline Canonical canonicalize(const LiftedSystem& sys, const Vector& y) {
    sys.validate();
    if (y.size() != sys.n()) throw std::invalid_argument("solver: y length != n");
    Canonical c;
    c.p = sys.p();
    c.n = sys.n();
    c.Pdiag = Vector::Zero(c.w());
    c.Pdiag.tail(c.n).setOnes();
    c.q = Vector::Zero(c.w());
    c.q.tail(c.n) = -y;
    if (const auto* lin = std::get_if<LinearPerturbation>(&sys.perturbation)) {
        c.q.head(c.p) = lin->d;
    } else if (const auto* quad = std::get_if<QuadraticPerturbation>(&sys.perturbation)) {
        c.Pdiag.head(c.p).setConstant(quad->lambda);
    }
    c.G.resize(sys.m(), c.w());
    c.G << sys.A, sys.B;
    c.h = sys.c;
    return c;
}

inline KktResiduals eval_kkt(const Canonical& c, const Vector& z, const Vector& lam) {
    KktResiduals k;
    Vector stat = c.Pdiag.cwiseProduct(z) + c.q;
    if (c.m() > 0) stat += c.G.transpose() * lam;
    k.stationarity = stat.lpNorm<Eigen::Infinity>();
    if (c.m() > 0) {
        Vector resid = c.G * z - c.h;
        k.primal_feasibility = resid.cwiseMax(0.0).maxCoeff();
        k.complementary_slackness = lam.cwiseProduct(resid).cwiseAbs().maxCoeff();
        k.dual_negativity = std::max(0.0, -lam.minCoeff());
    }
    return k;
}

/// Equality-constrained re-solve on a set of independent rows. The quadratic
/// diagonal gets an epsilon floor so positive-semidefinite xi blocks factor;
/// iterative refinement then drives the UNregularized KKT residual down.
class EqpSolver {
  public:
    explicit EqpSolver(const Canonical& c) : c_(c) {
        reg_ = c.Pdiag;
        for (Eigen::Index j = 0; j < reg_.size(); ++j)
            if (reg_(j) <= 0.0) reg_(j) = 1e-10;
        dinv_ = reg_.cwiseInverse();
    }

    /// Solve min (1/2) z'Pz + q'z s.t. G_I z = h_I. Returns false if the
    /// reduced system cannot be factored or refinement diverges.
    bool solve(const std::vector<int>& I, Vector& z, Vector& nu) const {
        const Eigen::Index r = static_cast<Eigen::Index>(I.size());
        const Eigen::Index w = c_.w();
        if (r == 0) {
            // Unconstrained minimum; diverges if a zero-curvature direction
            // has nonzero gradient (caller treats that as a failed polish).
            for (Eigen::Index j = 0; j < w; ++j)
                if (c_.Pdiag(j) <= 0.0 && std::abs(c_.q(j)) > 1e-9) return false;
            z = -dinv_.cwiseProduct(c_.q);
            nu.resize(0);
            return true;
        }
        Matrix GI(r, w);
        Vector hI(r);
        for (Eigen::Index i = 0; i < r; ++i) {
            GI.row(i) = c_.G.row(I[static_cast<std::size_t>(i)]);
            hI(i) = c_.h(I[static_cast<std::size_t>(i)]);
        }
        Matrix S = GI * dinv_.asDiagonal() * GI.transpose();
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success) {
            S.diagonal().array() += 1e-12 * (1.0 + S.trace() / static_cast<double>(r));
            llt.compute(S);
            if (llt.info() != Eigen::Success) return false;
        }
        nu = llt.solve(GI * dinv_.cwiseProduct(-c_.q) - hI);
        z = dinv_.cwiseProduct(-c_.q - GI.transpose() * nu);

        // Refinement against the true (unregularized) KKT system.
        double prev = std::numeric_limits<double>::infinity();
        for (int pass = 0; pass < 4; ++pass) {
            Vector r1 = -c_.q - c_.Pdiag.cwiseProduct(z) - GI.transpose() * nu;
            Vector r2 = hI - GI * z;
            const double res = std::max(r1.lpNorm<Eigen::Infinity>(), r2.lpNorm<Eigen::Infinity>());
            if (res > 10.0 * prev) return false; // diverging: semidefinite direction unbound
            if (res < 1e-14 * (1.0 + c_.q.lpNorm<Eigen::Infinity>())) break;
            prev = res;
            Vector dnu = llt.solve(GI * dinv_.cwiseProduct(r1) - r2);
            Vector dz = dinv_.cwiseProduct(r1 - GI.transpose() * dnu);
            z += dz;
            nu += dnu;
        }
        return true;
    }

  private:
    const Canonical& c_;
    Vector reg_;
    Vector dinv_;
};

struct PolishOutcome {
    Vector z;
    Vector lam; // full length m, >= 0
    KktResiduals kkt;
    bool clean = false;
};

/// Active-set clean-up loop: re-solve on an independent subset of candidate
/// rows, drop rows with negative multipliers, re-add violated rows.
inline std::optional<PolishOutcome> polish(const Canonical& c, const Vector& z_in,
                                           const Vector& u_in) {
    const Eigen::Index m = c.m();
    EqpSolver eqp(c);

    // Candidate working set from the incoming point: rows at (or beyond) the
    // boundary, or rows the incoming duals consider active.
    Vector slack = c.h - c.G * z_in;
    const double cand_tol = 1e-5 * (1.0 + c.h.lpNorm<Eigen::Infinity>() +
                                    z_in.lpNorm<Eigen::Infinity>());
    const double dual_sig = 1e-9 * (1.0 + u_in.lpNorm<Eigen::Infinity>());
    std::vector<int> J;
    for (Eigen::Index i = 0; i < m; ++i)
        if (slack(i) <= cand_tol || u_in(i) > dual_sig) J.push_back(static_cast<int>(i));

    // At most rank(G) <= w rows can be independent, so a bloated candidate
    // list (common mid-solve, when duals are still noisy) only slows the
    // rank-revealing step. Keep the strongest evidence: dual-active rows
    // first, then the smallest slacks.
    const std::size_t cap = 2 * static_cast<std::size_t>(c.w()) + 64;
    if (J.size() > cap) {
        std::stable_sort(J.begin(), J.end(), [&](int a, int b) {
            const double sa = u_in(a) > dual_sig ? -u_in(a) : slack(a);
            const double sb = u_in(b) > dual_sig ? -u_in(b) : slack(b);
            return sa < sb;
        });
        J.resize(cap);
        std::sort(J.begin(), J.end());
    }

    std::optional<PolishOutcome> best;
    Vector z, nu;
    bool tried_nnls = false;
    for (int loop = 0; loop < 40; ++loop) {
        // Independent subset of the working set.
        std::vector<int> I;
        if (!J.empty()) {
            Matrix GJ(static_cast<Eigen::Index>(J.size()), c.w());
            for (std::size_t i = 0; i < J.size(); ++i)
                GJ.row(static_cast<Eigen::Index>(i)) = c.G.row(J[i]);
            std::vector<int> local = maximal_independent_rows(GJ, Matrix(GJ.rows(), 0));
            I.reserve(local.size());
            for (int li : local) I.push_back(J[static_cast<std::size_t>(li)]);
        }
        if (!eqp.solve(I, z, nu)) {
            // Unsolvable working set: grow it with the most violated rows.
            Vector s2 = c.h - c.G * z_in;
            std::vector<int> grown = I;
            for (Eigen::Index i = 0; i < m; ++i)
                if (s2(i) < 0 && !std::binary_search(I.begin(), I.end(), static_cast<int>(i)))
                    grown.push_back(static_cast<int>(i));
            std::sort(grown.begin(), grown.end());
            if (grown == J) return best; // no progress possible
            J.swap(grown);
            continue;
        }

        // Drop rows whose multiplier went negative.
        const double drop_tol = 1e-9 * (1.0 + (nu.size() ? nu.lpNorm<Eigen::Infinity>() : 0.0));
        std::vector<int> kept;
        for (std::size_t i = 0; i < I.size(); ++i)
            if (nu(static_cast<Eigen::Index>(i)) >= -drop_tol) kept.push_back(I[i]);

        // Build the full dual vector for this iterate.
        Vector lam = Vector::Zero(m);
        for (std::size_t i = 0; i < I.size(); ++i)
            lam(I[i]) = std::max(0.0, nu(static_cast<Eigen::Index>(i)));
        PolishOutcome cur{z, lam, eval_kkt(c, z, lam), false};
        if (!best || cur.kkt.worst() < best->kkt.worst()) best = cur;

        if (kept.size() != I.size()) {
            // A dependent selection can flip multiplier signs forever even
            // when the primal point is already optimal. Before cycling,
            // certify the point directly: nonnegative duals supported on the
            // tight rows, found by nonnegative least squares.
            if (!tried_nnls) {
                tried_nnls = true;
                Vector resid = c.G * z - c.h;
                const double feas_tol = 1e-9 * (1.0 + c.h.lpNorm<Eigen::Infinity>());
                if ((resid.array() <= feas_tol).all()) {
                    const double tight = 1e-8 * (1.0 + c.h.lpNorm<Eigen::Infinity>());
                    std::vector<int> S;
                    for (Eigen::Index i = 0; i < m; ++i)
                        if (resid(i) >= -tight) S.push_back(static_cast<int>(i));
                    if (!S.empty() && S.size() <= cap) {
                        Matrix Gt(c.w(), static_cast<Eigen::Index>(S.size()));
                        for (std::size_t i = 0; i < S.size(); ++i)
                            Gt.col(static_cast<Eigen::Index>(i)) = c.G.row(S[i]).transpose();
                        Vector target = -(c.Pdiag.cwiseProduct(z) + c.q);
                        NnlsResult sol = nnls(Gt, target);
                        if (sol.converged &&
                            sol.residual_norm <= 1e-9 * (1.0 + target.norm())) {
                            Vector lam2 = Vector::Zero(m);
                            for (std::size_t i = 0; i < S.size(); ++i)
                                lam2(S[i]) = sol.x(static_cast<Eigen::Index>(i));
                            PolishOutcome ok{z, lam2, eval_kkt(c, z, lam2), true};
                            if (!best || ok.kkt.worst() <= best->kkt.worst()) best = ok;
                            return best;
                        }
                    }
                }
            }
            J.swap(kept);
            continue;
        }

        // Re-add rows the equality solve left violated.
        Vector resid = c.G * z - c.h;
        const double add_tol = 1e-9 * (1.0 + c.h.lpNorm<Eigen::Infinity>());
        std::vector<int> added = I;
        for (Eigen::Index i = 0; i < m; ++i)
            if (resid(i) > add_tol && !std::binary_search(I.begin(), I.end(), static_cast<int>(i)))
                added.push_back(static_cast<int>(i));
        std::sort(added.begin(), added.end());
        if (added.size() == I.size()) {
            best = PolishOutcome{z, lam, cur.kkt, true};
            return best;
        }
        J.swap(added);
    }
    return best;
}

/// Extended precision used for the interior point Newton systems. The
/// normal-matrix condition number grows like the barrier weight spread, which
/// exceeds what double factorizations can carry near convergence.
using VectorL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
using MatrixL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

/// Row-compressed view of G for cheap normal-matrix assembly and matvecs.
/// Constraint rows here are a few nonzeros each (pair rows, incidence rows,
/// one dense data row plus a unit entry), so iterating stored entries beats
/// dense BLAS by orders of magnitude on large systems.
struct RowSparseG {
    std::vector<int> rowptr;
    std::vector<int> colidx;
    std::vector<double> vals;
    Eigen::Index rows = 0, cols = 0;

    explicit RowSparseG(const Matrix& G) : rows(G.rows()), cols(G.cols()) {
        rowptr.reserve(static_cast<std::size_t>(rows) + 1);
        rowptr.push_back(0);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j)
                if (G(i, j) != 0.0) {
                    colidx.push_back(static_cast<int>(j));
                    vals.push_back(G(i, j));
                }
            rowptr.push_back(static_cast<int>(colidx.size()));
        }
    }

    Vector multiply(const Vector& x) const {
        Vector out = Vector::Zero(rows);
        for (Eigen::Index i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (int k = rowptr[static_cast<std::size_t>(i)];
                 k < rowptr[static_cast<std::size_t>(i) + 1]; ++k)
                acc += vals[static_cast<std::size_t>(k)] * x(colidx[static_cast<std::size_t>(k)]);
            out(i) = acc;
        }
        return out;
    }

    Vector multiply_transpose(const Vector& x) const {
        Vector out = Vector::Zero(cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            const double xi = x(i);
            if (xi == 0.0) continue;
            for (int k = rowptr[static_cast<std::size_t>(i)];
                 k < rowptr[static_cast<std::size_t>(i) + 1]; ++k)
                out(colidx[static_cast<std::size_t>(k)]) += vals[static_cast<std::size_t>(k)] * xi;
        }
        return out;
    }

    VectorL multiply(const VectorL& x) const {
        VectorL out = VectorL::Zero(rows);
        for (Eigen::Index i = 0; i < rows; ++i) {
            long double acc = 0.0L;
            for (int k = rowptr[static_cast<std::size_t>(i)];
                 k < rowptr[static_cast<std::size_t>(i) + 1]; ++k)
                acc += static_cast<long double>(vals[static_cast<std::size_t>(k)]) *
                       x(colidx[static_cast<std::size_t>(k)]);
            out(i) = acc;
        }
        return out;
    }

    VectorL multiply_transpose(const VectorL& x) const {
        VectorL out = VectorL::Zero(cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            const long double xi = x(i);
            if (xi == 0.0L) continue;
            for (int k = rowptr[static_cast<std::size_t>(i)];
                 k < rowptr[static_cast<std::size_t>(i) + 1]; ++k)
                out(colidx[static_cast<std::size_t>(k)]) +=
                    static_cast<long double>(vals[static_cast<std::size_t>(k)]) * xi;
        }
        return out;
    }

    /// M += sum_i w_i g_i g_i' accumulated entrywise (upper triangle only).
    void add_weighted_gram(const VectorL& w, MatrixL& M) const {
        for (Eigen::Index i = 0; i < rows; ++i) {
            const long double wi = w(i);
            const int lo = rowptr[static_cast<std::size_t>(i)];
            const int hi = rowptr[static_cast<std::size_t>(i) + 1];
            for (int a = lo; a < hi; ++a) {
                const long double wa = wi * static_cast<long double>(vals[static_cast<std::size_t>(a)]);
                const int ja = colidx[static_cast<std::size_t>(a)];
                for (int b = a; b < hi; ++b) {
                    const int jb = colidx[static_cast<std::size_t>(b)];
                    M(ja, jb) += wa * static_cast<long double>(vals[static_cast<std::size_t>(b)]);
                }
            }
        }
    }
};

struct IpmOutcome {
    Vector z;
    Vector lam;
    int iterations = 0;
};

/**
 * @brief Mehrotra-style predictor-corrector interior point solve of
 *        min (1/2) z'Pz + q'z subject to Gz <= h.
 *
 * Returns nothing when the iteration stalls or exhausts its budget (the
 * caller falls back to operator splitting); a returned point has strictly
 * nonnegative duals and complementarity products driven to roundoff scale,
 * so inactive rows keep their true slack and active rows sit at the boundary
 * well inside the classification tolerance.
 */
inline std::optional<IpmOutcome> ipm_solve(const Canonical& c) {
    const Eigen::Index w = c.w();
    const Eigen::Index m = c.m();
    const RowSparseG G(c.G);

    const double q_scale = 1.0 + c.q.lpNorm<Eigen::Infinity>();
    const double h_scale = 1.0 + c.h.lpNorm<Eigen::Infinity>();
    const double eps_feas = 1e-10 * (q_scale + h_scale);
    const double eps_comp = 1e-11 * (q_scale + h_scale);

    Vector z = Vector::Zero(w);
    for (Eigen::Index j = 0; j < w; ++j)
        if (c.Pdiag(j) > 0.0) z(j) = -c.q(j) / c.Pdiag(j);
    Vector s = (c.h - G.multiply(z)).cwiseMax(1.0);
    Vector lam = Vector::Ones(m);

    MatrixL M(w, w);
    Eigen::LLT<MatrixL> llt;
    const VectorL PdiagL = c.Pdiag.cast<long double>();
    const int max_ipm_iter = 100;
    double best_merit = std::numeric_limits<double>::infinity();
    int stagnant = 0;
    int iters_done = 0;

    // The most centered feasible iterate seen: primal residual at noise level
    // and the smallest complementarity gap. Its active/inactive separation is
    // what the polish fallback keys on, so sharpness beats dual accuracy.
    Vector z_best, lam_best;
    double zb_gap = std::numeric_limits<double>::infinity();
    bool have_z = false;

    VectorL wtsL(m);
    auto normal_apply = [&](const VectorL& x) {
        return VectorL(PdiagL.cwiseProduct(x) +
                       G.multiply_transpose(VectorL(wtsL.cwiseProduct(G.multiply(x)))));
    };

    for (int iter = 1; iter <= max_ipm_iter; ++iter) {
        iters_done = iter;
        Vector r_d = c.Pdiag.cwiseProduct(z) + c.q + G.multiply_transpose(lam);
        Vector r_p = G.multiply(z) + s - c.h;
        const double gap = (s.cwiseProduct(lam)).maxCoeff();
        const double rd_n = r_d.lpNorm<Eigen::Infinity>();
        const double rp_n = r_p.lpNorm<Eigen::Infinity>();
        if (rd_n <= eps_feas && rp_n <= eps_feas && gap <= eps_comp) {
            z_best = z;
            lam_best = lam;
            zb_gap = gap;
            have_z = true;
            break;
        }

        if (rp_n <= 10.0 * eps_feas && gap < zb_gap) {
            z_best = z;
            lam_best = lam;
            zb_gap = gap;
            have_z = true;
        }

        // Stall detection: the merit must keep shrinking or we stop iterating.
        const double merit = std::max(gap, std::max(rd_n, rp_n));
        if (merit < 0.9 * best_merit) {
            best_merit = merit;
            stagnant = 0;
        } else if (++stagnant >= 10) {
            break;
        }

        // Normal matrix P + G' diag(lam/s) G, assembled and factored in
        // extended precision with refinement: the weight spread near
        // convergence makes the system too ill conditioned for a double
        // factorization, and the dual step amplifies any solve error by the
        // weights themselves.
        wtsL = (lam.cwiseQuotient(s)).cwiseMin(1e16).cast<long double>();
        M.setZero();
        M.diagonal() = PdiagL;
        G.add_weighted_gram(wtsL, M);
        llt.compute(M.selfadjointView<Eigen::Upper>());
        if (llt.info() != Eigen::Success) {
            M.diagonal().array() += 1e-12L * (1.0L + M.diagonal().maxCoeff());
            llt.compute(M.selfadjointView<Eigen::Upper>());
            if (llt.info() != Eigen::Success) break;
        }

        const double mu = s.dot(lam) / static_cast<double>(m);
        const VectorL sL = s.cast<long double>();
        const VectorL lamL = lam.cast<long double>();
        const VectorL rdL = r_d.cast<long double>();
        const VectorL rpL = r_p.cast<long double>();
        auto refined_solve = [&](const VectorL& rhs) {
            VectorL x = llt.solve(rhs);
            for (int pass = 0; pass < 2; ++pass) {
                VectorL res = rhs - normal_apply(x);
                if (res.lpNorm<Eigen::Infinity>() <=
                    1e-17L * (1.0L + rhs.lpNorm<Eigen::Infinity>()))
                    break;
                x += llt.solve(res);
            }
            return x;
        };
        auto solve_direction = [&](const Vector& t, Vector& dz, Vector& ds, Vector& dl) {
            VectorL inner =
                (t.cast<long double>() - sL.cwiseProduct(lamL) + lamL.cwiseProduct(rpL))
                    .cwiseQuotient(sL);
            VectorL dzL = refined_solve(-rdL - G.multiply_transpose(inner));
            VectorL dsL = -rpL - G.multiply(dzL);
            // lam*ds + s*dl = t - s*lam, so dl = inner + (lam/s)*(G dz).
            VectorL dlL = inner + wtsL.cwiseProduct(-rpL - dsL);
            dz = dzL.cast<double>();
            ds = dsL.cast<double>();
            dl = dlL.cast<double>();
        };
        auto max_step = [](const Vector& v, const Vector& dv) {
            double a = 1.0;
            for (Eigen::Index i = 0; i < v.size(); ++i)
                if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
            return a;
        };

        Vector dz_a, ds_a, dl_a;
        solve_direction(Vector::Zero(m), dz_a, ds_a, dl_a);
        const double ap_a = max_step(s, ds_a);
        const double ad_a = max_step(lam, dl_a);
        const double mu_aff = (s + ap_a * ds_a).dot(lam + ad_a * dl_a) / static_cast<double>(m);
        double sigma = mu > 0 ? std::pow(mu_aff / mu, 3) : 0.0;
        sigma = std::clamp(sigma, 0.0, 1.0);

        Vector t = Vector::Constant(m, sigma * mu) - ds_a.cwiseProduct(dl_a);
        Vector dz, ds, dl;
        solve_direction(t, dz, ds, dl);

        const double eta = std::max(0.99, 1.0 - 10.0 * mu);
        const double ap = std::min(1.0, eta * max_step(s, ds));
        const double ad = std::min(1.0, eta * max_step(lam, dl));
        if (ap < 1e-12 && ad < 1e-12) break;
        z += ap * dz;
        // Fraction-to-boundary keeps s and lam positive in exact arithmetic;
        // the floor keeps rounding from producing a zero weight.
        s = (s + ap * ds).cwiseMax(1e-30);
        lam = (lam + ad * dl).cwiseMax(1e-30);
    }

    // Degenerate duals can leave the dual residual orbiting above tolerance
    // while the primal point is exact. Certify from the sharpest barrier
    // iterate instead: rebuild the multipliers by nonnegative least squares
    // over the tight rows, then re-solve the primal exactly on the support
    // that comes back. One more pass of each against the improved point
    // settles both sides.
    if (have_z) {
        Vector zc = z_best;
        Vector lamc = lam_best;
        KktResiduals kc = eval_kkt(c, zc, lamc);
        EqpSolver eqp(c);
        const double tau_face = 1e-6 * (1.0 + c.h.lpNorm<Eigen::Infinity>());
        for (int round = 0; round < 6; ++round) {
            // Round zero always runs: small KKT residuals at a barrier point
            // do not make the primal vertex-exact when strict complementarity
            // fails (both sides sit at sqrt(gap)).
            if (round > 0 && kc.worst() <= eps_comp) break;

            // Candidate tight rows at the current point: small slack, or a
            // multiplier that is not vanishing relative to the slack. The
            // second test catches rows where strict complementarity fails
            // (slack and multiplier both at the square root of the gap);
            // spurious candidates are harmless because the least squares step
            // zeroes them. Recomputing the set every round lets rows that
            // became tight after a re-solve enter the exchange.
            Vector slack = c.h - c.G * zc;
            std::vector<int> T;
            for (Eigen::Index i = 0; i < m; ++i)
                if (slack(i) <= tau_face || lamc(i) >= 0.01 * slack(i))
                    T.push_back(static_cast<int>(i));
            if (T.empty()) break;
            Matrix Gt(w, static_cast<Eigen::Index>(T.size()));
            for (std::size_t i = 0; i < T.size(); ++i)
                Gt.col(static_cast<Eigen::Index>(i)) = c.G.row(T[i]).transpose();

            bool improved = false;
            Vector target = -(c.Pdiag.cwiseProduct(zc) + c.q);
            NnlsResult sol = nnls(Gt, target);
            if (!sol.converged) break;
            Vector lam2 = Vector::Zero(m);
            std::vector<int> S;
            for (std::size_t i = 0; i < T.size(); ++i) {
                const double xi = sol.x(static_cast<Eigen::Index>(i));
                if (xi > 0.0) {
                    lam2(T[i]) = xi;
                    S.push_back(T[i]);
                }
            }
            KktResiduals k2 = eval_kkt(c, zc, lam2);
            if (k2.worst() < kc.worst()) {
                lamc = lam2;
                kc = k2;
                improved = true;
            }

            // Exact re-solve on the face the multipliers picked out (the
            // unconstrained minimum when the support is empty). The support
            // is linearly independent by construction, so the equality
            // system is well posed.
            Vector z2, nu2;
            if (!eqp.solve(S, z2, nu2)) break;
            Vector lam3 = Vector::Zero(m);
            for (std::size_t i = 0; i < S.size(); ++i)
                lam3(S[i]) = std::max(0.0, nu2(static_cast<Eigen::Index>(i)));
            KktResiduals k3 = eval_kkt(c, z2, lam3);
            if (k3.worst() < kc.worst()) {
                zc = z2;
                lamc = lam3;
                kc = k3;
                improved = true;
            }
            // The tight set and the target depend only on (zc, lamc), so a
            // round with no improvement would repeat itself exactly.
            if (!improved) break;
        }
        return IpmOutcome{zc, lamc, iters_done};
    }
    return std::nullopt;
}

/// Full solve in canonical form. Warm-start vectors may be null.
inline FitResult solve_canonical(const Canonical& c, const SolverConfig& cfg, const Vector* z0,
                                 const Vector* u0) {
    cfg.validate();
    const Eigen::Index w = c.w();
    const Eigen::Index m = c.m();
    FitResult out;

    auto natural_start = [&]() {
        Vector z = Vector::Zero(w);
        for (Eigen::Index j = 0; j < w; ++j)
            if (c.Pdiag(j) > 0.0) z(j) = -c.q(j) / c.Pdiag(j);
        return z;
    };

    auto finalize = [&](const Vector& z, const Vector& lam, SolveStatus status) {
        out.theta_hat = z.tail(c.n);
        if (c.p > 0) out.xi_hat = z.head(c.p);
        out.duals = lam;
        out.objective = c.objective_at(z);
        out.kkt = eval_kkt(c, z, lam);
        out.status = status;
        if (m > 0) {
            out.active = classify_rows(c.G * z - c.h, default_active_tol(z));
        } else {
            out.active.tolerance_used = default_active_tol(z);
        }
    };

    if (m == 0) {
        // Whole space: the unconstrained minimum (zero on flat xi directions).
        finalize(natural_start(), Vector(0), SolveStatus::optimal);
        return out;
    }

    // Interior point first: fast and immune to active-set degeneracy. Falls
    // through to the splitting pipeline when it cannot certify (in particular
    // for infeasible systems, which the splitting loop detects).
    if (cfg.method == SolveMethod::interior_point) {
        if (auto ip = ipm_solve(c)) {
            KktResiduals k = eval_kkt(c, ip->z, ip->lam);
            if (k.within(cfg)) {
                finalize(ip->z, ip->lam, SolveStatus::optimal);
                out.iterations = ip->iterations;
                return out;
            }
            // The interior point run converged but its face certificate fell
            // short of tolerance. The point is still excellent, so one
            // active-set clean-up from it is far cheaper than restarting the
            // splitting pipeline cold.
            if (auto pol = polish(c, ip->z, ip->lam)) {
                if (pol->clean && pol->kkt.within(cfg)) {
                    finalize(pol->z, pol->lam, SolveStatus::optimal);
                    out.iterations = ip->iterations;
                    return out;
                }
            }
        }
    }

    // Pure active-set method: polish loop from a cold start at the natural
    // point. Falls through to operator splitting if the loop fails to clean up.
    if (cfg.method == SolveMethod::active_set) {
        Vector z = z0 ? *z0 : natural_start();
        Vector u = u0 ? *u0 : Vector::Zero(m);
        auto pol = polish(c, z, u);
        if (pol && pol->clean && pol->kkt.within(cfg)) {
            finalize(pol->z, pol->lam, SolveStatus::optimal);
            return out;
        }
    }

    // --- ADMM over z with slack split s = Gz, s <= h -----------------------
    const double sigma = 1e-6;
    const double alpha = 1.6;
    double rho = 0.1;

    Matrix GtG = c.G.transpose() * c.G;
    Matrix K = GtG * rho;
    K.diagonal() += c.Pdiag;
    K.diagonal().array() += sigma;
    Eigen::LLT<Matrix> kfac(K);
    auto refactor = [&]() {
        K = GtG * rho;
        K.diagonal() += c.Pdiag;
        K.diagonal().array() += sigma;
        kfac.compute(K);
    };

    Vector z = z0 ? *z0 : natural_start();
    Vector u = u0 ? *u0 : Vector::Zero(m);
    Vector s = (c.G * z).cwiseMin(c.h);
    Vector u_snap = u;

    double tol_p = std::max(cfg.primal_tol, 1e-7);
    double tol_d = std::max(cfg.dual_tol, 1e-7);
    const double q_scale = c.q.lpNorm<Eigen::Infinity>();

    std::optional<PolishOutcome> best_pol;
    KktResiduals admm_kkt;
    int iter = 0;
    bool infeasible = false;
    bool polished_out = false;

    // Polish long before the residuals fully converge: the active set usually
    // stabilizes within a few hundred iterations, and a successful clean
    // polish ends the solve outright. Gated on loose residual agreement so a
    // still-chaotic iterate (huge noisy candidate set) is never polished.
    const int polish_every = 300;
    bool in_basin = false;

    for (int attempt = 0; attempt < 3 && !infeasible && !polished_out; ++attempt) {
        const int slice_end = (attempt == 2) ? cfg.max_iterations
                                             : std::min(cfg.max_iterations,
                                                        iter + cfg.max_iterations / 3 + 1);
        bool settled = false;
        while (iter < slice_end && !settled && !infeasible) {
            ++iter;
            Vector rhs = sigma * z - c.q + c.G.transpose() * (rho * s - u);
            z = kfac.solve(rhs);
            Vector v = c.G * z;
            Vector v_rel = alpha * v + (1.0 - alpha) * s;
            s = (v_rel + u / rho).cwiseMin(c.h);
            u += rho * (v_rel - s);

            if (iter % 10 == 0 || iter == slice_end) {
                const double r_p = (v - s).lpNorm<Eigen::Infinity>();
                Vector dual_vec = c.Pdiag.cwiseProduct(z) + c.q + c.G.transpose() * u;
                const double r_d = dual_vec.lpNorm<Eigen::Infinity>();
                const double s_p = std::max(v.lpNorm<Eigen::Infinity>(), s.lpNorm<Eigen::Infinity>());
                const double s_d = std::max(q_scale, (c.G.transpose() * u).lpNorm<Eigen::Infinity>());
                if (r_p <= tol_p * (1.0 + s_p) && r_d <= tol_d * (1.0 + s_d)) settled = true;
                in_basin = r_p <= 1e-3 * (1.0 + s_p) && r_d <= 1e-3 * (1.0 + s_d);

                if (iter % 50 == 0 && !settled) {
                    // Primal infeasibility certificate from the dual increment.
                    Vector du = u - u_snap;
                    const double dun = du.lpNorm<Eigen::Infinity>();
                    if (dun > 1e-12) {
                        const double cert = 1e-8 * dun;
                        if ((c.G.transpose() * du).lpNorm<Eigen::Infinity>() <= cert &&
                            c.h.dot(du) <= -cert)
                            infeasible = true;
                    }
                    u_snap = u;

                    // Residual-balancing step-size adaptation.
                    const double num = r_p / (1.0 + s_p);
                    const double den = r_d / (1.0 + s_d);
                    if (den > 0 && num > 0) {
                        const double ratio = std::sqrt(num / den);
                        if (ratio > 5.0 || ratio < 0.2) {
                            rho = std::clamp(rho * ratio, 1e-6, 1e6);
                            refactor();
                        }
                    }
                }

                if (iter % polish_every == 150 && !settled && in_basin) {
                    auto pol = polish(c, z, u);
                    if (pol && (!best_pol || pol->kkt.worst() < best_pol->kkt.worst()))
                        best_pol = pol;
                    if (best_pol && best_pol->clean && best_pol->kkt.within(cfg)) {
                        polished_out = true;
                        break;
                    }
                }
            }
        }
        if (infeasible || polished_out) break;

        auto pol = polish(c, z, u);
        if (pol && (!best_pol || pol->kkt.worst() < best_pol->kkt.worst())) best_pol = pol;
        if (best_pol && best_pol->clean && best_pol->kkt.within(cfg)) break;

        Vector lam_admm = u.cwiseMax(0.0);
        admm_kkt = eval_kkt(c, z, lam_admm);
        if (admm_kkt.within(cfg)) break;
        if (iter >= cfg.max_iterations) break;
        tol_p = std::max(tol_p * 1e-2, 1e-12);
        tol_d = std::max(tol_d * 1e-2, 1e-12);
    }

    if (infeasible) {
        finalize(z, u.cwiseMax(0.0), SolveStatus::infeasible);
        out.iterations = iter;
        return out;
    }

    Vector lam_admm = u.cwiseMax(0.0);
    admm_kkt = eval_kkt(c, z, lam_admm);
    const bool use_polish = best_pol && best_pol->kkt.worst() <= admm_kkt.worst();
    const Vector& zf = use_polish ? best_pol->z : z;
    const Vector& lf = use_polish ? best_pol->lam : lam_admm;
    const KktResiduals& kf = use_polish ? best_pol->kkt : admm_kkt;
    finalize(zf, lf, kf.within(cfg) ? SolveStatus::optimal : SolveStatus::max_iter);
    out.iterations = iter;
    return out;
}

} // namespace detail

/// Euclidean projection of y onto {theta : A theta <= b}.
inline FitResult project(const ConstraintSystem& sys, const Vector& y, const SolverConfig& cfg = {},
                         const FitResult* warm = nullptr) {
    detail::Canonical c = detail::canonicalize(sys, y);
    if (warm && warm->theta_hat.size() == c.w() && warm->duals.size() == c.m())
        return detail::solve_canonical(c, cfg, &warm->theta_hat, &warm->duals);
    return detail::solve_canonical(c, cfg, nullptr, nullptr);
}

/// Solve the lifted program min (1/2)|theta - y|^2 + perturbation(xi) over
/// {(xi, theta) : A xi + B theta <= c}. theta_hat is unique; xi_hat is one
/// optimal auxiliary vector (ties are not canonicalized).
inline FitResult solve_lifted(const LiftedSystem& sys, const Vector& y, const SolverConfig& cfg = {},
                              const FitResult* warm = nullptr) {
    detail::Canonical c = detail::canonicalize(sys, y);
    if (std::holds_alternative<LinearPerturbation>(sys.perturbation)) {
        BoundednessCertificate cert = check_bounded(sys);
        if (!cert.bounded) {
            FitResult out;
            out.theta_hat = y;
            out.xi_hat = Vector::Zero(sys.p());
            out.duals = Vector::Zero(sys.m());
            out.objective = -std::numeric_limits<double>::infinity();
            out.status = SolveStatus::unbounded;
            return out;
        }
    }
    Vector z0, u0;
    const bool have_warm = warm && warm->theta_hat.size() == c.n &&
                           warm->xi_hat && warm->xi_hat->size() == c.p &&
                           warm->duals.size() == c.m();
    if (have_warm) {
        z0.resize(c.w());
        z0 << *warm->xi_hat, warm->theta_hat;
        u0 = warm->duals;
        return detail::solve_canonical(c, cfg, &z0, &u0);
    }
    return detail::solve_canonical(c, cfg, nullptr, nullptr);
}

/// Recompute KKT residuals for a finished fit (independent of solver state).
inline KktResiduals evaluate_kkt(const ConstraintSystem& sys, const Vector& y,
                                 const FitResult& fit) {
    detail::Canonical c = detail::canonicalize(sys, y);
    return detail::eval_kkt(c, fit.theta_hat, fit.duals);
}

inline KktResiduals evaluate_kkt(const LiftedSystem& sys, const Vector& y, const FitResult& fit) {
    detail::Canonical c = detail::canonicalize(sys, y);
    Vector z(c.w());
    if (c.p > 0) {
        if (!fit.xi_hat) throw std::invalid_argument("evaluate_kkt: fit lacks xi_hat");
        z << *fit.xi_hat, fit.theta_hat;
    } else {
        z = fit.theta_hat;
    }
    return detail::eval_kkt(c, z, fit.duals);
}

} // namespace polyproj
