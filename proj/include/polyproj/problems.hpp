/**
 * @file problems.hpp
 * @brief Builders translating each regression problem into a constraint
 *        system, with stable row/column indexing and semantic row labels.
 */
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <polyproj/constraints.hpp>
#include <polyproj/isotonic.hpp>
#include <polyproj/solver.hpp>

namespace polyproj {

// ----------------------------------------------------------------------------
// Data containers
// ----------------------------------------------------------------------------

struct Dataset {
    Matrix X;           // n x d design matrix or design points; d may be 0
    Vector y;           // n
    double sigma = 0.0; // noise s.d.; must be > 0 when risk estimation is used

    Eigen::Index n() const { return y.size(); }
    Eigen::Index d() const { return X.cols(); }

    void validate() const {
        if (y.size() < 1) throw std::invalid_argument("Dataset: n >= 1 required");
        if (X.size() > 0 && X.rows() != y.size())
            throw std::invalid_argument("Dataset: X rows != y length");
    }
};

enum class ProblemKind {
    univariate_isotonic,
    bounded_isotonic_poset,
    univariate_convex,
    multivariate_convex,
    penalized_convex,
    linear_regression,
    ridge,
    lasso,
    generalized_lasso,
};

inline const char* to_string(ProblemKind k) {
    switch (k) {
        case ProblemKind::univariate_isotonic: return "univariate_isotonic";
        case ProblemKind::bounded_isotonic_poset: return "bounded_isotonic_poset";
        case ProblemKind::univariate_convex: return "univariate_convex";
        case ProblemKind::multivariate_convex: return "multivariate_convex";
        case ProblemKind::penalized_convex: return "penalized_convex";
        case ProblemKind::linear_regression: return "linear_regression";
        case ProblemKind::ridge: return "ridge";
        case ProblemKind::lasso: return "lasso";
        case ProblemKind::generalized_lasso: return "generalized_lasso";
    }
    return "unknown";
}

inline ProblemKind problem_kind_from_string(const std::string& s) {
    for (ProblemKind k :
         {ProblemKind::univariate_isotonic, ProblemKind::bounded_isotonic_poset,
          ProblemKind::univariate_convex, ProblemKind::multivariate_convex,
          ProblemKind::penalized_convex, ProblemKind::linear_regression, ProblemKind::ridge,
          ProblemKind::lasso, ProblemKind::generalized_lasso})
        if (s == to_string(k)) return k;
    throw std::invalid_argument("unknown problem kind: " + s);
}

// ----------------------------------------------------------------------------
// Row labels: `name(i[,j[,k]])`, round-trippable through serialization
// ----------------------------------------------------------------------------

inline std::string make_row_label(const char* name, const std::vector<int>& args) {
    std::string out(name);
    out += '(';
    bool first = true;
    for (int a : args) {
        if (!first) out += ',';
        first = false;
        char buf[16];
        std::snprintf(buf, sizeof buf, "%d", a);
        out += buf;
    }
    out += ')';
    return out;
}

struct ParsedRowLabel {
    std::string name;
    std::vector<int> args;
};

inline ParsedRowLabel parse_row_label(const std::string& text) {
    const auto open = text.find('(');
    const auto close = text.rfind(')');
    if (open == std::string::npos || close == std::string::npos || close < open)
        throw std::invalid_argument("parse_row_label: malformed label: " + text);
    ParsedRowLabel out;
    out.name = text.substr(0, open);
    std::size_t pos = open + 1;
    while (pos < close) {
        std::size_t next = text.find(',', pos);
        if (next == std::string::npos || next > close) next = close;
        out.args.push_back(std::stoi(text.substr(pos, next - pos)));
        pos = next + 1;
    }
    return out;
}

// ----------------------------------------------------------------------------
// Builders
// ----------------------------------------------------------------------------

/**
 * @brief Univariate convexity cone: n-2 rows, row i touching columns
 *        i, i+1, i+2 with weights (x_{i+1}-x_{i+2}, x_{i+2}-x_i, x_i-x_{i+1}),
 *        right-hand side zero.
 */
inline ConstraintSystem build_univariate_convex(const Vector& x) {
    const Eigen::Index n = x.size();
    if (n < 3) throw std::invalid_argument("build_univariate_convex: n >= 3 required");
    for (Eigen::Index i = 0; i + 1 < n; ++i)
        if (!(x(i) < x(i + 1)))
            throw std::invalid_argument("build_univariate_convex: x must be strictly increasing");
    ConstraintSystem sys;
    sys.A = Matrix::Zero(n - 2, n);
    sys.b = Vector::Zero(n - 2);
    for (Eigen::Index i = 0; i + 2 < n; ++i) {
        sys.A(i, i) = x(i + 1) - x(i + 2);
        sys.A(i, i + 1) = x(i + 2) - x(i);
        sys.A(i, i + 2) = x(i) - x(i + 1);
    }
    return sys;
}

inline std::vector<std::string> univariate_convex_labels(int n) {
    std::vector<std::string> out;
    for (int i = 0; i + 2 < n; ++i) out.push_back(make_row_label("convexity", {i, i + 1, i + 2}));
    return out;
}

/**
 * @brief Multivariate convexity constraints <xi_j, x_k - x_j> <= theta_k -
 *        theta_j over ordered pairs, rows lexicographic in (j, k), j != k.
 *        xi stacks the n subgradients (p = n*d).
 */
inline LiftedSystem build_multivariate_convex(const Matrix& points) {
    const Eigen::Index n = points.rows();
    const Eigen::Index d = points.cols();
    if (n < 2) throw std::invalid_argument("build_multivariate_convex: n >= 2 required");
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = a + 1; b < n; ++b)
            if ((points.row(a) - points.row(b)).lpNorm<Eigen::Infinity>() == 0.0)
                throw std::invalid_argument("build_multivariate_convex: duplicate points");
    LiftedSystem sys;
    const Eigen::Index m = n * (n - 1);
    sys.A = Matrix::Zero(m, n * d);
    sys.B = Matrix::Zero(m, n);
    sys.c = Vector::Zero(m);
    Eigen::Index row = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index k = 0; k < n; ++k) {
            if (j == k) continue;
            sys.A.block(row, j * d, 1, d) = points.row(k) - points.row(j);
            sys.B(row, j) = 1.0;
            sys.B(row, k) = -1.0;
            ++row;
        }
    }
    return sys;
}

inline std::vector<std::string> multivariate_convex_labels(int n) {
    std::vector<std::string> out;
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
            if (j != k) out.push_back(make_row_label("pair", {j, k}));
    return out;
}

inline LiftedSystem build_penalized_convex(const Matrix& points, double lambda) {
    if (lambda <= 0) throw std::invalid_argument("build_penalized_convex: lambda > 0 required");
    LiftedSystem sys = build_multivariate_convex(points);
    sys.perturbation = QuadraticPerturbation{lambda};
    return sys;
}

/// Regression lift: 2n rows encoding X xi = theta via paired inequalities
/// (X; -X) xi + (-I; I) theta <= 0.
inline LiftedSystem build_linear_regression(const Matrix& X) {
    const Eigen::Index n = X.rows();
    if (n < 1) throw std::invalid_argument("build_linear_regression: n >= 1 required");
    LiftedSystem sys;
    sys.A.resize(2 * n, X.cols());
    sys.A << X, -X;
    sys.B.resize(2 * n, n);
    sys.B << -Matrix::Identity(n, n), Matrix::Identity(n, n);
    sys.c = Vector::Zero(2 * n);
    return sys;
}

inline std::vector<std::string> linear_regression_labels(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(make_row_label("eq_upper", {i}));
    for (int i = 0; i < n; ++i) out.push_back(make_row_label("eq_lower", {i}));
    return out;
}

inline LiftedSystem build_ridge(const Matrix& X, double lambda) {
    if (lambda <= 0) throw std::invalid_argument("build_ridge: lambda > 0 required");
    LiftedSystem sys = build_linear_regression(X);
    sys.perturbation = QuadraticPerturbation{lambda};
    return sys;
}

/**
 * @brief Generalized-lasso lift with xi = (beta, gamma), gamma of length l:
 *        rows +-(X beta - theta) <= 0 then +-D beta - gamma <= 0; objective
 *        gains tau * sum(gamma).
 */
inline LiftedSystem build_generalized_lasso(const Matrix& X, const Matrix& D, double tau) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    const Eigen::Index l = D.rows();
    if (D.cols() != d)
        throw std::invalid_argument("build_generalized_lasso: D columns != design columns");
    if (tau < 0) throw std::invalid_argument("build_generalized_lasso: tau >= 0 required");
    LiftedSystem sys;
    const Eigen::Index p = d + l;
    sys.A = Matrix::Zero(2 * n + 2 * l, p);
    sys.B = Matrix::Zero(2 * n + 2 * l, n);
    sys.c = Vector::Zero(2 * n + 2 * l);
    sys.A.block(0, 0, n, d) = X;
    sys.A.block(n, 0, n, d) = -X;
    sys.B.block(0, 0, n, n) = -Matrix::Identity(n, n);
    sys.B.block(n, 0, n, n) = Matrix::Identity(n, n);
    sys.A.block(2 * n, 0, l, d) = D;
    sys.A.block(2 * n + l, 0, l, d) = -D;
    sys.A.block(2 * n, d, l, l) = -Matrix::Identity(l, l);
    sys.A.block(2 * n + l, d, l, l) = -Matrix::Identity(l, l);
    Vector lin = Vector::Zero(p);
    lin.tail(l).setConstant(tau);
    sys.perturbation = LinearPerturbation{lin};
    return sys;
}

inline std::vector<std::string> generalized_lasso_labels(int n, int l) {
    std::vector<std::string> out = linear_regression_labels(n);
    for (int i = 0; i < l; ++i) out.push_back(make_row_label("abs_upper", {i}));
    for (int i = 0; i < l; ++i) out.push_back(make_row_label("abs_lower", {i}));
    return out;
}

inline std::vector<std::string> isotonic_labels(const BoundedIsotonicSystem& sys) {
    std::vector<std::string> out;
    for (const auto& [i, j] : sys.order.edges) out.push_back(make_row_label("order", {i, j}));
    for (const auto& [i, j] : sys.bound_edges()) out.push_back(make_row_label("bound", {i, j}));
    return out;
}

// ----------------------------------------------------------------------------
// Problem specification and uniform dispatch
// ----------------------------------------------------------------------------

struct ProblemSpec {
    ProblemKind kind = ProblemKind::linear_regression;
    Dataset data;
    double lambda = std::numeric_limits<double>::quiet_NaN(); // ridge/penalized/bound
    double tau = std::numeric_limits<double>::quiet_NaN();    // lasso family
    Matrix D;                                                 // generalized lasso penalty
    PartialOrder order;                                       // poset kinds
    bool has_order = false;
};

/// A constructed problem: the system, its row labels, and the parameters the
/// divergence formulas need. `with_parameter` rebuilds cheaply along a grid.
struct BuiltProblem {
    ProblemKind kind = ProblemKind::linear_regression;
    std::variant<ConstraintSystem, LiftedSystem, BoundedIsotonicSystem> system;
    std::vector<std::string> row_labels;
    Matrix X; // design or points
    Matrix D; // generalized lasso only
    double parameter = std::numeric_limits<double>::quiet_NaN();

    bool tunable() const {
        switch (kind) {
            case ProblemKind::bounded_isotonic_poset:
            case ProblemKind::penalized_convex:
            case ProblemKind::ridge:
            case ProblemKind::lasso:
            case ProblemKind::generalized_lasso: return true;
            default: return false;
        }
    }

    BuiltProblem with_parameter(double v) const {
        if (!tunable()) throw std::invalid_argument("with_parameter: kind has no tuning knob");
        BuiltProblem out = *this;
        out.parameter = v;
        switch (kind) {
            case ProblemKind::bounded_isotonic_poset: {
                auto iso = std::get<BoundedIsotonicSystem>(system);
                iso.lambda = v;
                out.row_labels = isotonic_labels(iso);
                out.system = std::move(iso);
                break;
            }
            case ProblemKind::penalized_convex:
            case ProblemKind::ridge: {
                auto lift = std::get<LiftedSystem>(system);
                if (v > 0)
                    lift.perturbation = QuadraticPerturbation{v};
                else
                    lift.perturbation = NoPerturbation{}; // un-penalized reference
                out.system = std::move(lift);
                break;
            }
            case ProblemKind::lasso:
            case ProblemKind::generalized_lasso: {
                auto lift = std::get<LiftedSystem>(system);
                auto lin = std::get<LinearPerturbation>(lift.perturbation);
                const Eigen::Index l = D.rows();
                lin.d.tail(l).setConstant(v);
                lift.perturbation = std::move(lin);
                out.system = std::move(lift);
                break;
            }
            default: break;
        }
        return out;
    }

    FitResult fit(const Vector& y, const SolverConfig& cfg = {},
                  const FitResult* warm = nullptr) const {
        if (const auto* plain = std::get_if<ConstraintSystem>(&system))
            return project(*plain, y, cfg, warm);
        if (const auto* lift = std::get_if<LiftedSystem>(&system))
            return solve_lifted(*lift, y, cfg, warm);
        return fit_bounded(std::get<BoundedIsotonicSystem>(system), y, cfg);
    }
};

inline BuiltProblem build_problem(const ProblemSpec& spec) {
    spec.data.validate();
    const Eigen::Index n = spec.data.n();
    BuiltProblem out;
    out.kind = spec.kind;
    out.X = spec.data.X;
    switch (spec.kind) {
        case ProblemKind::univariate_isotonic: {
            BoundedIsotonicSystem iso{PartialOrder::chain(static_cast<int>(n)),
                                      std::numeric_limits<double>::infinity()};
            out.row_labels = isotonic_labels(iso);
            out.system = std::move(iso);
            break;
        }
        case ProblemKind::bounded_isotonic_poset: {
            PartialOrder order = spec.has_order ? spec.order : PartialOrder::dominance(spec.data.X);
            order.validate();
            if (order.n != static_cast<int>(n))
                throw std::invalid_argument("build_problem: order size != n");
            const double lam = std::isnan(spec.lambda)
                                   ? std::numeric_limits<double>::infinity()
                                   : spec.lambda;
            BoundedIsotonicSystem iso{std::move(order), lam};
            out.parameter = lam;
            out.row_labels = isotonic_labels(iso);
            out.system = std::move(iso);
            break;
        }
        case ProblemKind::univariate_convex: {
            if (spec.data.d() != 1)
                throw std::invalid_argument("build_problem: univariate convex needs d = 1");
            out.system = build_univariate_convex(spec.data.X.col(0));
            out.row_labels = univariate_convex_labels(static_cast<int>(n));
            break;
        }
        case ProblemKind::multivariate_convex: {
            out.system = build_multivariate_convex(spec.data.X);
            out.row_labels = multivariate_convex_labels(static_cast<int>(n));
            break;
        }
        case ProblemKind::penalized_convex: {
            out.system = build_penalized_convex(spec.data.X, spec.lambda);
            out.parameter = spec.lambda;
            out.row_labels = multivariate_convex_labels(static_cast<int>(n));
            break;
        }
        case ProblemKind::linear_regression: {
            out.system = build_linear_regression(spec.data.X);
            out.row_labels = linear_regression_labels(static_cast<int>(n));
            break;
        }
        case ProblemKind::ridge: {
            out.system = build_ridge(spec.data.X, spec.lambda);
            out.parameter = spec.lambda;
            out.row_labels = linear_regression_labels(static_cast<int>(n));
            break;
        }
        case ProblemKind::lasso: {
            if (std::isnan(spec.tau))
                throw std::invalid_argument("build_problem: lasso needs tau");
            out.D = Matrix::Identity(spec.data.d(), spec.data.d());
            out.system = build_generalized_lasso(spec.data.X, out.D, spec.tau);
            out.parameter = spec.tau;
            out.row_labels =
                generalized_lasso_labels(static_cast<int>(n), static_cast<int>(spec.data.d()));
            break;
        }
        case ProblemKind::generalized_lasso: {
            if (std::isnan(spec.tau))
                throw std::invalid_argument("build_problem: generalized lasso needs tau");
            out.D = spec.D;
            out.system = build_generalized_lasso(spec.data.X, spec.D, spec.tau);
            out.parameter = spec.tau;
            out.row_labels =
                generalized_lasso_labels(static_cast<int>(n), static_cast<int>(spec.D.rows()));
            break;
        }
    }
    return out;
}

} // namespace polyproj
