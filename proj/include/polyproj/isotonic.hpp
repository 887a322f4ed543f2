/**
 * @file isotonic.hpp
 * @brief Isotonic regression on partial orders with an optional range bound:
 *        exact thresholding path, group structure, and component-count
 *        divergence on the active constraint graph.
 */
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include <polyproj/constraints.hpp>
#include <polyproj/nnls.hpp>
#include <polyproj/solver.hpp>

namespace polyproj {

// ----------------------------------------------------------------------------
// Partial orders
// ----------------------------------------------------------------------------

/// Directed acyclic graph on {0..n-1}; an edge (i, j) means theta_i <= theta_j.
struct PartialOrder {
    int n = 0;
    std::vector<std::pair<int, int>> edges;

    void validate() const {
        if (n < 1) throw std::invalid_argument("PartialOrder: n >= 1 required");
        std::set<std::pair<int, int>> seen;
        std::vector<int> indeg(static_cast<std::size_t>(n), 0);
        std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
        for (const auto& [i, j] : edges) {
            if (i < 0 || i >= n || j < 0 || j >= n)
                throw std::invalid_argument("PartialOrder: edge index out of range");
            if (i == j) throw std::invalid_argument("PartialOrder: self loop");
            if (!seen.insert({i, j}).second)
                throw std::invalid_argument("PartialOrder: duplicate edge");
            adj[static_cast<std::size_t>(i)].push_back(j);
            ++indeg[static_cast<std::size_t>(j)];
        }
        // Kahn peeling; leftovers mean a cycle.
        std::vector<int> stack;
        for (int v = 0; v < n; ++v)
            if (indeg[static_cast<std::size_t>(v)] == 0) stack.push_back(v);
        int peeled = 0;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            ++peeled;
            for (int w : adj[static_cast<std::size_t>(v)])
                if (--indeg[static_cast<std::size_t>(w)] == 0) stack.push_back(w);
        }
        if (peeled != n) throw std::invalid_argument("PartialOrder: cycle detected");
    }

    /// Nodes with no successors.
    std::vector<int> max_nodes() const {
        std::vector<bool> has_succ(static_cast<std::size_t>(n), false);
        for (const auto& e : edges) has_succ[static_cast<std::size_t>(e.first)] = true;
        std::vector<int> out;
        for (int v = 0; v < n; ++v)
            if (!has_succ[static_cast<std::size_t>(v)]) out.push_back(v);
        return out;
    }

    /// Nodes with no predecessors.
    std::vector<int> min_nodes() const {
        std::vector<bool> has_pred(static_cast<std::size_t>(n), false);
        for (const auto& e : edges) has_pred[static_cast<std::size_t>(e.second)] = true;
        std::vector<int> out;
        for (int v = 0; v < n; ++v)
            if (!has_pred[static_cast<std::size_t>(v)]) out.push_back(v);
        return out;
    }

    static PartialOrder chain(int n) {
        PartialOrder po;
        po.n = n;
        for (int i = 0; i + 1 < n; ++i) po.edges.emplace_back(i, i + 1);
        return po;
    }

    /// Grid order on a d-dimensional lattice (row-major node indexing);
    /// covering edges step +1 along one axis.
    static PartialOrder lattice(const std::vector<int>& dims) {
        if (dims.empty()) throw std::invalid_argument("lattice: at least one dimension");
        int total = 1;
        for (int d : dims) {
            if (d < 1) throw std::invalid_argument("lattice: dimensions >= 1");
            total *= d;
        }
        PartialOrder po;
        po.n = total;
        std::vector<int> stride(dims.size());
        int s = 1;
        for (std::size_t k = dims.size(); k-- > 0;) {
            stride[k] = s;
            s *= dims[k];
        }
        for (int node = 0; node < total; ++node) {
            int rem = node;
            for (std::size_t k = 0; k < dims.size(); ++k) {
                const int coord = rem / stride[k];
                rem %= stride[k];
                if (coord + 1 < dims[k]) po.edges.emplace_back(node, node + stride[k]);
            }
        }
        return po;
    }

    /**
     * @brief Componentwise dominance order of design points (n x d), emitted
     *        as its covering pairs.
     *
     * Transitive edges change neither the feasible set nor the component count
     * of any active subgraph (equal fitted endpoints force equality along every
     * connecting path). Exactly coincident rows are ordered by index to keep
     * the graph acyclic.
     */
    static PartialOrder dominance(const Matrix& points) {
        const int n = static_cast<int>(points.rows());
        PartialOrder po;
        po.n = n;
        std::vector<std::vector<char>> dom(static_cast<std::size_t>(n),
                                           std::vector<char>(static_cast<std::size_t>(n), 0));
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                const bool le = (points.row(i).array() <= points.row(j).array()).all();
                if (!le) continue;
                const bool eq = (points.row(i).array() == points.row(j).array()).all();
                if (eq && i > j) continue;
                dom[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1;
            }
        }
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (!dom[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) continue;
                bool covering = true;
                for (int k = 0; k < n && covering; ++k) {
                    if (k == i || k == j) continue;
                    if (dom[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] &&
                        dom[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)])
                        covering = false;
                }
                if (covering) po.edges.emplace_back(i, j);
            }
        }
        return po;
    }
};

// ----------------------------------------------------------------------------
// Bounded system
// ----------------------------------------------------------------------------

/// Order constraints plus the range bound: theta_i <= theta_j + lambda for
/// every pair (i in max(V), j in min(V)). lambda = +inf drops the bound rows.
struct BoundedIsotonicSystem {
    PartialOrder order;
    double lambda = std::numeric_limits<double>::infinity();

    void validate() const {
        order.validate();
        if (std::isnan(lambda) || lambda < 0)
            throw std::invalid_argument("BoundedIsotonicSystem: lambda >= 0 required");
    }

    bool bound_effective_rows() const { return std::isfinite(lambda); }

    /// All max x min pairs, (i, j) lexicographic, self-pairs skipped.
    std::vector<std::pair<int, int>> bound_edges() const {
        std::vector<std::pair<int, int>> out;
        if (!std::isfinite(lambda)) return out;
        for (int i : order.max_nodes())
            for (int j : order.min_nodes())
                if (i != j) out.emplace_back(i, j);
        return out;
    }

    /// Augmented edge list in constraint-row order: order edges, then bounds.
    std::vector<std::pair<int, int>> augmented_edges() const {
        std::vector<std::pair<int, int>> out = order.edges;
        const auto bounds = bound_edges();
        out.insert(out.end(), bounds.begin(), bounds.end());
        return out;
    }

    ConstraintSystem to_constraints() const {
        validate();
        const auto bounds = bound_edges();
        const Eigen::Index m =
            static_cast<Eigen::Index>(order.edges.size() + bounds.size());
        ConstraintSystem sys;
        sys.A = Matrix::Zero(m, order.n);
        sys.b = Vector::Zero(m);
        Eigen::Index row = 0;
        for (const auto& [i, j] : order.edges) {
            sys.A(row, i) = 1.0;
            sys.A(row, j) = -1.0;
            ++row;
        }
        for (const auto& [i, j] : bounds) {
            sys.A(row, i) = 1.0;
            sys.A(row, j) = -1.0;
            sys.b(row) = lambda;
            ++row;
        }
        return sys;
    }
};

// ----------------------------------------------------------------------------
// Group structure
// ----------------------------------------------------------------------------

/// Partition of the indices into groups of equal fitted value, ordered by
/// strictly increasing level.
struct GroupStructure {
    std::vector<std::vector<int>> groups;
    Vector levels;
    std::vector<int> sizes;

    int r() const { return static_cast<int>(groups.size()); }

    void validate() const {
        if (groups.size() != sizes.size() ||
            static_cast<Eigen::Index>(groups.size()) != levels.size())
            throw std::invalid_argument("GroupStructure: field sizes disagree");
        std::vector<int> seen;
        for (std::size_t s = 0; s < groups.size(); ++s) {
            if (groups[s].empty() || static_cast<int>(groups[s].size()) != sizes[s])
                throw std::invalid_argument("GroupStructure: bad group size");
            seen.insert(seen.end(), groups[s].begin(), groups[s].end());
            if (s + 1 < groups.size() && !(levels(static_cast<Eigen::Index>(s)) <
                                           levels(static_cast<Eigen::Index>(s + 1))))
                throw std::invalid_argument("GroupStructure: levels not increasing");
        }
        std::sort(seen.begin(), seen.end());
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (seen[i] != static_cast<int>(i))
                throw std::invalid_argument("GroupStructure: not a partition");
    }
};

/// Default tolerance for merging fitted values into one group; looser than
/// solver tolerance because groups feed the exact thresholding path.
inline double group_tolerance(const Vector& theta_hat) {
    const double mag = theta_hat.size() ? theta_hat.lpNorm<Eigen::Infinity>() : 0.0;
    return 1e-6 * (1.0 + mag);
}

inline GroupStructure extract_groups(const Vector& theta_hat, double tol) {
    const int n = static_cast<int>(theta_hat.size());
    if (n < 1) throw std::invalid_argument("extract_groups: empty fit");
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        return theta_hat(a) < theta_hat(b) || (theta_hat(a) == theta_hat(b) && a < b);
    });
    GroupStructure gs;
    std::vector<double> levels;
    for (int k = 0; k < n; ++k) {
        const int i = idx[static_cast<std::size_t>(k)];
        if (k == 0 || theta_hat(i) - theta_hat(idx[static_cast<std::size_t>(k - 1)]) > tol) {
            gs.groups.emplace_back();
            levels.push_back(0.0);
        }
        gs.groups.back().push_back(i);
    }
    gs.levels.resize(static_cast<Eigen::Index>(gs.groups.size()));
    for (std::size_t s = 0; s < gs.groups.size(); ++s) {
        auto& g = gs.groups[s];
        std::sort(g.begin(), g.end());
        double sum = 0.0;
        for (int i : g) sum += theta_hat(i);
        gs.levels(static_cast<Eigen::Index>(s)) = sum / static_cast<double>(g.size());
        gs.sizes.push_back(static_cast<int>(g.size()));
    }
    gs.validate();
    return gs;
}

inline GroupStructure extract_groups(const Vector& theta_hat) {
    return extract_groups(theta_hat, group_tolerance(theta_hat));
}

// ----------------------------------------------------------------------------
// Fitting
// ----------------------------------------------------------------------------

/// Unbounded isotonic fit: projection onto the order's incidence system.
inline std::pair<FitResult, GroupStructure> fit_isotonic(const PartialOrder& order,
                                                         const Vector& y,
                                                         const SolverConfig& cfg = {}) {
    BoundedIsotonicSystem unbounded{order, std::numeric_limits<double>::infinity()};
    FitResult fit = project(unbounded.to_constraints(), y, cfg);
    GroupStructure gs = extract_groups(fit.theta_hat);
    return {std::move(fit), std::move(gs)};
}

/// H(L, lambda) = sum_s k_s (L - level_s)_+ + sum_s k_s (L + lambda - level_s)_-,
/// piecewise linear and nondecreasing in L.
inline double h_function(const GroupStructure& gs, double L, double lambda) {
    if (lambda < 0) throw std::invalid_argument("h_function: lambda >= 0 required");
    double val = 0.0;
    for (int s = 0; s < gs.r(); ++s) {
        const double lv = gs.levels(s);
        const double k = static_cast<double>(gs.sizes[static_cast<std::size_t>(s)]);
        val += k * std::max(L - lv, 0.0);
        val += k * std::min(L + lambda - lv, 0.0);
    }
    return val;
}

/**
 * @brief Unique root of H(., lambda), by exact breakpoint arithmetic: sort the
 *        kinks {level_s, level_s - lambda}, locate the sign change, and solve
 *        that linear piece.
 *
 * Valid for 0 <= lambda <= level_r - level_1 (with r > 1), plus the degenerate
 * single-group case where the root is the level itself.
 */
inline double root_L(const GroupStructure& gs, double lambda) {
    const int r = gs.r();
    if (lambda < 0) throw std::invalid_argument("root_L: lambda >= 0 required");
    if (r == 1) return gs.levels(0);
    const double range = gs.levels(r - 1) - gs.levels(0);
    if (lambda > range * (1.0 + 1e-12) + 1e-300)
        throw std::invalid_argument("root_L: lambda beyond the binding regime");

    std::vector<double> brk;
    brk.reserve(static_cast<std::size_t>(2 * r));
    for (int s = 0; s < r; ++s) {
        brk.push_back(gs.levels(s));
        brk.push_back(gs.levels(s) - lambda);
    }
    std::sort(brk.begin(), brk.end());
    brk.erase(std::unique(brk.begin(), brk.end()), brk.end());

    double lo = brk.front();
    double hlo = h_function(gs, lo, lambda); // <= 0 at the smallest kink
    if (hlo >= 0.0) return lo;
    for (std::size_t k = 1; k < brk.size(); ++k) {
        const double hi = brk[k];
        const double hhi = h_function(gs, hi, lambda);
        if (hhi >= 0.0) {
            if (hhi == 0.0) return hi;
            return lo + (hi - lo) * (-hlo) / (hhi - hlo);
        }
        lo = hi;
        hlo = hhi;
    }
    return brk.back(); // unreachable in the valid regime
}

/// Reusable per-y state for sweeping lambda grids: the unbounded fit and its
/// group structure are computed once.
struct IsotonicPath {
    FitResult unbounded;
    GroupStructure gs;

    IsotonicPath(const PartialOrder& order, const Vector& y, const SolverConfig& cfg = {}) {
        auto [fit, groups] = fit_isotonic(order, y, cfg);
        unbounded = std::move(fit);
        gs = std::move(groups);
    }
};

namespace detail {

/// Nonnegative multipliers for a fixed theta_hat: least squares of y - theta
/// against the active rows' normals. Certifies the thresholding fit.
inline Vector duals_from_active(const ConstraintSystem& sys, const Vector& y,
                                const Vector& theta_hat) {
    Vector lam = Vector::Zero(sys.m());
    ActiveSet as = active_set(sys, theta_hat);
    if (as.indices.empty()) return lam;
    Matrix At(sys.n(), static_cast<Eigen::Index>(as.indices.size()));
    for (std::size_t k = 0; k < as.indices.size(); ++k)
        At.col(static_cast<Eigen::Index>(k)) = sys.A.row(as.indices[k]).transpose();
    NnlsResult res = nnls(At, y - theta_hat);
    for (std::size_t k = 0; k < as.indices.size(); ++k)
        lam(as.indices[k]) = res.x(static_cast<Eigen::Index>(k));
    return lam;
}

inline FitResult finish_bounded(const BoundedIsotonicSystem& sys, const Vector& y,
                                const Vector& theta_hat, int iterations) {
    ConstraintSystem cons = sys.to_constraints();
    FitResult out;
    out.theta_hat = theta_hat;
    out.duals = duals_from_active(cons, y, theta_hat);
    out.active = active_set(cons, theta_hat);
    out.objective = 0.5 * (theta_hat - y).squaredNorm();
    out.iterations = iterations;
    out.kkt = detail::eval_kkt(detail::canonicalize(cons, y), theta_hat, out.duals);
    SolverConfig cfg;
    out.status = out.kkt.within(cfg) ? SolveStatus::optimal : SolveStatus::max_iter;
    return out;
}

} // namespace detail

/// Bounded fit from a precomputed unbounded path: group levels are clamped
/// into [L_lambda, L_lambda + lambda]; when the bound cannot bind (lambda at
/// least the fitted range, or a single group) the unbounded fit is returned
/// re-certified against the augmented rows.
inline FitResult fit_bounded(const BoundedIsotonicSystem& sys, const Vector& y,
                             const IsotonicPath& path) {
    sys.validate();
    const GroupStructure& gs = path.gs;
    const int r = gs.r();
    const double range = (r > 1) ? gs.levels(r - 1) - gs.levels(0) : 0.0;

    if (!std::isfinite(sys.lambda) || r == 1 || sys.lambda >= range)
        return detail::finish_bounded(sys, y, path.unbounded.theta_hat,
                                      path.unbounded.iterations);

    const double L = root_L(gs, sys.lambda);
    Vector theta(path.unbounded.theta_hat.size());
    for (int s = 0; s < r; ++s) {
        const double level = std::max(L, std::min(L + sys.lambda, gs.levels(s)));
        for (int i : gs.groups[static_cast<std::size_t>(s)]) theta(i) = level;
    }
    return detail::finish_bounded(sys, y, theta, path.unbounded.iterations);
}

inline FitResult fit_bounded(const BoundedIsotonicSystem& sys, const Vector& y,
                             const SolverConfig& cfg = {}) {
    IsotonicPath path(sys.order, y, cfg);
    return fit_bounded(sys, y, path);
}

// ----------------------------------------------------------------------------
// Divergence
// ----------------------------------------------------------------------------

/// Connected components of the subgraph keeping only edges whose constraint
/// is active at `tol` (undirected union-find over all n nodes).
inline int divergence_components(const BoundedIsotonicSystem& sys, const FitResult& fit,
                                 double tol) {
    sys.validate();
    const Vector& theta = fit.theta_hat;
    if (theta.size() != sys.order.n)
        throw std::invalid_argument("divergence_components: fit does not match system");
    std::vector<int> parent(static_cast<std::size_t>(sys.order.n));
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int v) {
        while (parent[static_cast<std::size_t>(v)] != v) {
            parent[static_cast<std::size_t>(v)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])];
            v = parent[static_cast<std::size_t>(v)];
        }
        return v;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(a)] = b;
    };
    for (const auto& [i, j] : sys.order.edges)
        if (std::abs(theta(i) - theta(j)) <= tol) unite(i, j);
    if (std::isfinite(sys.lambda))
        for (const auto& [i, j] : sys.bound_edges())
            if (std::abs(theta(i) - theta(j) - sys.lambda) <= tol) unite(i, j);
    int comps = 0;
    for (int v = 0; v < sys.order.n; ++v)
        if (find(v) == v) ++comps;
    return comps;
}

inline int divergence_components(const BoundedIsotonicSystem& sys, const FitResult& fit) {
    return divergence_components(sys, fit, default_active_tol(fit.theta_hat));
}

} // namespace polyproj
