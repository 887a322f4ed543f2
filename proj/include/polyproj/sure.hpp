/**
 * @file sure.hpp
 * @brief Unbiased risk estimation and penalty tuning over parameter grids,
 *        plus the replication experiments built on top of it.
 *
 * For a fit with divergence D at noise level sigma, the risk estimate is
 * U_n = |y - theta_hat|^2 + 2 sigma^2 D - n sigma^2, which is unbiased for
 * the in-sample risk |theta_hat - theta_star|^2 in the Gaussian model.
 */
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <polyproj/divergence.hpp>
#include <polyproj/isotonic.hpp>
#include <polyproj/problems.hpp>
#include <polyproj/rng.hpp>
#include <polyproj/solver.hpp>

namespace polyproj {

// ----------------------------------------------------------------------------
// Risk estimate and tuning curve
// ----------------------------------------------------------------------------

inline double sure_value(const Vector& y, const Vector& theta_hat, double divergence,
                         double sigma) {
    if (!(sigma > 0)) throw std::invalid_argument("sure_value: sigma > 0 required");
    if (y.size() != theta_hat.size())
        throw std::invalid_argument("sure_value: size mismatch");
    const double n = static_cast<double>(y.size());
    return (y - theta_hat).squaredNorm() + 2.0 * sigma * sigma * divergence - n * sigma * sigma;
}

struct SureRecord {
    double lambda = 0.0;
    double rss = 0.0;        // |y - theta_hat|^2
    double divergence = 0.0; // class-appropriate formula value
    double sure = 0.0;       // U_n
    double risk = std::numeric_limits<double>::quiet_NaN(); // L_n when truth known
    bool near_degenerate = false;
};

struct SureCurve {
    std::vector<SureRecord> records;
    double sigma = 0.0;
    Eigen::Index n = 0;
    int hat_index = -1;  // argmin of sure; ties resolve to the smaller lambda
    int star_index = -1; // argmin of risk when risks are present

    double lambda_hat() const { return records[static_cast<std::size_t>(hat_index)].lambda; }
    double lambda_star() const { return records[static_cast<std::size_t>(star_index)].lambda; }
    bool has_risk() const { return star_index >= 0; }
};

/// Thrown when a grid fit fails; carries the records completed so far.
class TuneError : public std::runtime_error {
  public:
    TuneError(const std::string& msg, SureCurve partial)
        : std::runtime_error(msg), partial_curve(std::move(partial)) {}
    SureCurve partial_curve;
};

namespace detail {

inline void check_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("tune: empty grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!std::isfinite(grid[i]) || grid[i] < 0)
            throw std::invalid_argument("tune: grid values must be finite and nonnegative");
        if (i > 0 && grid[i] <= grid[i - 1])
            throw std::invalid_argument("tune: grid must be strictly increasing");
    }
}

inline int argmin_first(const std::vector<SureRecord>& recs, double SureRecord::*field) {
    int best = -1;
    for (std::size_t i = 0; i < recs.size(); ++i)
        if (best < 0 || recs[i].*field < recs[static_cast<std::size_t>(best)].*field)
            best = static_cast<int>(i);
    return best;
}

/**
 * @brief Run body(i) for i in [0, count) on a small worker pool. Each index
 *        writes only its own result slot, so outputs are identical at any
 *        thread count; the first exception wins and is rethrown after join.
 */
template <typename F>
inline void run_indexed(int count, int threads, F&& body) {
    threads = std::max(1, std::min(threads, count));
    if (threads == 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace detail

/**
 * @brief Fit along an ascending parameter grid, score each point with U_n,
 *        and select the minimizer (ties go to the smaller parameter).
 *
 * Consecutive fits warm-start from their predecessors; bounded isotonic
 * problems reuse the single unbounded fit for the whole grid. When theta_star
 * is given every record also carries the realized risk L_n.
 */
inline SureCurve tune(const BuiltProblem& bp, const Vector& y, const std::vector<double>& grid,
                      double sigma, const SolverConfig& cfg = {},
                      const Vector* theta_star = nullptr) {
    if (!(sigma > 0)) throw std::invalid_argument("tune: sigma > 0 required");
    if (!bp.tunable()) throw std::invalid_argument("tune: problem kind has no tuning knob");
    detail::check_grid(grid);

    SureCurve curve;
    curve.sigma = sigma;
    curve.n = y.size();

    const bool iso = std::holds_alternative<BoundedIsotonicSystem>(bp.system);
    std::unique_ptr<IsotonicPath> path;
    if (iso)
        path = std::make_unique<IsotonicPath>(std::get<BoundedIsotonicSystem>(bp.system).order, y,
                                              cfg);

    FitResult warm;
    bool have_warm = false;
    for (double lambda : grid) {
        BuiltProblem at = bp.with_parameter(lambda);
        FitResult fit;
        if (iso) {
            fit = fit_bounded(std::get<BoundedIsotonicSystem>(at.system), y, *path);
        } else {
            fit = at.fit(y, cfg, have_warm ? &warm : nullptr);
        }
        if (fit.status != SolveStatus::optimal) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "tune: fit failed at parameter %.6g (%s)", lambda,
                          to_string(fit.status));
            throw TuneError(buf, std::move(curve));
        }
        DivergenceReport div = divergence_formula(at, fit);
        SureRecord rec;
        rec.lambda = lambda;
        rec.rss = (y - fit.theta_hat).squaredNorm();
        rec.divergence = div.value;
        rec.sure = sure_value(y, fit.theta_hat, div.value, sigma);
        rec.near_degenerate = div.near_degenerate;
        if (theta_star != nullptr) rec.risk = (fit.theta_hat - *theta_star).squaredNorm();
        curve.records.push_back(rec);
        warm = std::move(fit);
        have_warm = true;
    }
    curve.hat_index = detail::argmin_first(curve.records, &SureRecord::sure);
    if (theta_star != nullptr)
        curve.star_index = detail::argmin_first(curve.records, &SureRecord::risk);
    return curve;
}

// ----------------------------------------------------------------------------
// Default grids
// ----------------------------------------------------------------------------

/// k log-spaced points on [lo, hi]; lo must be positive.
inline std::vector<double> log_spaced_grid(double lo, double hi, int k) {
    if (!(lo > 0) || !(hi > lo)) throw std::invalid_argument("log_spaced_grid: need 0 < lo < hi");
    if (k < 2) throw std::invalid_argument("log_spaced_grid: k >= 2 required");
    std::vector<double> g(static_cast<std::size_t>(k));
    const double llo = std::log(lo), lhi = std::log(hi);
    for (int i = 0; i < k; ++i)
        g[static_cast<std::size_t>(i)] = std::exp(llo + (lhi - llo) * i / (k - 1));
    g.back() = hi;
    return g;
}

/**
 * @brief Data-driven default grid: 30 log-spaced points spanning the scale on
 *        which the penalty acts (data range for bound widths, |X^T y|_inf for
 *        soft thresholds, top singular value squared for quadratic weights).
 */
inline std::vector<double> default_grid(const BuiltProblem& bp, const Vector& y, int k = 30) {
    double hi = 1.0;
    switch (bp.kind) {
        case ProblemKind::bounded_isotonic_poset:
            hi = y.maxCoeff() - y.minCoeff();
            break;
        case ProblemKind::lasso:
        case ProblemKind::generalized_lasso:
            hi = (bp.X.transpose() * y).lpNorm<Eigen::Infinity>();
            break;
        case ProblemKind::ridge:
        case ProblemKind::penalized_convex: {
            Eigen::BDCSVD<Matrix> svd(bp.X);
            const double smax = svd.singularValues().size() ? svd.singularValues()(0) : 1.0;
            hi = 10.0 * smax * smax;
            break;
        }
        default: throw std::invalid_argument("default_grid: problem kind has no tuning knob");
    }
    if (!(hi > 0)) hi = 1.0;
    return log_spaced_grid(hi / 1000.0, hi, k);
}

// ----------------------------------------------------------------------------
// Replication experiments
// ----------------------------------------------------------------------------

struct ExperimentConfig {
    BuiltProblem problem;
    Vector theta_star;         // true mean vector
    double sigma = 1.0;        // noise level
    std::vector<double> grid;  // ascending tuning grid
    int reps = 50;             // replications, streams 1..reps under seed
    std::uint64_t seed = 1;
    SolverConfig solver;
    int threads = 1;           // worker pool size; results identical at any count
};

struct RatioSummary {
    double mean = 0.0;
    double sd = 0.0;
    double q10 = 0.0;
    double median = 0.0;
    double q90 = 0.0;
};

inline RatioSummary summarize_ratios(std::vector<double> v) {
    RatioSummary s;
    const double m = static_cast<double>(v.size());
    for (double x : v) s.mean += x;
    s.mean /= m;
    for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
    s.sd = v.size() > 1 ? std::sqrt(s.sd / (m - 1.0)) : 0.0;
    std::sort(v.begin(), v.end());
    auto pick = [&](double q) {
        const auto idx = static_cast<std::size_t>(std::ceil(q * m)) - 1;
        return v[std::min(idx, v.size() - 1)];
    };
    s.q10 = pick(0.10);
    s.median = pick(0.50);
    s.q90 = pick(0.90);
    return s;
}

/**
 * @brief Replicated tuning run: per replication, the risk ratio of the
 *        SURE-tuned fit against the oracle grid point, and the same ratio for
 *        the untuned reference (no bound for isotonic problems, no penalty
 *        otherwise). Also aggregates per-parameter SURE/risk means for
 *        unbiasedness checks.
 */
struct ExperimentResult {
    std::vector<double> grid;
    std::vector<SureCurve> curves;       // one per replication
    std::vector<double> sure_ratio;      // L(lambda_hat) / L(lambda_star)
    std::vector<double> reference_ratio; // L(reference fit) / L(lambda_star)
    RatioSummary sure_summary, reference_summary;
    std::vector<double> mean_sure, mean_risk, diff_se; // per grid point
};

inline ExperimentResult ratio_experiment(const ExperimentConfig& cfg) {
    if (cfg.reps < 1) throw std::invalid_argument("ratio_experiment: reps >= 1 required");
    if (!(cfg.sigma > 0)) throw std::invalid_argument("ratio_experiment: sigma > 0 required");
    if (!cfg.problem.tunable())
        throw std::invalid_argument("ratio_experiment: problem kind has no tuning knob");
    detail::check_grid(cfg.grid);

    const bool iso = std::holds_alternative<BoundedIsotonicSystem>(cfg.problem.system);
    const double reference_parameter = iso ? std::numeric_limits<double>::infinity() : 0.0;
    const BuiltProblem reference = cfg.problem.with_parameter(reference_parameter);

    const Eigen::Index n = cfg.theta_star.size();
    ExperimentResult out;
    out.grid = cfg.grid;
    const std::size_t K = cfg.grid.size();
    Matrix sure_mat(cfg.reps, static_cast<Eigen::Index>(K));
    Matrix risk_mat(cfg.reps, static_cast<Eigen::Index>(K));
    out.curves.resize(static_cast<std::size_t>(cfg.reps));
    out.sure_ratio.resize(static_cast<std::size_t>(cfg.reps));
    out.reference_ratio.resize(static_cast<std::size_t>(cfg.reps));

    detail::run_indexed(cfg.reps, cfg.threads, [&](int slot) {
        const int r = slot + 1;
        CounterRng rng = CounterRng::replication_stream(cfg.seed, static_cast<std::uint64_t>(r));
        Vector y = cfg.theta_star + cfg.sigma * rng.normal_vector(static_cast<int>(n));
        SureCurve curve = tune(cfg.problem, y, cfg.grid, cfg.sigma, cfg.solver, &cfg.theta_star);

        FitResult ref_fit = reference.fit(y, cfg.solver);
        if (ref_fit.status != SolveStatus::optimal)
            throw TuneError("ratio_experiment: reference fit failed", curve);
        const double ref_risk = (ref_fit.theta_hat - cfg.theta_star).squaredNorm();

        const double star_risk = curve.records[static_cast<std::size_t>(curve.star_index)].risk;
        const double hat_risk = curve.records[static_cast<std::size_t>(curve.hat_index)].risk;
        out.sure_ratio[static_cast<std::size_t>(slot)] = hat_risk / star_risk;
        out.reference_ratio[static_cast<std::size_t>(slot)] = ref_risk / star_risk;
        for (std::size_t k = 0; k < K; ++k) {
            sure_mat(slot, static_cast<Eigen::Index>(k)) = curve.records[k].sure;
            risk_mat(slot, static_cast<Eigen::Index>(k)) = curve.records[k].risk;
        }
        out.curves[static_cast<std::size_t>(slot)] = std::move(curve);
    });

    out.sure_summary = summarize_ratios(out.sure_ratio);
    out.reference_summary = summarize_ratios(out.reference_ratio);
    const double Rd = static_cast<double>(cfg.reps);
    for (std::size_t k = 0; k < K; ++k) {
        const auto col = static_cast<Eigen::Index>(k);
        out.mean_sure.push_back(sure_mat.col(col).mean());
        out.mean_risk.push_back(risk_mat.col(col).mean());
        const Vector diff = sure_mat.col(col) - risk_mat.col(col);
        const double dm = diff.mean();
        const double var = cfg.reps > 1
                               ? (diff.array() - dm).square().sum() / (Rd - 1.0)
                               : 0.0;
        out.diff_se.push_back(std::sqrt(var / Rd));
    }
    return out;
}

/**
 * @brief Formula-versus-covariance comparison on a grid: every replication is
 *        fit at every grid point (common random numbers), giving per-point
 *        mean formula divergences and Monte Carlo df values with jackknife
 *        standard errors.
 */
struct DfCompareRow {
    double lambda = 0.0;
    double mean_formula_df = 0.0;
    double mc_df = 0.0;
    double mc_se = 0.0;
};

inline std::vector<DfCompareRow> df_compare_experiment(const ExperimentConfig& cfg) {
    if (cfg.reps < 2) throw std::invalid_argument("df_compare_experiment: reps >= 2 required");
    if (!(cfg.sigma > 0)) throw std::invalid_argument("df_compare_experiment: sigma > 0 required");
    detail::check_grid(cfg.grid);
    if (!cfg.problem.tunable())
        throw std::invalid_argument("df_compare_experiment: problem kind has no tuning knob");

    const bool iso = std::holds_alternative<BoundedIsotonicSystem>(cfg.problem.system);
    const Eigen::Index n = cfg.theta_star.size();
    const std::size_t K = cfg.grid.size();

    std::vector<BuiltProblem> at;
    at.reserve(K);
    for (double lambda : cfg.grid) at.push_back(cfg.problem.with_parameter(lambda));

    std::vector<Matrix> fits(K, Matrix(n, cfg.reps));
    Matrix Y(n, cfg.reps);
    Matrix formula(static_cast<Eigen::Index>(K), cfg.reps);

    detail::run_indexed(cfg.reps, cfg.threads, [&](int slot) {
        const int r = slot + 1;
        CounterRng rng = CounterRng::replication_stream(cfg.seed, static_cast<std::uint64_t>(r));
        Vector y = cfg.theta_star + cfg.sigma * rng.normal_vector(static_cast<int>(n));
        Y.col(slot) = y;

        std::unique_ptr<IsotonicPath> path;
        if (iso)
            path = std::make_unique<IsotonicPath>(
                std::get<BoundedIsotonicSystem>(cfg.problem.system).order, y, cfg.solver);
        FitResult warm;
        bool have_warm = false;
        for (std::size_t k = 0; k < K; ++k) {
            FitResult fit;
            if (iso) {
                fit = fit_bounded(std::get<BoundedIsotonicSystem>(at[k].system), y, *path);
            } else {
                fit = at[k].fit(y, cfg.solver, have_warm ? &warm : nullptr);
            }
            if (fit.status != SolveStatus::optimal)
                throw std::runtime_error("df_compare_experiment: fit failed on the grid");
            fits[k].col(slot) = fit.theta_hat;
            formula(static_cast<Eigen::Index>(k), slot) = divergence_formula(at[k], fit).value;
            warm = std::move(fit);
            have_warm = true;
        }
    });

    std::vector<DfCompareRow> rows;
    rows.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        DfCompareRow row;
        row.lambda = cfg.grid[k];
        row.mean_formula_df = formula.row(static_cast<Eigen::Index>(k)).mean();
        std::tie(row.mc_df, row.mc_se) = detail::df_from_samples(fits[k], Y, cfg.sigma);
        rows.push_back(row);
    }
    return rows;
}

} // namespace polyproj
