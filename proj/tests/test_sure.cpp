/**
 * @file test_sure.cpp
 * @brief Risk-estimate identities, grid tuning with warm starts, default
 *        grids, and the replication experiments.
 */
#include <catch2/catch_amalgamated.hpp>

#include <polyproj/sure.hpp>

#include "oracles.hpp"

using polyproj::BoundedIsotonicSystem;
using polyproj::BuiltProblem;
using polyproj::Dataset;
using polyproj::DfCompareRow;
using polyproj::ExperimentConfig;
using polyproj::ExperimentResult;
using polyproj::FitResult;
using polyproj::LiftedSystem;
using polyproj::Matrix;
using polyproj::ProblemKind;
using polyproj::ProblemSpec;
using polyproj::SureCurve;
using polyproj::Vector;

namespace {

Matrix random_matrix(polyproj::CounterRng& rng, int rows, int cols) {
    Matrix X(rows, cols);
    for (int i = 0; i < rows; ++i) X.row(i) = rng.normal_vector(cols).transpose();
    return X;
}

BuiltProblem ridge_problem(const Matrix& X, const Vector& y, double lambda) {
    ProblemSpec spec;
    spec.kind = ProblemKind::ridge;
    spec.data = {X, y, 1.0};
    spec.lambda = lambda;
    return polyproj::build_problem(spec);
}

} // namespace

TEST_CASE("sure_value is pinned at the extremes", "[sure]") {
    polyproj::CounterRng rng(601);
    const int n = 9;
    Vector y = rng.normal_vector(n) * 2.0;
    const double sigma = 0.8;

    CHECK(polyproj::sure_value(y, y, n, sigma) ==
          Catch::Approx(n * sigma * sigma).margin(1e-12));
    CHECK(polyproj::sure_value(y, Vector::Zero(n), 0.0, sigma) ==
          Catch::Approx(y.squaredNorm() - n * sigma * sigma).margin(1e-12));
    CHECK_THROWS_AS(polyproj::sure_value(y, y, 1.0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::sure_value(y, Vector::Zero(n - 1), 0.0, 1.0),
                    std::invalid_argument);
}

TEST_CASE("tune records satisfy the risk-estimate identity", "[sure]") {
    polyproj::CounterRng rng(602);
    const int n = 9, d = 4;
    Matrix X = random_matrix(rng, n, d);
    Vector y = rng.normal_vector(n) * 1.5;
    const double sigma = 0.7;
    BuiltProblem bp = ridge_problem(X, y, 1.0);
    std::vector<double> grid = polyproj::log_spaced_grid(0.05, 20.0, 12);

    SureCurve curve = polyproj::tune(bp, y, grid, sigma);
    REQUIRE(curve.records.size() == grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const auto& rec = curve.records[k];
        CHECK(rec.lambda == grid[k]);
        const double identity =
            rec.rss + 2.0 * sigma * sigma * rec.divergence - n * sigma * sigma;
        CHECK(rec.sure == Catch::Approx(identity).margin(1e-9));
    }
    CHECK(curve.hat_index >= 0);
    CHECK(curve.hat_index < static_cast<int>(grid.size()));
}

TEST_CASE("ridge tuning matches the analytic curve", "[sure]") {
    polyproj::CounterRng rng(603);
    const int n = 10, d = 4;
    Matrix X = random_matrix(rng, n, d);
    Vector y = rng.normal_vector(n) * 2.0;
    const double sigma = 1.0;
    BuiltProblem bp = ridge_problem(X, y, 1.0);
    std::vector<double> grid = polyproj::log_spaced_grid(0.05, 50.0, 15);

    SureCurve curve = polyproj::tune(bp, y, grid, sigma);
    int analytic_best = -1;
    double best_value = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const double lam = grid[k];
        Matrix M = lam * Matrix::Identity(d, d) + X.transpose() * X;
        Vector theta = X * M.ldlt().solve(X.transpose() * y);
        const double value =
            polyproj::sure_value(y, theta, polyproj::closed_form_ridge(X, lam), sigma);
        CHECK(curve.records[k].sure == Catch::Approx(value).margin(1e-6));
        if (value < best_value) {
            best_value = value;
            analytic_best = static_cast<int>(k);
        }
    }
    CHECK(curve.hat_index == analytic_best);
}

TEST_CASE("sure ties resolve to the smallest parameter", "[sure]") {
    polyproj::CounterRng rng(604);
    const int n = 6, d = 3;
    Matrix X = random_matrix(rng, n, d);
    Vector y = rng.normal_vector(n);
    ProblemSpec spec;
    spec.kind = ProblemKind::lasso;
    spec.data = {X, y, 1.0};
    spec.tau = 1.0;
    BuiltProblem bp = polyproj::build_problem(spec);
    // Past the max correlation every fit is zero, so the curve is flat.
    const double tau_max = (X.transpose() * y).lpNorm<Eigen::Infinity>();
    std::vector<double> grid = {2.0 * tau_max, 3.0 * tau_max, 4.0 * tau_max};
    SureCurve curve = polyproj::tune(bp, y, grid, 1.0);
    CHECK(curve.records[0].divergence == 0.0);
    // The whole segment fits zero, so the selected point must sit on the
    // common value up to solver roundoff.
    CHECK(std::abs(curve.records[static_cast<std::size_t>(curve.hat_index)].sure -
                   curve.records[0].sure) < 1e-9);

    // Exact ties resolve to the first (smallest) grid point.
    std::vector<polyproj::SureRecord> flat(3);
    for (auto& r : flat) r.sure = 5.0;
    CHECK(polyproj::detail::argmin_first(flat, &polyproj::SureRecord::sure) == 0);
    flat[1].sure = 4.0;
    flat[2].sure = 4.0;
    CHECK(polyproj::detail::argmin_first(flat, &polyproj::SureRecord::sure) == 1);
}

TEST_CASE("tune validates inputs and reports failures with a partial curve", "[sure]") {
    polyproj::CounterRng rng(605);
    Matrix X = random_matrix(rng, 6, 2);
    Vector y = rng.normal_vector(6);
    BuiltProblem bp = ridge_problem(X, y, 1.0);

    CHECK_THROWS_AS(polyproj::tune(bp, y, {}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::tune(bp, y, {2.0, 1.0}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::tune(bp, y, {-1.0, 1.0}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::tune(bp, y, {1.0, 2.0}, 0.0), std::invalid_argument);

    ProblemSpec plain;
    plain.kind = ProblemKind::linear_regression;
    plain.data = {X, y, 1.0};
    CHECK_THROWS_AS(polyproj::tune(polyproj::build_problem(plain), y, {1.0}, 1.0),
                    std::invalid_argument);

    // A linear term pulling downhill along a null direction of the design is
    // unbounded at small penalties; tune must abort with what it finished.
    Matrix Xn(6, 3);
    Xn.col(0) = X.col(0);
    Xn.col(1) = X.col(1);
    Xn.col(2) = -(X.col(0) + X.col(1)); // Xn * (1,1,1) = 0
    ProblemSpec ls;
    ls.kind = ProblemKind::lasso;
    ls.data = {Xn, y, 1.0};
    ls.tau = 1.0;
    BuiltProblem broken = polyproj::build_problem(ls);
    auto lift = std::get<LiftedSystem>(broken.system);
    auto lin = std::get<polyproj::LinearPerturbation>(lift.perturbation);
    lin.d.head(3).setConstant(-2.0); // beats tau = 1 along the null direction
    lift.perturbation = lin;
    broken.system = lift;
    CHECK(polyproj::solve_lifted(std::get<LiftedSystem>(broken.system), y).status ==
          polyproj::SolveStatus::unbounded);
    bool caught = false;
    try {
        polyproj::tune(broken, y, {1.0, 3.0}, 1.0);
    } catch (const polyproj::TuneError& err) {
        caught = true;
        CHECK(err.partial_curve.records.empty());
        CHECK(std::string(err.what()).find("fit failed") != std::string::npos);
    }
    CHECK(caught);
}

TEST_CASE("warm-started grids match cold fits", "[sure]") {
    polyproj::CounterRng rng(606);
    const int n = 8, d = 3;
    Matrix X = random_matrix(rng, n, d);
    Vector y = rng.normal_vector(n) * 1.7;
    ProblemSpec spec;
    spec.kind = ProblemKind::lasso;
    spec.data = {X, y, 1.0};
    spec.tau = 1.0;
    BuiltProblem bp = polyproj::build_problem(spec);
    std::vector<double> grid = polyproj::log_spaced_grid(0.1, 8.0, 9);

    SureCurve curve = polyproj::tune(bp, y, grid, 1.0);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        BuiltProblem at = bp.with_parameter(grid[k]);
        FitResult cold = at.fit(y);
        CHECK(std::abs(curve.records[k].rss - (y - cold.theta_hat).squaredNorm()) < 1e-6);
        CHECK(curve.records[k].divergence ==
              polyproj::divergence_formula(at, cold).value);
    }
}

TEST_CASE("bounded isotonic tuning reuses the path and keeps df monotone", "[sure]") {
    polyproj::CounterRng rng(607);
    const int n = 12;
    Vector y = rng.normal_vector(n).array() + Vector::LinSpaced(n, 0.0, 2.0).array();
    Matrix x(n, 1);
    x.col(0) = Vector::LinSpaced(n, 0.0, 1.0);
    ProblemSpec spec;
    spec.kind = ProblemKind::bounded_isotonic_poset;
    spec.data = {x, y, 1.0};
    spec.lambda = 1.0;
    BuiltProblem bp = polyproj::build_problem(spec);

    const double range = y.maxCoeff() - y.minCoeff();
    std::vector<double> grid = polyproj::log_spaced_grid(range / 100.0, range, 10);
    SureCurve curve = polyproj::tune(bp, y, grid, 1.0);

    double prev = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const auto& rec = curve.records[k];
        BoundedIsotonicSystem sys{std::get<BoundedIsotonicSystem>(bp.system).order, grid[k]};
        FitResult direct = polyproj::fit_bounded(sys, y);
        CHECK(std::abs(rec.rss - (y - direct.theta_hat).squaredNorm()) < 1e-9);
        CHECK(rec.divergence ==
              static_cast<double>(polyproj::divergence_components(sys, direct)));
        if (!rec.near_degenerate) {
            CHECK(rec.divergence >= prev);
            prev = rec.divergence;
        }
    }
}

TEST_CASE("default grids are log-spaced over the relevant scale", "[sure]") {
    CHECK_THROWS_AS(polyproj::log_spaced_grid(0.0, 1.0, 5), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::log_spaced_grid(1.0, 1.0, 5), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::log_spaced_grid(0.5, 1.0, 1), std::invalid_argument);
    auto g = polyproj::log_spaced_grid(0.01, 10.0, 7);
    REQUIRE(g.size() == 7);
    CHECK(g.front() == Catch::Approx(0.01));
    CHECK(g.back() == 10.0);
    for (std::size_t i = 1; i < g.size(); ++i)
        CHECK(g[i] / g[i - 1] == Catch::Approx(g[1] / g[0]).epsilon(1e-9));

    polyproj::CounterRng rng(608);
    Matrix X = random_matrix(rng, 8, 3);
    Vector y = rng.normal_vector(8) * 2.0;

    ProblemSpec iso;
    iso.kind = ProblemKind::bounded_isotonic_poset;
    Matrix one_d(8, 1);
    one_d.col(0) = Vector::LinSpaced(8, 0.0, 1.0);
    iso.data = {one_d, y, 1.0};
    iso.lambda = 1.0;
    auto iso_grid = polyproj::default_grid(polyproj::build_problem(iso), y);
    REQUIRE(iso_grid.size() == 30);
    CHECK(iso_grid.back() == Catch::Approx(y.maxCoeff() - y.minCoeff()));

    ProblemSpec ls;
    ls.kind = ProblemKind::lasso;
    ls.data = {X, y, 1.0};
    ls.tau = 1.0;
    auto lasso_grid = polyproj::default_grid(polyproj::build_problem(ls), y);
    CHECK(lasso_grid.back() ==
          Catch::Approx((X.transpose() * y).lpNorm<Eigen::Infinity>()));

    ProblemSpec plain;
    plain.kind = ProblemKind::linear_regression;
    plain.data = {X, y, 1.0};
    CHECK_THROWS_AS(polyproj::default_grid(polyproj::build_problem(plain), y),
                    std::invalid_argument);
}

TEST_CASE("ratio summaries are pinned on a small sample", "[sure]") {
    auto s = polyproj::summarize_ratios({2.0, 4.0, 1.0, 3.0});
    CHECK(s.mean == Catch::Approx(2.5));
    CHECK(s.sd == Catch::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(s.q10 == 1.0);
    CHECK(s.median == 2.0);
    CHECK(s.q90 == 4.0);
}

TEST_CASE("isotonic ratio experiment is deterministic with unit-floor ratios", "[sure]") {
    const int n = 20;
    Vector theta_star(n);
    for (int i = 0; i < n; ++i) theta_star(i) = 2.0 * (i / double(n - 1)) * (i / double(n - 1));
    Matrix x(n, 1);
    x.col(0) = Vector::LinSpaced(n, 0.0, 1.0);

    ProblemSpec spec;
    spec.kind = ProblemKind::bounded_isotonic_poset;
    spec.data = {x, theta_star, 0.5};
    spec.lambda = 1.0;

    ExperimentConfig cfg;
    cfg.problem = polyproj::build_problem(spec);
    cfg.theta_star = theta_star;
    cfg.sigma = 0.5;
    cfg.grid = polyproj::log_spaced_grid(0.05, 2.5, 8);
    cfg.reps = 10;
    cfg.seed = 77;

    ExperimentResult res = polyproj::ratio_experiment(cfg);
    REQUIRE(res.curves.size() == 10);
    REQUIRE(res.sure_ratio.size() == 10);
    for (double ratio : res.sure_ratio) CHECK(ratio >= 1.0);
    for (double ratio : res.reference_ratio) CHECK(ratio >= 1.0);
    CHECK(res.mean_sure.size() == cfg.grid.size());
    CHECK(res.diff_se.size() == cfg.grid.size());

    ExperimentResult again = polyproj::ratio_experiment(cfg);
    for (std::size_t r = 0; r < res.sure_ratio.size(); ++r) {
        CHECK(res.sure_ratio[r] == again.sure_ratio[r]);
        CHECK(res.reference_ratio[r] == again.reference_ratio[r]);
    }

    // Replications only write their own slots, so a pool gives the same bits.
    cfg.threads = 3;
    ExperimentResult pooled = polyproj::ratio_experiment(cfg);
    for (std::size_t r = 0; r < res.sure_ratio.size(); ++r)
        CHECK(res.sure_ratio[r] == pooled.sure_ratio[r]);
    for (std::size_t k = 0; k < cfg.grid.size(); ++k)
        CHECK(res.mean_sure[k] == pooled.mean_sure[k]);
}

TEST_CASE("ridge experiment estimates are unbiased within noise", "[sure]") {
    polyproj::CounterRng rng(609);
    const int n = 10, d = 3;
    Matrix X = random_matrix(rng, n, d);
    Vector beta_star = rng.normal_vector(d);
    Vector theta_star = X * beta_star;

    ProblemSpec spec;
    spec.kind = ProblemKind::ridge;
    spec.data = {X, theta_star, 1.0};
    spec.lambda = 1.0;

    ExperimentConfig cfg;
    cfg.problem = polyproj::build_problem(spec);
    cfg.theta_star = theta_star;
    cfg.sigma = 1.0;
    cfg.grid = polyproj::log_spaced_grid(0.1, 20.0, 6);
    cfg.reps = 40;
    cfg.seed = 31;

    ExperimentResult res = polyproj::ratio_experiment(cfg);
    for (std::size_t k = 0; k < cfg.grid.size(); ++k) {
        INFO("grid point " << k);
        CHECK(std::abs(res.mean_sure[k] - res.mean_risk[k]) <= 5.0 * res.diff_se[k]);
    }
    for (double ratio : res.sure_ratio) CHECK(ratio >= 1.0);
}

TEST_CASE("df comparison lines up formulas with covariance estimates", "[sure]") {
    polyproj::CounterRng rng(610);
    const int n = 8, d = 3;
    Matrix X = random_matrix(rng, n, d);
    Vector theta_star = X * rng.normal_vector(d);

    ProblemSpec spec;
    spec.kind = ProblemKind::ridge;
    spec.data = {X, theta_star, 1.0};
    spec.lambda = 1.0;

    ExperimentConfig cfg;
    cfg.problem = polyproj::build_problem(spec);
    cfg.theta_star = theta_star;
    cfg.sigma = 1.0;
    cfg.grid = {0.3, 1.0, 3.0, 10.0};
    cfg.reps = 60;
    cfg.seed = 13;

    std::vector<DfCompareRow> rows = polyproj::df_compare_experiment(cfg);
    REQUIRE(rows.size() == cfg.grid.size());
    for (const auto& row : rows) {
        // Ridge df is deterministic, so the mean formula value is exact.
        CHECK(row.mean_formula_df ==
              Catch::Approx(polyproj::closed_form_ridge(X, row.lambda)).margin(1e-6));
        CHECK(std::abs(row.mc_df - row.mean_formula_df) <= 4.0 * row.mc_se);
        CHECK(row.mc_se > 0.0);
    }

    // Common random numbers: the data column for a rep is shared across grid
    // points, so rerunning reproduces every number bitwise.
    std::vector<DfCompareRow> again = polyproj::df_compare_experiment(cfg);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        CHECK(rows[k].mc_df == again[k].mc_df);
        CHECK(rows[k].mc_se == again[k].mc_se);
    }
}

TEST_CASE("isotonic df comparison stays within sampling error", "[sure]") {
    const int n = 15;
    Vector theta_star = Vector::LinSpaced(n, 0.0, 3.0);
    Matrix x(n, 1);
    x.col(0) = Vector::LinSpaced(n, 0.0, 1.0);

    ProblemSpec spec;
    spec.kind = ProblemKind::bounded_isotonic_poset;
    spec.data = {x, theta_star, 1.0};
    spec.lambda = 1.0;

    ExperimentConfig cfg;
    cfg.problem = polyproj::build_problem(spec);
    cfg.theta_star = theta_star;
    cfg.sigma = 1.0;
    cfg.grid = {0.5, 1.5, 3.0};
    cfg.reps = 80;
    cfg.seed = 5;

    std::vector<DfCompareRow> rows = polyproj::df_compare_experiment(cfg);
    for (const auto& row : rows) {
        INFO("lambda " << row.lambda);
        CHECK(std::abs(row.mc_df - row.mean_formula_df) <= 4.0 * row.mc_se);
    }
}
