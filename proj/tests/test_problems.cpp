/**
 * @file test_problems.cpp
 * @brief Problem builders: pinned row conventions, feasibility of exact
 *        solutions, agreement with reference solvers, and label round-trips.
 */
#include <catch2/catch_amalgamated.hpp>

#include <polyproj/problems.hpp>
#include <polyproj/rng.hpp>

#include "oracles.hpp"

using polyproj::BoundedIsotonicSystem;
using polyproj::BuiltProblem;
using polyproj::ConstraintSystem;
using polyproj::Dataset;
using polyproj::FitResult;
using polyproj::LiftedSystem;
using polyproj::Matrix;
using polyproj::PartialOrder;
using polyproj::ProblemKind;
using polyproj::ProblemSpec;
using polyproj::Vector;

TEST_CASE("univariate convex rows are pinned", "[problems]") {
    Vector x(3);
    x << 0, 1, 2;
    ConstraintSystem sys = polyproj::build_univariate_convex(x);
    REQUIRE(sys.m() == 1);
    REQUIRE(sys.n() == 3);
    CHECK(sys.A(0, 0) == -1.0);
    CHECK(sys.A(0, 1) == 2.0);
    CHECK(sys.A(0, 2) == -1.0);
    CHECK(sys.b(0) == 0.0);

    // A kink pointing up violates the single row with margin 2.
    Vector theta(3);
    theta << 0, 1, 0;
    CHECK(sys.A.row(0).dot(theta) == 2.0);

    // Every affine vector lies on the boundary of all rows.
    Vector xl(6);
    xl << -2.0, -0.5, 0.25, 1.0, 3.5, 4.0;
    ConstraintSystem big = polyproj::build_univariate_convex(xl);
    Vector affine = 3.0 * xl + Vector::Constant(6, -0.7);
    CHECK((big.A * affine).lpNorm<Eigen::Infinity>() < 1e-12);

    Vector tied(3);
    tied << 0, 0, 1;
    CHECK_THROWS_AS(polyproj::build_univariate_convex(tied), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::build_univariate_convex(x.head(2)), std::invalid_argument);
}

TEST_CASE("multivariate convex rows follow lexicographic pair order", "[problems]") {
    Matrix pts(3, 2);
    pts << 0, 0, 1, 0, 0, 1;
    LiftedSystem sys = polyproj::build_multivariate_convex(pts);
    REQUIRE(sys.m() == 6);
    REQUIRE(sys.p() == 6);
    REQUIRE(sys.n() == 3);
    // Row order (0,1),(0,2),(1,0),(1,2),(2,0),(2,1); row 0 has x_1 - x_0 in
    // block 0 and B = e_0 - e_1.
    CHECK(sys.A(0, 0) == 1.0);
    CHECK(sys.A(0, 1) == 0.0);
    CHECK(sys.B(0, 0) == 1.0);
    CHECK(sys.B(0, 1) == -1.0);
    CHECK(sys.A(3, 2) == -1.0); // row (1,2): x_2 - x_1 = (-1,1) in block 1
    CHECK(sys.A(3, 3) == 1.0);

    Matrix dup(2, 2);
    dup << 1, 1, 1, 1;
    CHECK_THROWS_AS(polyproj::build_multivariate_convex(dup), std::invalid_argument);
}

TEST_CASE("exact gradients of a convex function are feasible", "[problems]") {
    polyproj::CounterRng rng(404);
    const int n = 12, d = 3;
    Matrix pts(n, d);
    for (int i = 0; i < n; ++i) pts.row(i) = rng.normal_vector(d).transpose();
    LiftedSystem sys = polyproj::build_multivariate_convex(pts);

    Vector theta(n);
    Vector xi(n * d);
    for (int i = 0; i < n; ++i) {
        theta(i) = pts.row(i).squaredNorm();
        xi.segment(i * d, d) = 2.0 * pts.row(i).transpose();
    }
    Vector resid = sys.A * xi + sys.B * theta - sys.c;
    CHECK(resid.maxCoeff() <= 1e-12);
}

TEST_CASE("linear regression builder projects onto the column space", "[problems]") {
    polyproj::CounterRng rng(405);
    const int n = 9, d = 4;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Vector y = rng.normal_vector(n);

    LiftedSystem sys = polyproj::build_linear_regression(X);
    REQUIRE(sys.m() == 2 * n);
    FitResult fit = polyproj::solve_lifted(sys, y);
    REQUIRE(fit.status == polyproj::SolveStatus::optimal);

    Vector beta_ls = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    CHECK((fit.theta_hat - X * beta_ls).lpNorm<Eigen::Infinity>() < 1e-7);
}

TEST_CASE("ridge builder matches the closed-form solution", "[problems]") {
    polyproj::CounterRng rng(406);
    const int n = 8, d = 3;
    const double lambda = 1.7;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Vector y = rng.normal_vector(n);

    LiftedSystem sys = polyproj::build_ridge(X, lambda);
    FitResult fit = polyproj::solve_lifted(sys, y);
    REQUIRE(fit.status == polyproj::SolveStatus::optimal);

    Matrix M = lambda * Matrix::Identity(d, d) + X.transpose() * X;
    Vector theta = X * M.ldlt().solve(X.transpose() * y);
    CHECK((fit.theta_hat - theta).lpNorm<Eigen::Infinity>() < 1e-7);

    CHECK_THROWS_AS(polyproj::build_ridge(X, 0.0), std::invalid_argument);
}

TEST_CASE("identity-design lasso soft-thresholds", "[problems]") {
    Matrix I3 = Matrix::Identity(3, 3);
    LiftedSystem sys = polyproj::build_generalized_lasso(I3, I3, 1.0);
    Vector y(3);
    y << 3.0, 0.5, -2.0;
    FitResult fit = polyproj::solve_lifted(sys, y);
    REQUIRE(fit.status == polyproj::SolveStatus::optimal);
    Vector expected(3);
    expected << 2.0, 0.0, -1.0;
    CHECK((fit.theta_hat - expected).lpNorm<Eigen::Infinity>() < 1e-7);
    REQUIRE(fit.xi_hat.has_value());
    // gamma must collapse onto |beta| whenever tau > 0.
    Vector beta = fit.xi_hat->head(3);
    Vector gamma = fit.xi_hat->tail(3);
    CHECK((gamma - beta.cwiseAbs()).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("general-design lasso agrees with coordinate descent", "[problems]") {
    polyproj::CounterRng rng(407);
    const int n = 8, d = 4;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Matrix Id = Matrix::Identity(d, d);
    for (double tau : {0.3, 1.0, 4.0}) {
        Vector y = rng.normal_vector(n) * 2.0;
        LiftedSystem sys = polyproj::build_generalized_lasso(X, Id, tau);
        FitResult fit = polyproj::solve_lifted(sys, y);
        REQUIRE(fit.status == polyproj::SolveStatus::optimal);
        Vector beta = oracle::cd_lasso(X, y, tau);
        CHECK((fit.theta_hat - X * beta).lpNorm<Eigen::Infinity>() < 1e-6);
    }
}

TEST_CASE("zero penalty reduces the lasso to least squares", "[problems]") {
    polyproj::CounterRng rng(408);
    const int n = 7, d = 3;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Vector y = rng.normal_vector(n);
    LiftedSystem sys = polyproj::build_generalized_lasso(X, Matrix::Identity(d, d), 0.0);
    FitResult fit = polyproj::solve_lifted(sys, y);
    REQUIRE(fit.status == polyproj::SolveStatus::optimal);
    Vector beta_ls = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    CHECK((fit.theta_hat - X * beta_ls).lpNorm<Eigen::Infinity>() < 1e-7);
}

TEST_CASE("lasso objectives are bounded for every penalty level", "[problems]") {
    polyproj::CounterRng rng(409);
    Matrix X(6, 5);
    for (int i = 0; i < 6; ++i) X.row(i) = rng.normal_vector(5).transpose();
    Matrix D(4, 5);
    for (int i = 0; i < 4; ++i) D.row(i) = rng.normal_vector(5).transpose();
    for (double tau : {0.0, 0.25, 1.0, 10.0}) {
        LiftedSystem sys = polyproj::build_generalized_lasso(X, D, tau);
        auto cert = polyproj::check_bounded(sys);
        CHECK(cert.bounded);
    }
    CHECK_THROWS_AS(polyproj::build_generalized_lasso(X, D, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(polyproj::build_generalized_lasso(X, Matrix::Identity(3, 3), 1.0),
                    std::invalid_argument);
}

TEST_CASE("fused-chain penalty solves and flattens at large tau", "[problems]") {
    polyproj::CounterRng rng(410);
    const int n = 10, d = 6;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Matrix D = Matrix::Zero(d - 1, d);
    for (int i = 0; i + 1 < d; ++i) {
        D(i, i) = 1.0;
        D(i, i + 1) = -1.0;
    }
    Vector y = rng.normal_vector(n) * 3.0;
    LiftedSystem sys = polyproj::build_generalized_lasso(X, D, 500.0);
    FitResult fit = polyproj::solve_lifted(sys, y);
    REQUIRE(fit.status == polyproj::SolveStatus::optimal);
    // At a crushing penalty all coefficients fuse: beta = b*1, so theta lies
    // on the line spanned by X*1.
    REQUIRE(fit.xi_hat.has_value());
    Vector beta = fit.xi_hat->head(d);
    CHECK((beta - Vector::Constant(d, beta.mean())).lpNorm<Eigen::Infinity>() < 1e-5);
}

TEST_CASE("row labels round-trip and count the rows", "[problems]") {
    CHECK(polyproj::make_row_label("pair", {3, 7}) == "pair(3,7)");
    auto parsed = polyproj::parse_row_label("convexity(0,1,2)");
    CHECK(parsed.name == "convexity");
    REQUIRE(parsed.args.size() == 3);
    CHECK(parsed.args[2] == 2);
    CHECK_THROWS_AS(polyproj::parse_row_label("nonsense"), std::invalid_argument);

    auto labels = polyproj::univariate_convex_labels(4);
    REQUIRE(labels.size() == 2);
    CHECK(labels[1] == "convexity(1,2,3)");
    auto pair_labels = polyproj::multivariate_convex_labels(3);
    REQUIRE(pair_labels.size() == 6);
    CHECK(pair_labels[0] == "pair(0,1)");
    CHECK(pair_labels[5] == "pair(2,1)");
    auto reg_labels = polyproj::linear_regression_labels(2);
    CHECK(reg_labels[0] == "eq_upper(0)");
    CHECK(reg_labels[3] == "eq_lower(1)");
    auto gl_labels = polyproj::generalized_lasso_labels(1, 2);
    REQUIRE(gl_labels.size() == 6);
    CHECK(gl_labels[2] == "abs_upper(0)");
    CHECK(gl_labels[5] == "abs_lower(1)");

    // Serialization round trip: parse then re-serialize reproduces the text.
    for (const auto& text : {std::string("order(2,5)"), std::string("bound(4,0)"),
                             std::string("eq_upper(11)"), std::string("convexity(0,1,2)")}) {
        auto p = polyproj::parse_row_label(text);
        CHECK(polyproj::make_row_label(p.name.c_str(), p.args) == text);
    }
}

TEST_CASE("build_problem covers every kind with matching label counts", "[problems]") {
    polyproj::CounterRng rng(411);
    const int n = 6;
    Matrix pts(n, 2);
    for (int i = 0; i < n; ++i) pts.row(i) = rng.normal_vector(2).transpose();
    Vector y = rng.normal_vector(n);
    Vector x_sorted(n);
    x_sorted << 0.0, 0.4, 1.1, 1.9, 2.2, 3.0;

    auto label_count = [](const BuiltProblem& bp) -> Eigen::Index {
        if (const auto* plain = std::get_if<ConstraintSystem>(&bp.system)) return plain->m();
        if (const auto* lift = std::get_if<LiftedSystem>(&bp.system)) return lift->m();
        return std::get<BoundedIsotonicSystem>(bp.system).to_constraints().m();
    };

    std::vector<ProblemSpec> specs;
    {
        ProblemSpec s;
        s.kind = ProblemKind::univariate_isotonic;
        s.data = {x_sorted, y, 1.0};
        specs.push_back(s);
        s.kind = ProblemKind::bounded_isotonic_poset;
        s.data = {pts, y, 1.0};
        s.lambda = 0.8;
        specs.push_back(s);
        s = ProblemSpec{};
        s.kind = ProblemKind::univariate_convex;
        s.data = {x_sorted, y, 1.0};
        specs.push_back(s);
        s = ProblemSpec{};
        s.kind = ProblemKind::multivariate_convex;
        s.data = {pts, y, 1.0};
        specs.push_back(s);
        s.kind = ProblemKind::penalized_convex;
        s.lambda = 0.5;
        specs.push_back(s);
        s = ProblemSpec{};
        s.kind = ProblemKind::linear_regression;
        s.data = {pts, y, 1.0};
        specs.push_back(s);
        s.kind = ProblemKind::ridge;
        s.lambda = 1.2;
        specs.push_back(s);
        s = ProblemSpec{};
        s.kind = ProblemKind::lasso;
        s.data = {pts, y, 1.0};
        s.tau = 0.6;
        specs.push_back(s);
        s.kind = ProblemKind::generalized_lasso;
        Matrix D(1, 2);
        D << 1, -1;
        s.D = D;
        specs.push_back(s);
    }

    for (const auto& spec : specs) {
        INFO(polyproj::to_string(spec.kind));
        BuiltProblem bp = polyproj::build_problem(spec);
        CHECK(static_cast<Eigen::Index>(bp.row_labels.size()) == label_count(bp));
        FitResult fit = bp.fit(y);
        REQUIRE(fit.status == polyproj::SolveStatus::optimal);
        CHECK(fit.theta_hat.size() == n);
        CHECK(fit.kkt.worst() < 1e-6);
    }

    CHECK(polyproj::problem_kind_from_string("ridge") == ProblemKind::ridge);
    CHECK_THROWS_AS(polyproj::problem_kind_from_string("rigde"), std::invalid_argument);
}

TEST_CASE("chain problems reduce to pooled means", "[problems]") {
    Vector y(5);
    y << 3.0, 1.0, 2.0, 5.0, 4.0;
    Vector x(5);
    x << 0, 1, 2, 3, 4;
    ProblemSpec s;
    s.kind = ProblemKind::univariate_isotonic;
    s.data = {x, y, 1.0};
    BuiltProblem bp = polyproj::build_problem(s);
    FitResult fit = bp.fit(y);
    CHECK((fit.theta_hat - oracle::pava(y)).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("with_parameter rebuilds match fresh builds", "[problems]") {
    polyproj::CounterRng rng(412);
    const int n = 7, d = 3;
    Matrix X(n, d);
    for (int i = 0; i < n; ++i) X.row(i) = rng.normal_vector(d).transpose();
    Vector y = rng.normal_vector(n);

    ProblemSpec rs;
    rs.kind = ProblemKind::ridge;
    rs.data = {X, y, 1.0};
    rs.lambda = 1.0;
    BuiltProblem ridge = polyproj::build_problem(rs);
    BuiltProblem moved = ridge.with_parameter(2.5);
    rs.lambda = 2.5;
    BuiltProblem fresh = polyproj::build_problem(rs);
    CHECK((moved.fit(y).theta_hat - fresh.fit(y).theta_hat).lpNorm<Eigen::Infinity>() < 1e-8);

    // Dropping the penalty to zero swaps in the plain regression objective.
    BuiltProblem zeroed = ridge.with_parameter(0.0);
    const auto& lift = std::get<LiftedSystem>(zeroed.system);
    CHECK(std::holds_alternative<polyproj::NoPerturbation>(lift.perturbation));

    ProblemSpec ls;
    ls.kind = ProblemKind::lasso;
    ls.data = {X, y, 1.0};
    ls.tau = 0.2;
    BuiltProblem lasso = polyproj::build_problem(ls);
    BuiltProblem lasso2 = lasso.with_parameter(0.9);
    ls.tau = 0.9;
    BuiltProblem lasso_fresh = polyproj::build_problem(ls);
    CHECK((lasso2.fit(y).theta_hat - lasso_fresh.fit(y).theta_hat).lpNorm<Eigen::Infinity>() <
          1e-7);

    ProblemSpec is;
    is.kind = ProblemKind::bounded_isotonic_poset;
    Matrix one_d(5, 1);
    one_d << 0, 1, 2, 3, 4;
    Vector yi(5);
    yi << 0.5, 0.5, 1.2, 1.2, 1.5;
    is.data = {one_d, yi, 1.0};
    BuiltProblem iso = polyproj::build_problem(is); // lambda defaults to infinity
    CHECK(std::isinf(iso.parameter));
    BuiltProblem capped = iso.with_parameter(0.4);
    const auto& iso_sys = std::get<BoundedIsotonicSystem>(capped.system);
    CHECK(iso_sys.lambda == 0.4);
    CHECK(capped.row_labels.size() > iso.row_labels.size());
    FitResult direct = polyproj::fit_bounded(iso_sys, yi);
    CHECK((capped.fit(yi).theta_hat - direct.theta_hat).lpNorm<Eigen::Infinity>() < 1e-9);

    ProblemSpec cs;
    cs.kind = ProblemKind::multivariate_convex;
    cs.data = {X, y, 1.0};
    CHECK_FALSE(polyproj::build_problem(cs).tunable());
    CHECK_THROWS_AS(polyproj::build_problem(cs).with_parameter(1.0), std::invalid_argument);
}

TEST_CASE("build_problem validates inputs", "[problems]") {
    Vector y(4);
    y << 1, 2, 3, 4;
    Matrix two_col(4, 2);
    two_col.setRandom();

    ProblemSpec s;
    s.kind = ProblemKind::univariate_convex;
    s.data = {two_col, y, 1.0};
    CHECK_THROWS_AS(polyproj::build_problem(s), std::invalid_argument);

    s.kind = ProblemKind::lasso;
    s.tau = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(polyproj::build_problem(s), std::invalid_argument);

    s.kind = ProblemKind::bounded_isotonic_poset;
    s.has_order = true;
    s.order = PartialOrder::chain(3); // wrong size for n = 4
    CHECK_THROWS_AS(polyproj::build_problem(s), std::invalid_argument);
}
