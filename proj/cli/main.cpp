/**
 * @file main.cpp
 * @brief Command-line driver with fit, df, sure-tune, and experiment
 *        subcommands over CSV/JSON inputs.
 *
 * All outputs are deterministic functions of the inputs and the seed: CSVs
 * are written with round-trip-exact doubles by a single writer thread, and
 * replication streams are counter-based, so reruns (at any --threads count)
 * produce byte-identical files.
 */
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include <polyproj/divergence.hpp>
#include <polyproj/io.hpp>
#include <polyproj/problems.hpp>
#include <polyproj/rng.hpp>
#include <polyproj/solver.hpp>
#include <polyproj/sure.hpp>

using nlohmann::json;
using namespace polyproj;

namespace {

constexpr int kSchemaVersion = 1;
constexpr const char* kVersion = "0.1.0";

constexpr int kExitConfigError = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitUnbounded = 4;
constexpr int kExitNoConvergence = 5;

/// User-facing input problem: bad flags, files, or validation failures.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::string data_path;
    std::string edges_path;
    std::string penalty_path;
    std::string grid_spec;
    double sigma = std::numeric_limits<double>::quiet_NaN();
    int reps = 0;
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string out_dir = ".";
    int threads = 0;
    bool bit_repro = false;
};

void add_common_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--config", opt.config_path, "problem description JSON");
    cmd->add_option("--data", opt.data_path, "dataset CSV with columns x_1..x_d,y")
        ->required();
    cmd->add_option("--edges", opt.edges_path, "partial order edge CSV with columns i,j");
    cmd->add_option("--penalty", opt.penalty_path, "penalty matrix CSV (generalized lasso)");
    cmd->add_option("--lambda-grid", opt.grid_spec,
                    "grid: comma list '0.1,0.5,2' or log-spaced 'lo:hi:k'");
    cmd->add_option("--sigma", opt.sigma, "noise standard deviation");
    cmd->add_option("--reps", opt.reps, "Monte Carlo replications");
    cmd->add_option("--seed", opt.seed, "master seed for random streams")
        ->each([&opt](const std::string&) { opt.has_seed = true; });
    cmd->add_option("--out", opt.out_dir, "output directory (created if missing)");
    cmd->add_option("--threads", opt.threads, "worker pool size (default: logical cores)");
    cmd->add_flag("--bit-repro", opt.bit_repro,
                  "single-threaded bit-reproducible mode (outputs are byte-stable "
                  "either way; this pins the pool size to 1)");
}

json load_config(const Options& opt) {
    if (opt.config_path.empty()) return json::object();
    std::ifstream in(opt.config_path);
    if (!in) throw ConfigError("cannot open config: " + opt.config_path);
    json cfg;
    try {
        in >> cfg;
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    if (!cfg.is_object()) throw ConfigError("config root must be a JSON object");
    return cfg;
}

SolverConfig solver_from_config(const json& cfg) {
    SolverConfig sc;
    if (!cfg.contains("solver")) return sc;
    const json& s = cfg.at("solver");
    if (s.contains("max_iterations")) sc.max_iterations = s.at("max_iterations").get<int>();
    if (s.contains("primal_tol")) sc.primal_tol = s.at("primal_tol").get<double>();
    if (s.contains("dual_tol")) sc.dual_tol = s.at("dual_tol").get<double>();
    if (s.contains("method")) {
        const std::string m = s.at("method").get<std::string>();
        if (m == "interior_point")
            sc.method = SolveMethod::interior_point;
        else if (m == "active_set")
            sc.method = SolveMethod::active_set;
        else if (m == "operator_splitting_with_polish")
            sc.method = SolveMethod::operator_splitting_with_polish;
        else
            throw ConfigError("unknown solver method: " + m);
    }
    try {
        sc.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return sc;
}

struct LoadedProblem {
    ProblemSpec spec;
    BuiltProblem built;
    Dataset data;
    SolverConfig solver;
    json config;
};

LoadedProblem load_problem(const Options& opt) {
    LoadedProblem lp;
    lp.config = load_config(opt);
    if (!lp.config.contains("problem"))
        throw ConfigError("config must name a \"problem\" kind");

    try {
        lp.spec.kind = problem_kind_from_string(lp.config.at("problem").get<std::string>());

        DatasetCsv d = read_dataset_csv(opt.data_path);
        lp.data.X = std::move(d.X);
        lp.data.y = std::move(d.y);

        if (lp.config.contains("lambda")) lp.spec.lambda = lp.config.at("lambda").get<double>();
        if (lp.config.contains("tau")) lp.spec.tau = lp.config.at("tau").get<double>();

        double sigma = std::numeric_limits<double>::quiet_NaN();
        if (lp.config.contains("sigma")) sigma = lp.config.at("sigma").get<double>();
        if (!std::isnan(opt.sigma)) sigma = opt.sigma; // flag wins over config
        lp.data.sigma = std::isnan(sigma) ? 0.0 : sigma;

        if (!opt.edges_path.empty()) {
            lp.spec.order.n = static_cast<int>(lp.data.y.size());
            lp.spec.order.edges = read_edges_csv(opt.edges_path);
            lp.spec.order.validate();
            lp.spec.has_order = true;
        }
        if (!opt.penalty_path.empty()) lp.spec.D = read_matrix_csv(opt.penalty_path);

        lp.spec.data = lp.data;
        lp.solver = solver_from_config(lp.config);
        lp.built = build_problem(lp.spec);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return lp;
}

std::vector<double> resolve_grid(const Options& opt, const BuiltProblem& bp, const Vector& y) {
    if (opt.grid_spec.empty()) return default_grid(bp, y);
    try {
        if (opt.grid_spec.find(':') != std::string::npos) {
            double lo = 0, hi = 0;
            int k = 0;
            if (std::sscanf(opt.grid_spec.c_str(), "%lf:%lf:%d", &lo, &hi, &k) != 3)
                throw ConfigError("grid spec must be lo:hi:k");
            return log_spaced_grid(lo, hi, k);
        }
        std::vector<double> g;
        std::stringstream ss(opt.grid_spec);
        std::string field;
        while (std::getline(ss, field, ',')) g.push_back(std::stod(field));
        if (g.empty()) throw ConfigError("empty grid");
        return g;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("bad --lambda-grid: ") + e.what());
    }
}

int resolve_threads(const Options& opt) {
    if (opt.bit_repro) return 1;
    if (opt.threads > 0) return opt.threads;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

double require_sigma(const LoadedProblem& lp) {
    if (!(lp.data.sigma > 0))
        throw ConfigError("a positive --sigma (or config sigma) is required");
    return lp.data.sigma;
}

std::filesystem::path out_path(const Options& opt, const char* name) {
    std::filesystem::create_directories(opt.out_dir);
    return std::filesystem::path(opt.out_dir) / name;
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

int status_exit_code(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return 0;
        case SolveStatus::infeasible: return kExitInfeasible;
        case SolveStatus::unbounded: return kExitUnbounded;
        case SolveStatus::max_iter: return kExitNoConvergence;
    }
    return kExitNoConvergence;
}

/// Signed slack of every constraint row at the fit (nonnegative = satisfied).
Vector row_slacks(const BuiltProblem& bp, const FitResult& fit) {
    if (const auto* plain = std::get_if<ConstraintSystem>(&bp.system))
        return plain->b - plain->A * fit.theta_hat;
    if (const auto* lift = std::get_if<LiftedSystem>(&bp.system))
        return lift->c - lift->A * (*fit.xi_hat) - lift->B * fit.theta_hat;
    ConstraintSystem sys = std::get<BoundedIsotonicSystem>(bp.system).to_constraints();
    return sys.b - sys.A * fit.theta_hat;
}

bool is_pointwise_convex_kind(ProblemKind k) {
    return k == ProblemKind::multivariate_convex || k == ProblemKind::penalized_convex;
}

bool is_coefficient_kind(ProblemKind k) {
    return k == ProblemKind::linear_regression || k == ProblemKind::ridge ||
           k == ProblemKind::lasso || k == ProblemKind::generalized_lasso;
}

json kkt_json(const KktResiduals& kkt) {
    return json{{"stationarity", kkt.stationarity},
                {"primal_feasibility", kkt.primal_feasibility},
                {"complementary_slackness", kkt.complementary_slackness},
                {"dual_negativity", kkt.dual_negativity}};
}

json run_header(const Options& opt, const LoadedProblem& lp, const char* command) {
    json j{{"schema_version", kSchemaVersion},
           {"version", kVersion},
           {"command", command},
           {"problem", to_string(lp.spec.kind)},
           {"n", lp.data.y.size()},
           {"d", lp.data.X.cols()}};
    if (opt.has_seed) j["seed"] = opt.seed;
    return j;
}

// ----------------------------------------------------------------------------
// fit
// ----------------------------------------------------------------------------

int cmd_fit(const Options& opt) {
    LoadedProblem lp = load_problem(opt);
    FitResult fit = lp.built.fit(lp.data.y, lp.solver);

    json run = run_header(opt, lp, "fit");
    run["status"] = to_string(fit.status);
    run["objective"] = fit.objective;
    run["iterations"] = fit.iterations;
    run["kkt"] = kkt_json(fit.kkt);
    run["tolerances"] = {{"max_iterations", lp.solver.max_iterations},
                         {"primal_tol", lp.solver.primal_tol},
                         {"dual_tol", lp.solver.dual_tol},
                         {"active_tolerance", fit.active.tolerance_used}};
    run["near_degenerate"] = fit.active.near_degenerate;
    if (!std::isnan(lp.built.parameter)) run["parameter"] = lp.built.parameter;
    write_json(out_path(opt, "run.json"), run);

    if (fit.status != SolveStatus::optimal) {
        std::fprintf(stderr, "fit: %s\n", to_string(fit.status));
        return status_exit_code(fit.status);
    }

    const Eigen::Index n = lp.data.y.size();
    const bool gradient_blocks = is_pointwise_convex_kind(lp.spec.kind) && fit.xi_hat;
    const Eigen::Index d = gradient_blocks ? lp.data.X.cols() : 0;
    {
        std::vector<std::string> header = {"index", "y", "theta_hat"};
        for (Eigen::Index j = 0; j < d; ++j) header.push_back("xi_" + std::to_string(j + 1));
        CsvWriter csv(out_path(opt, "fit.csv").string(), header);
        for (Eigen::Index i = 0; i < n; ++i) {
            std::vector<std::string> row = {std::to_string(i), format_double(lp.data.y(i)),
                                            format_double(fit.theta_hat(i))};
            for (Eigen::Index j = 0; j < d; ++j)
                row.push_back(format_double((*fit.xi_hat)(i * d + j)));
            csv.row(row);
        }
    }
    if (is_coefficient_kind(lp.spec.kind) && fit.xi_hat) {
        CsvWriter csv(out_path(opt, "coefficients.csv").string(), {"name", "value"});
        const Eigen::Index dcols = lp.data.X.cols();
        for (Eigen::Index j = 0; j < fit.xi_hat->size(); ++j) {
            const std::string name = j < dcols ? "beta_" + std::to_string(j)
                                               : "gamma_" + std::to_string(j - dcols);
            csv.row({name, format_double((*fit.xi_hat)(j))});
        }
    }
    {
        Vector slack = row_slacks(lp.built, fit);
        CsvWriter csv(out_path(opt, "active_set.csv").string(), {"row", "label", "slack"});
        for (Eigen::Index idx : fit.active.indices)
            csv.row({std::to_string(idx), lp.built.row_labels[static_cast<std::size_t>(idx)],
                     format_double(slack(idx))});
    }
    return 0;
}

// ----------------------------------------------------------------------------
// df
// ----------------------------------------------------------------------------

int cmd_df(const Options& opt) {
    LoadedProblem lp = load_problem(opt);
    if (opt.reps > 0 && !opt.has_seed)
        throw ConfigError("--seed is required when --reps requests Monte Carlo");

    FitResult fit = lp.built.fit(lp.data.y, lp.solver);
    if (fit.status != SolveStatus::optimal) {
        std::fprintf(stderr, "df: fit failed (%s)\n", to_string(fit.status));
        return status_exit_code(fit.status);
    }

    DivergenceReport formula = divergence_formula(lp.built, fit);
    json flags = json::array();
    if (formula.near_degenerate) flags.push_back("near_degenerate_formula");

    json out = run_header(opt, lp, "df");
    out["formula"] = {{"value", formula.value},
                      {"method", to_string(formula.method)},
                      {"near_degenerate", formula.near_degenerate}};

    FdOptions fd_opts;
    if (opt.has_seed) fd_opts.seed = opt.seed;
    auto fd_fit = [&](const Vector& z) { return lp.built.fit(z, lp.solver); };
    DivergenceReport fd = finite_difference_divergence(fd_fit, lp.data.y, fd_opts);
    json fd_json{{"ok", fd.ok}, {"retries", fd.retries}};
    if (fd.ok)
        fd_json["value"] = fd.value;
    else {
        fd_json["note"] = fd.note;
        flags.push_back("fd_failed");
    }
    out["finite_difference"] = fd_json;

    if (opt.reps > 0) {
        const double sigma = require_sigma(lp);
        auto point_fit = [&](const Vector& z) { return lp.built.fit(z, lp.solver).theta_hat; };
        DivergenceReport mc =
            monte_carlo_df(lp.data.y, sigma, point_fit, opt.reps, opt.seed);
        out["monte_carlo"] = {{"value", mc.value}, {"se", mc.se}, {"reps", opt.reps}};
    }
    out["flags"] = flags;
    write_json(out_path(opt, "df.json"), out);
    return 0;
}

// ----------------------------------------------------------------------------
// sure-tune
// ----------------------------------------------------------------------------

void write_curve_csv(const std::filesystem::path& path, const SureCurve& curve, bool with_risk) {
    std::vector<std::string> header = {"lambda", "rss", "df", "sure"};
    if (with_risk) header.push_back("risk");
    header.push_back("near_degenerate");
    CsvWriter csv(path.string(), header);
    for (const auto& rec : curve.records) {
        std::vector<std::string> row = {format_double(rec.lambda), format_double(rec.rss),
                                        format_double(rec.divergence), format_double(rec.sure)};
        if (with_risk) row.push_back(format_double(rec.risk));
        row.push_back(rec.near_degenerate ? "1" : "0");
        csv.row(row);
    }
}

int cmd_sure_tune(const Options& opt) {
    LoadedProblem lp = load_problem(opt);
    const double sigma = require_sigma(lp);
    if (!lp.built.tunable())
        throw ConfigError(std::string("problem kind has no tuning knob: ") +
                          to_string(lp.spec.kind));
    const std::vector<double> grid = resolve_grid(opt, lp.built, lp.data.y);

    json summary = run_header(opt, lp, "sure-tune");
    summary["sigma"] = sigma;
    summary["grid_size"] = grid.size();
    try {
        SureCurve curve = tune(lp.built, lp.data.y, grid, sigma, lp.solver);
        write_curve_csv(out_path(opt, "sure_curve.csv"), curve, false);
        const auto& best = curve.records[static_cast<std::size_t>(curve.hat_index)];
        summary["lambda_hat"] = curve.lambda_hat();
        summary["hat_index"] = curve.hat_index;
        summary["sure_min"] = best.sure;
        summary["df_at_hat"] = best.divergence;
        summary["rss_at_hat"] = best.rss;
        write_json(out_path(opt, "summary.json"), summary);
        return 0;
    } catch (const TuneError& err) {
        write_curve_csv(out_path(opt, "sure_curve.csv"), err.partial_curve, false);
        summary["error"] = err.what();
        summary["completed_points"] = err.partial_curve.records.size();
        write_json(out_path(opt, "summary.json"), summary);
        std::fprintf(stderr, "sure-tune: %s\n", err.what());
        return kExitNoConvergence;
    }
}

// ----------------------------------------------------------------------------
// experiment
// ----------------------------------------------------------------------------

json summary_json(const RatioSummary& s) {
    return json{{"mean", s.mean}, {"sd", s.sd}, {"q10", s.q10}, {"median", s.median},
                {"q90", s.q90}};
}

int cmd_experiment(const Options& opt) {
    LoadedProblem lp = load_problem(opt);
    const double sigma = require_sigma(lp);
    if (!opt.has_seed) throw ConfigError("--seed is required for experiment");
    if (!lp.built.tunable())
        throw ConfigError(std::string("problem kind has no tuning knob: ") +
                          to_string(lp.spec.kind));

    ExperimentConfig cfg;
    cfg.problem = lp.built;
    cfg.sigma = sigma;
    cfg.reps = opt.reps > 0 ? opt.reps : 50;
    cfg.seed = opt.seed;
    cfg.solver = lp.solver;
    cfg.threads = resolve_threads(opt);

    // The data file's y column is the true mean; a config theta_star overrides.
    cfg.theta_star = lp.data.y;
    if (lp.config.contains("theta_star")) {
        const auto values = lp.config.at("theta_star").get<std::vector<double>>();
        if (values.size() != static_cast<std::size_t>(lp.data.y.size()))
            throw ConfigError("theta_star length != n");
        cfg.theta_star = Eigen::Map<const Vector>(values.data(),
                                                  static_cast<Eigen::Index>(values.size()));
    }
    cfg.grid = resolve_grid(opt, lp.built, cfg.theta_star);

    json summary = run_header(opt, lp, "experiment");
    summary["sigma"] = sigma;
    summary["reps"] = cfg.reps;
    summary["threads"] = cfg.threads;
    summary["grid"] = cfg.grid;

    try {
        ExperimentResult res = ratio_experiment(cfg);
        std::vector<DfCompareRow> df_rows = df_compare_experiment(cfg);

        {
            CsvWriter csv(out_path(opt, "ratios.csv").string(),
                          {"replication", "sure_ratio", "reference_ratio"});
            for (std::size_t r = 0; r < res.sure_ratio.size(); ++r)
                csv.row({std::to_string(r + 1), format_double(res.sure_ratio[r]),
                         format_double(res.reference_ratio[r])});
        }
        {
            CsvWriter csv(out_path(opt, "curves.csv").string(),
                          {"replication", "lambda", "rss", "df", "sure", "risk"});
            for (std::size_t r = 0; r < res.curves.size(); ++r)
                for (const auto& rec : res.curves[r].records)
                    csv.row({std::to_string(r + 1), format_double(rec.lambda),
                             format_double(rec.rss), format_double(rec.divergence),
                             format_double(rec.sure), format_double(rec.risk)});
        }
        {
            CsvWriter csv(out_path(opt, "df_compare.csv").string(),
                          {"lambda", "formula_df", "mc_df", "mc_se"});
            for (const auto& row : df_rows)
                csv.row({format_double(row.lambda), format_double(row.mean_formula_df),
                         format_double(row.mc_df), format_double(row.mc_se)});
        }

        summary["sure_ratio"] = summary_json(res.sure_summary);
        summary["reference_ratio"] = summary_json(res.reference_summary);
        json unbiased = json::array();
        for (std::size_t k = 0; k < cfg.grid.size(); ++k)
            unbiased.push_back({{"lambda", cfg.grid[k]},
                                {"mean_sure", res.mean_sure[k]},
                                {"mean_risk", res.mean_risk[k]},
                                {"diff_se", res.diff_se[k]}});
        summary["unbiasedness"] = unbiased;
        write_json(out_path(opt, "summary.json"), summary);
        return 0;
    } catch (const TuneError& err) {
        summary["error"] = err.what();
        write_json(out_path(opt, "summary.json"), summary);
        std::fprintf(stderr, "experiment: %s\n", err.what());
        return kExitNoConvergence;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"shape-restricted and penalized regression via polyhedral projection"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    Options opt;
    CLI::App* fit = app.add_subcommand("fit", "project the data onto the constraint set");
    CLI::App* df = app.add_subcommand("df", "degrees of freedom of the fit at the data");
    CLI::App* tune_cmd =
        app.add_subcommand("sure-tune", "select the penalty by unbiased risk estimation");
    CLI::App* experiment =
        app.add_subcommand("experiment", "replicated risk-ratio and df comparison study");
    for (CLI::App* cmd : {fit, df, tune_cmd, experiment}) add_common_options(cmd, opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kExitConfigError;
    }

    try {
        if (fit->parsed()) return cmd_fit(opt);
        if (df->parsed()) return cmd_df(opt);
        if (tune_cmd->parsed()) return cmd_sure_tune(opt);
        return cmd_experiment(opt);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfigError;
    }
}
