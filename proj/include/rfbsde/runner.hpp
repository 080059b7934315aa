#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfbsde/analysis.hpp"
#include "rfbsde/backward.hpp"
#include "rfbsde/config.hpp"
#include "rfbsde/forward.hpp"
#include "rfbsde/geometry.hpp"
#include "rfbsde/paths.hpp"
#include "rfbsde/problem.hpp"

namespace rfbsde {

struct ResolvedExperiment {
    Problem problem;
    bool has_coefficients = true;
    ConvexDomain domain = ConvexDomain::interval();
    TimeGrid grid{1.0, 1, 0.0};
    InitialCondition init;
    std::string out_dir = "out";

    ResolvedExperiment() : init(InitialCondition::at_point(TimeGrid(1.0, 1, 0.0), VectorXd::Zero(1))) {}
};

struct OpResult {
    std::string kind;
    std::vector<std::string> files;
    double wall_ms = 0.0;
    std::vector<std::string> warnings;
};

struct RunReport {
    nlohmann::json resolved_config;
    std::vector<OpResult> operations;
    std::vector<std::string> warnings;
};

namespace runner_detail {

inline AssumptionParams apply_assumption_overrides(AssumptionParams base, const ExperimentConfig& config) {
    if (!config.sections.count("assumptions")) return base;
    const auto& kv = config.sections.at("assumptions");
    check_keys(kv, {"L", "Ltilde", "M", "Mtilde", "p", "beta", "L1", "L1tilde", "rho_delay",
                    "rho_tilde_delay"},
               "[assumptions]");
    auto num = [&](const char* key, double fallback) {
        const auto it = kv.find(key);
        return it == kv.end() ? fallback : cfg::to_double(it->second, std::string("assumptions.") + key);
    };
    base.lipschitz = num("L", base.lipschitz);
    base.lipschitz_boundary = num("Ltilde", base.lipschitz_boundary);
    base.growth = num("M", base.growth);
    base.growth_boundary = num("Mtilde", base.growth_boundary);
    base.growth_power = num("p", base.growth_power);
    base.beta = num("beta", base.beta);
    if (kv.count("L1")) base.delay_bound_f = DelayBound(num("L1", 0.0));
    if (kv.count("L1tilde")) base.delay_bound_g = DelayBound(num("L1tilde", 0.0));
    auto measure = [&](const char* key, DelayMeasure fallback) {
        const auto it = kv.find(key);
        if (it == kv.end()) return fallback;
        if (it->second == "point0") return DelayMeasure::point_at_zero;
        if (it->second == "point-delta") return DelayMeasure::point_at_minus_delta;
        if (it->second == "uniform") return DelayMeasure::uniform;
        throw ConfigError("unknown delay measure '" + it->second + "'");
    };
    base.delay_measure_f = measure("rho_delay", base.delay_measure_f);
    base.delay_measure_g = measure("rho_tilde_delay", base.delay_measure_g);
    return base;
}

}  // namespace runner_detail

/// Turn a parsed config into typed problem/domain/grid/init objects,
/// rejecting unknown keys along the way.
inline ResolvedExperiment resolve_experiment(const ExperimentConfig& config) {
    ResolvedExperiment exp;

    // [grid]
    if (!config.sections.count("grid")) throw ConfigError("missing [grid] section");
    check_keys(config.sections.at("grid"), {"horizon", "steps", "delay"}, "[grid]");
    const double horizon = cfg::to_double(config.get("grid", "horizon", ""), "grid.horizon");
    const int steps = static_cast<int>(cfg::to_int(config.get("grid", "steps", ""), "grid.steps"));
    const double delay = config.has("grid", "delay") ? cfg::to_double(config.get("grid", "delay"), "grid.delay") : 0.0;
    try {
        exp.grid = TimeGrid(horizon, steps, delay);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[grid]: ") + e.what());
    }

    // [domain]
    check_keys(config.sections.count("domain") ? config.sections.at("domain")
                                               : std::map<std::string, std::string>{},
               {"id", "dimension"}, "[domain]");
    const std::string domain_id = config.get("domain", "id", "interval");
    const int dim = config.has("domain", "dimension")
                        ? static_cast<int>(cfg::to_int(config.get("domain", "dimension"), "domain.dimension"))
                        : 1;
    if (domain_id == "interval") {
        if (dim != 1) throw ConfigError("the interval domain is one-dimensional");
        exp.domain = ConvexDomain::interval();
    } else if (domain_id == "ball") {
        exp.domain = ConvexDomain::ball(dim);
    } else {
        throw ConfigError("unknown domain id '" + domain_id + "' (interval | ball)");
    }

    // [problem]
    if (!config.sections.count("problem")) throw ConfigError("missing [problem] section");
    check_keys(config.sections.at("problem"), {"name", "a", "lambda"}, "[problem]");
    const std::string pname = config.get("problem", "name", "");
    if (pname == "heat-neumann") {
        exp.problem = make_heat_neumann();
    } else if (pname == "manufactured-neumann") {
        const double lambda = config.has("problem", "lambda")
                                  ? cfg::to_double(config.get("problem", "lambda"), "problem.lambda")
                                  : 1.0;
        exp.problem = make_manufactured_neumann(exp.grid.horizon(), lambda);
    } else if (pname == "linear-delay") {
        const double a = config.has("problem", "a") ? cfg::to_double(config.get("problem", "a"), "problem.a") : 0.5;
        exp.problem = make_linear_delay(a);
    } else if (pname == "constants") {
        exp.problem.name = "constants";
        exp.has_coefficients = false;
    } else {
        throw ConfigError("unknown problem name '" + pname +
                          "' (heat-neumann | manufactured-neumann | linear-delay | constants)");
    }
    exp.problem.assumptions = runner_detail::apply_assumption_overrides(exp.problem.assumptions, config);
    if (exp.has_coefficients && exp.problem.coefficients.state_dim != exp.domain.dimension()) {
        throw ConfigError("problem dimension does not match the domain dimension");
    }

    // [init]
    check_keys(config.sections.count("init") ? config.sections.at("init")
                                             : std::map<std::string, std::string>{},
               {"kind", "value", "from", "to", "csv", "start_step"}, "[init]");
    const std::string kind = config.get("init", "kind", "constant");
    const int start_step = config.has("init", "start_step")
                               ? static_cast<int>(cfg::to_int(config.get("init", "start_step"), "init.start_step"))
                               : 0;
    const int d = exp.domain.dimension();
    auto to_point = [&](const std::string& raw, const char* where) {
        const auto vals = cfg::to_doubles(raw, where);
        if (static_cast<int>(vals.size()) != d) throw ConfigError(std::string(where) + ": expected " + std::to_string(d) + " components");
        return Eigen::Map<const VectorXd>(vals.data(), d).eval();
    };
    try {
        if (kind == "constant") {
            const VectorXd x0 = config.has("init", "value") ? to_point(config.get("init", "value"), "init.value")
                                                            : VectorXd::Zero(d);
            exp.init = InitialCondition::at_point(exp.grid, x0, start_step);
        } else if (kind == "ramp") {
            const VectorXd from = to_point(config.get("init", "from", ""), "init.from");
            const VectorXd to = to_point(config.get("init", "to", ""), "init.to");
            exp.init = InitialCondition::ramp(exp.grid, from, to, start_step);
        } else if (kind == "csv") {
            const std::string path = config.get("init", "csv", "");
            std::ifstream in(path);
            if (!in) throw ConfigError("cannot read initial-condition CSV: " + path);
            SamplePath phi = read_csv(exp.grid, d, in);
            SamplePath varphi(exp.grid, d);
            exp.init = InitialCondition(start_step, std::move(phi), std::move(varphi));
        } else {
            throw ConfigError("unknown init kind '" + kind + "' (constant | ramp | csv)");
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[init]: ") + e.what());
    }
    if (exp.has_coefficients) {
        for (int k = 0; k <= exp.init.start; ++k) {
            if (!exp.domain.contains(exp.init.state.value(k), 1e-12)) {
                throw ConfigError("[init]: state history leaves the closed domain");
            }
        }
    }

    // [output]
    check_keys(config.sections.count("output") ? config.sections.at("output")
                                               : std::map<std::string, std::string>{},
               {"directory"}, "[output]");
    exp.out_dir = config.get("output", "directory", "out");

    // only known sections may appear
    for (const auto& [name, kv] : config.sections) {
        static const std::set<std::string> known{"problem", "domain", "grid", "init", "output",
                                                 "assumptions", "validate"};
        if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");
    }
    return exp;
}

namespace runner_detail {

inline nlohmann::json config_echo(const ExperimentConfig& config) {
    nlohmann::json echo;
    for (const auto& [name, kv] : config.sections) {
        for (const auto& [k, v] : kv) echo[name][k] = v;
    }
    echo["ops"] = nlohmann::json::array();
    for (const auto& op : config.ops) {
        nlohmann::json j{{"kind", op.kind}};
        for (const auto& [k, v] : op.params) j[k] = v;
        echo["ops"].push_back(j);
    }
    return echo;
}

/// Comment header embedded in every CSV so a report reproduces its run.
inline void write_echo_header(std::ostream& out, const ExperimentConfig& config, const OpSpec& op) {
    for (const auto& [name, kv] : config.sections) {
        for (const auto& [k, v] : kv) out << "# " << name << '.' << k << " = " << v << "\n";
    }
    out << "# op = " << op.kind << "\n";
    for (const auto& [k, v] : op.params) out << "# op." << op.kind << '.' << k << " = " << v << "\n";
}

struct OpContext {
    const ExperimentConfig& config;
    const ResolvedExperiment& exp;
    const OpSpec& op;
    std::filesystem::path dir;
    int threads;
    OpResult* result;

    std::string require_param(const std::string& key) const {
        const auto it = op.params.find(key);
        if (it == op.params.end()) {
            throw ConfigError("op '" + op.kind + "' is missing required key '" + key + "'");
        }
        return it->second;
    }
    std::string param(const std::string& key, const std::string& fallback) const {
        const auto it = op.params.find(key);
        return it == op.params.end() ? fallback : it->second;
    }
    int samples() const { return static_cast<int>(cfg::to_int(require_param("samples"), op.kind + ".samples")); }
    std::uint64_t seed() const {
        return static_cast<std::uint64_t>(cfg::to_int(require_param("seed"), op.kind + ".seed"));
    }
    RegressionBasis basis() const {
        return make_basis(param("basis", "poly2-state"), exp.domain.dimension());
    }
    PicardConfig picard() const {
        PicardConfig p;
        p.max_iterations = static_cast<int>(cfg::to_int(param("picard_max_iterations", "20"), "picard_max_iterations"));
        p.tolerance = cfg::to_double(param("picard_tolerance", "1e-6"), "picard_tolerance");
        p.damping = cfg::to_double(param("picard_damping", "1"), "picard_damping");
        p.validate();
        return p;
    }
    std::ofstream open(const std::string& filename) const {
        const auto path = dir / filename;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot write output file: " + path.string());
        result->files.push_back(filename);
        return out;
    }
    void require_coefficients() const {
        if (!exp.has_coefficients) {
            throw ConfigError("op '" + op.kind + "' needs a coefficient problem, not 'constants'");
        }
    }
    void collect(const std::vector<std::string>& warnings) const {
        result->warnings.insert(result->warnings.end(), warnings.begin(), warnings.end());
    }
};

inline void op_evaluate_u(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed", "basis", "picard_max_iterations", "picard_tolerance",
                               "picard_damping", "points"},
               "[op.evaluate-u]");
    auto out = ctx.open("evaluate_u.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "start,t,value,standard_error,samples\n";
    std::vector<InitialCondition> inits;
    std::vector<std::string> labels;
    if (ctx.op.params.count("points")) {
        if (ctx.exp.domain.dimension() != 1) throw ConfigError("evaluate-u points list needs a 1-d domain");
        for (const double x : cfg::to_doubles(ctx.op.params.at("points"), "points")) {
            inits.push_back(InitialCondition::at_point(ctx.exp.grid, VectorXd::Constant(1, x), ctx.exp.init.start));
            labels.push_back(format_double(x));
        }
    } else {
        inits.push_back(ctx.exp.init);
        std::string label;
        for (int c = 0; c < ctx.exp.init.state.dim(); ++c) {
            if (c) label += ';';
            label += format_double(ctx.exp.init.state.value(ctx.exp.init.start)[c]);
        }
        labels.push_back(label);
    }
    for (std::size_t j = 0; j < inits.size(); ++j) {
        const ForwardEnsemble fwd = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, inits[j],
                                                     ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
        const BackwardEnsemble bwd =
            solve_backward(ctx.exp.problem.coefficients, fwd, ctx.basis(), ctx.picard(), ctx.threads);
        ctx.collect(fwd.warnings);
        ctx.collect(bwd.warnings);
        const VectorXd xi = pathwise_totals(ctx.exp.problem.coefficients, fwd, bwd, ctx.threads);
        out << labels[j] << ',' << format_double(inits[j].start_time()) << ','
            << format_double(bwd.value_at_start()) << ','
            << format_double(bootstrap_se(xi, 200, ctx.seed())) << ',' << ctx.samples() << "\n";
    }
}

inline void op_forward(const OpContext& ctx, bool penalized) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed", "format", "stiffness"},
               penalized ? "[op.penalized]" : "[op.forward]");
    ForwardEnsemble ens = [&] {
        if (penalized) {
            const double n = cfg::to_double(ctx.require_param("stiffness"), "stiffness");
            return simulate_penalized(ctx.exp.problem.coefficients, ctx.exp.domain,
                                      PenaltyField(ctx.exp.domain), n, ctx.exp.init, ctx.exp.grid,
                                      ctx.samples(), ctx.seed(), ctx.threads);
        }
        return simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init, ctx.exp.grid,
                                ctx.samples(), ctx.seed(), ctx.threads);
    }();
    ctx.collect(ens.warnings);
    const std::string base = penalized ? "penalized" : "forward";
    const std::string format = ctx.param("format", "csv");
    if (format != "csv" && format != "binary" && format != "both") {
        throw ConfigError("forward format must be csv, binary or both");
    }
    if (format == "csv" || format == "both") {
        auto out = ctx.open(base + ".csv");
        write_echo_header(out, ctx.config, ctx.op);
        write_csv(ens, out);
    }
    if (format == "binary" || format == "both") {
        auto out = ctx.open(base + ".bin");
        write_binary(ens, out);
    }
}

inline void op_backward(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed", "basis", "picard_max_iterations", "picard_tolerance",
                               "picard_damping"},
               "[op.backward]");
    const ForwardEnsemble fwd = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init,
                                                 ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
    const BackwardEnsemble bwd =
        solve_backward(ctx.exp.problem.coefficients, fwd, ctx.basis(), ctx.picard(), ctx.threads);
    ctx.collect(fwd.warnings);
    ctx.collect(bwd.warnings);
    {
        auto out = ctx.open("backward.csv");
        write_echo_header(out, ctx.config, ctx.op);
        write_csv(bwd, out);
    }
    {
        auto out = ctx.open("picard_log.jsonl");
        write_picard_log(bwd, out);
    }
}

inline void op_replay_tower(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"count", "seed"}, "[op.replay-tower]");
    const int count = static_cast<int>(cfg::to_int(ctx.param("count", "20"), "count"));
    const CounterRng rng(ctx.seed(), RngStream::probe);
    auto out = ctx.open("replay_tower.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "trial,restart_node,seed,discrepancy\n";
    for (int trial = 0; trial < count; ++trial) {
        const int span = ctx.exp.grid.steps() - ctx.exp.init.start;
        const int restart = ctx.exp.init.start +
                            static_cast<int>(rng.uniform(trial) * span) % std::max(1, span);
        const std::uint64_t run_seed = ctx.seed() + 1000 + static_cast<std::uint64_t>(trial);
        const double disc = replay_tower(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init,
                                         ctx.exp.grid, restart, run_seed);
        out << trial << ',' << restart << ',' << run_seed << ',' << format_double(disc) << "\n";
    }
}

inline void op_exp_moment(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"q", "samples", "seed"}, "[op.exp-moment]");
    const auto qs = cfg::to_doubles(ctx.require_param("q"), "q");
    const ForwardEnsemble ens = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init,
                                                 ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
    ctx.collect(ens.warnings);
    auto out = ctx.open("exp_moment.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "q,value,standard_error,samples\n";
    for (const double q : qs) {
        const auto m = exp_moment(ens, q);
        out << format_double(q) << ',' << format_double(m.value) << ',' << format_double(m.standard_error)
            << ',' << m.samples << "\n";
    }
}

inline void op_lipschitz_initial(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed", "p", "bump"}, "[op.lipschitz-initial]");
    const double p = cfg::to_double(ctx.param("p", "2"), "p");
    const double bump = cfg::to_double(ctx.param("bump", "0.1"), "bump");
    InitialCondition shifted = ctx.exp.init;
    for (int k = 0; k <= shifted.start; ++k) {
        VectorXd v = shifted.state.value(k);
        v[0] += bump;
        shifted.state.set_value(k, ctx.exp.domain.project(v).point);
    }
    const auto res = lipschitz_initial(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init, shifted,
                                       ctx.exp.grid, ctx.samples(), ctx.seed(), p, ctx.threads);
    auto out = ctx.open("lipschitz_initial.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "p,distance,ratio\n";
    out << format_double(p) << ',' << format_double(res.distance) << ',' << format_double(res.ratio) << "\n";
}

inline void op_local_time(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed"}, "[op.local-time]");
    const ForwardEnsemble ens = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init,
                                                 ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
    const double residual =
        local_time_identity(ens, ctx.exp.problem.coefficients, ctx.exp.domain, ctx.threads);
    auto out = ctx.open("local_time.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "samples,seed,mean_abs_residual\n";
    out << ctx.samples() << ',' << ctx.seed() << ',' << format_double(residual) << "\n";
}

inline void op_gradient(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"samples", "seed", "epsilon", "truncation", "stride", "basis",
                               "picard_max_iterations", "picard_tolerance", "picard_damping"},
               "[op.gradient]");
    const double eps = cfg::to_double(ctx.require_param("epsilon"), "epsilon");
    const double trunc = cfg::to_double(ctx.param("truncation", "10"), "truncation");
    const int stride = static_cast<int>(cfg::to_int(ctx.param("stride", "1"), "stride"));
    const ForwardEnsemble fwd = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain, ctx.exp.init,
                                                 ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
    const BackwardEnsemble bwd =
        solve_backward(ctx.exp.problem.coefficients, fwd, ctx.basis(), ctx.picard(), ctx.threads);
    ctx.collect(fwd.warnings);
    ctx.collect(bwd.warnings);
    const int me = static_cast<int>(std::lround(eps / ctx.exp.grid.dt()));
    std::vector<int> nodes;
    for (int s = ctx.exp.init.start; s + 2 * me <= ctx.exp.grid.steps(); s += stride) nodes.push_back(s);
    const GradientEstimate est =
        estimate_directional_gradient_values(fwd, bwd.y, eps, trunc, nodes, ctx.threads);
    auto out = ctx.open("gradient.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "node,time";
    for (int c = 0; c < fwd.noise_dim; ++c) out << ",zeta" << c << ",zeta_se" << c << ",z_mean" << c;
    out << "\n";
    for (std::size_t j = 0; j < est.nodes.size(); ++j) {
        const int s = est.nodes[j];
        out << s << ',' << format_double(ctx.exp.grid.node(s));
        for (int c = 0; c < fwd.noise_dim; ++c) {
            double zmean = 0.0;
            for (int i = 0; i < fwd.samples; ++i) zmean += bwd.z_at(i, s, c);
            zmean /= fwd.samples;
            out << ',' << format_double(est.zeta(static_cast<int>(j), c)) << ','
                << format_double(est.standard_error(static_cast<int>(j), c)) << ',' << format_double(zmean);
        }
        out << "\n";
    }
}

inline void op_penalization_sweep(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"stiffness", "samples", "seed", "basis", "picard_max_iterations",
                               "picard_tolerance", "picard_damping"},
               "[op.penalization-sweep]");
    const auto ns = cfg::to_doubles(ctx.require_param("stiffness"), "stiffness");
    const auto rows = penalization_sweep(ctx.exp.problem.coefficients, ctx.exp.domain,
                                         PenaltyField(ctx.exp.domain), ctx.exp.init, ctx.exp.grid, ns,
                                         ctx.samples(), ctx.seed(), ctx.basis(), ctx.picard(), ctx.threads);
    for (const auto& r : rows) {
        if (!r.warning.empty()) ctx.result->warnings.push_back(r.warning);
    }
    auto out = ctx.open("penalization_sweep.csv");
    write_echo_header(out, ctx.config, ctx.op);
    write_csv(rows, out);
}

inline void op_generator_check(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"functional", "s_steps", "samples", "seed"}, "[op.generator-check]");
    const std::string fname = ctx.param("functional", "cos-pi");
    CylinderFunctional f;
    if (fname == "cos-pi") {
        const double pi = std::numbers::pi;
        f.value = [pi](const VectorXd& x) { return std::cos(pi * x[0]); };
        f.gradient = [pi](const VectorXd& x) { return VectorXd::Constant(1, -pi * std::sin(pi * x[0])).eval(); };
        f.hessian = [pi](const VectorXd& x) { return MatrixXd::Constant(1, 1, -pi * pi * std::cos(pi * x[0])).eval(); };
    } else if (fname == "identity") {
        f.value = [](const VectorXd& x) { return x[0]; };
        f.gradient = [](const VectorXd& x) { return VectorXd::Unit(x.size(), 0).eval(); };
        f.hessian = [](const VectorXd& x) { return MatrixXd::Zero(x.size(), x.size()).eval(); };
    } else {
        throw ConfigError("unknown cylinder functional '" + fname + "' (cos-pi | identity)");
    }
    const auto s_nodes = cfg::to_ints(ctx.require_param("s_steps"), "s_steps");
    const auto rows = generator_check(ctx.exp.problem.coefficients, ctx.exp.domain, f, ctx.exp.init,
                                      ctx.exp.grid, s_nodes, ctx.samples(), ctx.seed(), ctx.threads);
    auto out = ctx.open("generator_check.csv");
    write_echo_header(out, ctx.config, ctx.op);
    write_csv(rows, out);
}

inline void op_mild_residual(const OpContext& ctx) {
    ctx.require_coefficients();
    check_keys(ctx.op.params, {"candidate", "samples", "seed", "basis", "picard_max_iterations",
                               "picard_tolerance", "picard_damping"},
               "[op.mild-residual]");
    const std::string candidate = ctx.param("candidate", "solver");
    FunctionalEstimate est;
    if (candidate == "solver") {
        const ForwardEnsemble fwd = simulate_forward(ctx.exp.problem.coefficients, ctx.exp.domain,
                                                     ctx.exp.init, ctx.exp.grid, ctx.samples(), ctx.seed(),
                                                     ctx.threads);
        const BackwardEnsemble bwd =
            solve_backward(ctx.exp.problem.coefficients, fwd, ctx.basis(), ctx.picard(), ctx.threads);
        ctx.collect(fwd.warnings);
        ctx.collect(bwd.warnings);
        est = mild_residual_self(ctx.exp.problem.coefficients, fwd, bwd, ctx.threads);
    } else if (candidate == "exact") {
        const double horizon = ctx.exp.grid.horizon();
        CandidateValueFn u_fn;
        CandidateGradientFn zeta_fn;
        if (ctx.exp.problem.name == "heat-neumann") {
            const double pi = std::numbers::pi;
            u_fn = [horizon, pi](int node, const PathPairView& p) {
                return std::exp(-pi * pi * (horizon - p.x.grid().node(node)) / 2.0) *
                       std::cos(pi * p.x.value(node)[0]);
            };
            zeta_fn = [horizon, pi](int node, const PathPairView& p, Eigen::Ref<VectorXd> z) {
                z[0] = -pi * std::exp(-pi * pi * (horizon - p.x.grid().node(node)) / 2.0) *
                       std::sin(pi * p.x.value(node)[0]);
            };
        } else if (ctx.exp.problem.name == "manufactured-neumann") {
            const double lambda = ctx.config.has("problem", "lambda")
                                      ? cfg::to_double(ctx.config.get("problem", "lambda"), "problem.lambda")
                                      : 1.0;
            u_fn = [horizon, lambda](int node, const PathPairView& p) {
                const double x = p.x.value(node)[0];
                return std::exp(-lambda * (horizon - p.x.grid().node(node))) * (x * x + x);
            };
            zeta_fn = [horizon, lambda](int node, const PathPairView& p, Eigen::Ref<VectorXd> z) {
                const double x = p.x.value(node)[0];
                z[0] = std::exp(-lambda * (horizon - p.x.grid().node(node))) * (2.0 * x + 1.0);
            };
        } else {
            throw ConfigError("no exact candidate is available for problem '" + ctx.exp.problem.name + "'");
        }
        est = mild_residual(ctx.exp.problem.coefficients, ctx.exp.domain, u_fn, zeta_fn, ctx.exp.init,
                            ctx.exp.grid, ctx.samples(), ctx.seed(), ctx.threads);
    } else {
        throw ConfigError("unknown mild-residual candidate '" + candidate + "' (solver | exact)");
    }
    auto out = ctx.open("mild_residual.csv");
    write_echo_header(out, ctx.config, ctx.op);
    out << "candidate,residual,standard_error,samples\n";
    out << candidate << ',' << format_double(est.value) << ',' << format_double(est.standard_error) << ','
        << est.samples << "\n";
}

inline void op_validate(const OpContext& ctx) {
    check_keys(ctx.op.params, {"probes", "seed"}, "[op.validate]");
    const int probes = static_cast<int>(cfg::to_int(ctx.param("probes", "200"), "probes"));
    nlohmann::json doc;
    const auto hrep = check_h1_h2(ctx.exp.problem.assumptions, ctx.exp.init.reflection,
                                  ctx.exp.grid.horizon());
    doc["h_check"] = {{"c_bound", hrep.c_bound}, {"h1_lhs", hrep.h1_lhs},   {"h2_lhs", hrep.h2_lhs},
                      {"pass_h1", hrep.pass_h1}, {"pass_h2", hrep.pass_h2}, {"pass", hrep.pass()}};
    if (!hrep.pass()) {
        ctx.result->warnings.push_back(
            "(H1)/(H2) failed on the probe path: the fixed-point contraction is not guaranteed");
    }
    if (ctx.exp.has_coefficients) {
        const auto lrep = validate_lipschitz(ctx.exp.problem.coefficients, ctx.exp.problem.assumptions,
                                             ctx.exp.domain, ctx.exp.grid, probes, ctx.seed(), ctx.threads);
        doc["lipschitz"] = {{"ratio_drift", lrep.ratio_drift},
                            {"ratio_diffusion", lrep.ratio_diffusion},
                            {"ratio_f_yz", lrep.ratio_f_yz},
                            {"ratio_f_delay", lrep.ratio_f_delay},
                            {"ratio_g_y", lrep.ratio_g_y},
                            {"ratio_g_delay", lrep.ratio_g_delay},
                            {"ratio_h_growth", lrep.ratio_h_growth},
                            {"ratio_f_growth", lrep.ratio_f_growth},
                            {"ratio_g_growth", lrep.ratio_g_growth},
                            {"non_anticipative", lrep.non_anticipative},
                            {"pass", lrep.pass},
                            {"failures", lrep.failures}};
        for (const auto& fail : lrep.failures) ctx.result->warnings.push_back("assumption check: " + fail);
    }
    auto out = ctx.open("assumptions.json");
    out << doc.dump(2) << "\n";
}

inline void dispatch(const OpContext& ctx) {
    const std::string& kind = ctx.op.kind;
    if (kind == "evaluate-u") {
        op_evaluate_u(ctx);
    } else if (kind == "forward") {
        op_forward(ctx, false);
    } else if (kind == "penalized") {
        op_forward(ctx, true);
    } else if (kind == "backward") {
        op_backward(ctx);
    } else if (kind == "replay-tower") {
        op_replay_tower(ctx);
    } else if (kind == "exp-moment") {
        op_exp_moment(ctx);
    } else if (kind == "lipschitz-initial") {
        op_lipschitz_initial(ctx);
    } else if (kind == "local-time") {
        op_local_time(ctx);
    } else if (kind == "gradient") {
        op_gradient(ctx);
    } else if (kind == "penalization-sweep") {
        op_penalization_sweep(ctx);
    } else if (kind == "generator-check") {
        op_generator_check(ctx);
    } else if (kind == "mild-residual") {
        op_mild_residual(ctx);
    } else if (kind == "validate") {
        op_validate(ctx);
    } else {
        throw ConfigError("unknown operation kind '" + kind + "'");
    }
}

}  // namespace runner_detail

/// Execute every operation of a config in order; one config = one report
/// directory. Returns the report; manifest.json (deterministic) and
/// report.json (with wall-clock timings) are written alongside the results.
inline RunReport run_experiment(const ExperimentConfig& config, const std::string& out_override = "",
                                int threads = 1) {
    const ResolvedExperiment exp = resolve_experiment(config);
    if (config.ops.empty()) throw ConfigError("config lists no operations");
    const std::filesystem::path dir = out_override.empty() ? exp.out_dir : out_override;
    std::filesystem::create_directories(dir);

    RunReport report;
    report.resolved_config = runner_detail::config_echo(config);
    for (const auto& op : config.ops) {
        OpResult result;
        result.kind = op.kind;
        const auto begin = std::chrono::steady_clock::now();
        runner_detail::OpContext ctx{config, exp, op, dir, threads, &result};
        try {
            runner_detail::dispatch(ctx);
        } catch (const ConfigError&) {
            throw;
        } catch (const NumericalError& e) {
            throw NumericalError("operation '" + op.kind + "': " + e.what());
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception& e) {
            throw NumericalError("operation '" + op.kind + "': " + e.what());
        }
        result.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - begin).count();
        for (const auto& file : result.files) {
            const auto path = dir / file;
            if (!std::filesystem::exists(path) || std::filesystem::file_size(path) == 0) {
                throw NumericalError("operation '" + op.kind + "' left no output in " + path.string());
            }
        }
        report.warnings.insert(report.warnings.end(), result.warnings.begin(), result.warnings.end());
        report.operations.push_back(std::move(result));
    }

    nlohmann::json manifest;
    manifest["config"] = report.resolved_config;
    manifest["warnings"] = report.warnings;
    manifest["operations"] = nlohmann::json::array();
    for (const auto& op : report.operations) {
        manifest["operations"].push_back({{"kind", op.kind}, {"files", op.files}, {"warnings", op.warnings}});
    }
    {
        std::ofstream out(dir / "manifest.json", std::ios::binary);
        out << manifest.dump(2) << "\n";
    }
    nlohmann::json timed = manifest;
    for (std::size_t j = 0; j < report.operations.size(); ++j) {
        timed["operations"][j]["wall_ms"] = report.operations[j].wall_ms;
    }
    {
        std::ofstream out(dir / "report.json", std::ios::binary);
        out << timed.dump(2) << "\n";
    }
    return report;
}

/// `validate` entry point: run only the assumption checks, no simulation.
inline RunReport validate_experiment(const ExperimentConfig& config, const std::string& out_override = "",
                                     int threads = 1) {
    ExperimentConfig only_validate = config;
    only_validate.ops.clear();
    OpSpec spec;
    spec.kind = "validate";
    if (config.sections.count("validate")) {
        check_keys(config.sections.at("validate"), {"probes", "seed"}, "[validate]");
        spec.params = config.sections.at("validate");
    }
    if (!spec.params.count("seed")) spec.params["seed"] = "1";
    only_validate.ops.push_back(spec);
    return run_experiment(only_validate, out_override, threads);
}

}  // namespace rfbsde
