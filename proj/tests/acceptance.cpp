// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Usage: acceptance [path-to-rfbsde_cli]   (the CLI path is needed for the
// determinism criterion; defaults to ../tools/rfbsde_cli next to this binary)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "rfbsde/analysis.hpp"
#include "rfbsde/backward.hpp"
#include "rfbsde/forward.hpp"
#include "rfbsde/problem.hpp"

#include "oracles.hpp"

using namespace rfbsde;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
    std::printf("%s  criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

InitialCondition point_start(const TimeGrid& grid, double x0) {
    return InitialCondition::at_point(grid, VectorXd::Constant(1, x0));
}

std::string fmt(double x) { return format_double(x); }

// ---------------------------------------------------------------------------
// 1. Neumann heat benchmark: u(0, x) vs the eigenfunction solution at
//    x in {0.25, 0.5, 0.75}, T = 0.5, dt = 1e-3, 1e5 samples, single thread,
//    tolerance max(3 SE, 2e-2), runtime <= 2 minutes.
void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    const TimeGrid grid(0.5, 500, 0.1);
    const auto heat = make_heat_neumann();
    const auto dom = ConvexDomain::interval();
    const auto basis = RegressionBasis::poly2_state(1);
    bool pass = true;
    std::string detail;
    for (const double x : {0.25, 0.5, 0.75}) {
        const auto est = evaluate_u(heat.coefficients, dom, point_start(grid, x), grid, 100000, 20240501,
                                    basis, PicardConfig{}, 1);
        const double exact = oracles::heat_neumann_solution(0.0, x, 0.5);
        const double err = std::abs(est.value - exact);
        const double tol = std::max(3.0 * est.standard_error, 2e-2);
        if (err > tol) pass = false;
        detail += "x=" + fmt(x) + ": |err|=" + fmt(err) + " tol=" + fmt(tol) + "; ";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > 120.0) pass = false;
    detail += "runtime " + fmt(secs) + " s (budget 120, single thread)";
    report(1, pass, "Neumann heat benchmark", detail);
}

// 2. Manufactured boundary benchmark at x0 in {0.2, 0.8}: exercises the
//    Stieltjes term end to end; tolerance max(3 SE, 3e-2).
void criterion_2() {
    const double horizon = 0.5;
    const TimeGrid grid(horizon, 500, 0.1);
    const auto manufactured = make_manufactured_neumann(horizon);
    const auto dom = ConvexDomain::interval();
    const auto basis = RegressionBasis::poly2_state(1);
    bool pass = true;
    std::string detail;
    for (const double x : {0.2, 0.8}) {
        const auto est = evaluate_u(manufactured.coefficients, dom, point_start(grid, x), grid, 50000, 7131, basis,
                                    PicardConfig{}, 2);
        const double exact = oracles::manufactured_solution(0.0, x, horizon);
        const double err = std::abs(est.value - exact);
        const double tol = std::max(3.0 * est.standard_error, 3e-2);
        if (err > tol) pass = false;
        detail += "x0=" + fmt(x) + ": |err|=" + fmt(err) + " tol=" + fmt(tol) + "; ";
    }
    report(2, pass, "manufactured Neumann benchmark", detail.substr(0, detail.size() - 2));
}

// 3. Delay benchmark vs the method-of-steps oracle at every grid node,
//    tolerance 1e-3; Picard converges within 10 iterations, geometrically.
void criterion_3() {
    const double a = 0.5;
    const TimeGrid grid(0.5, 500, 0.1);
    const auto delayed = make_linear_delay(a);
    const auto dom = ConvexDomain::interval();
    const auto oracle = oracles::linear_delay_solution(a, grid);
    const auto ens = simulate_forward(delayed.coefficients, dom, point_start(grid, 0.5), grid, 500, 99, 2);
    const auto bwd = solve_backward(delayed.coefficients, ens, RegressionBasis::poly2_state(1), PicardConfig{}, 2);
    double worst = 0.0;
    for (int k = 0; k <= grid.steps(); ++k) {
        worst = std::max(worst, std::abs(bwd.y(0, k) - oracle[static_cast<std::size_t>(k)]));
    }
    bool geometric = true;
    for (std::size_t j = 1; j + 1 < bwd.picard_log.size(); ++j) {
        if (bwd.picard_log[j + 1].sup_change > 0.9 * bwd.picard_log[j].sup_change) geometric = false;
    }
    const bool pass = worst <= 1e-3 && bwd.converged && bwd.picard_log.size() <= 10 && geometric;
    report(3, pass, "delay benchmark vs method-of-steps oracle",
           "max|err|=" + fmt(worst) + " tol=0.001, iterations=" + std::to_string(bwd.picard_log.size()) +
               (geometric ? ", geometric decay" : ", decay NOT geometric"));
}

// 4. Tower replay over 20 random (problem, restart, seed) triples, including
//    reflecting trajectories; discrepancy <= 1e-10.
void criterion_4() {
    struct Setup {
        std::string name;
        CoefficientBundle coeffs;
        ConvexDomain domain;
        InitialCondition init;
        TimeGrid grid;
    };
    std::vector<Setup> setups;
    {
        const TimeGrid grid(0.5, 200, 0.1);
        setups.push_back({"rbm interior", make_heat_neumann().coefficients, ConvexDomain::interval(),
                          point_start(grid, 0.5), grid});
        setups.push_back({"rbm near boundary", make_heat_neumann().coefficients, ConvexDomain::interval(),
                          point_start(grid, 0.98), grid});
        CoefficientBundle pushed = make_heat_neumann().coefficients;
        pushed.drift = [](double, const PathView&, Eigen::Ref<VectorXd> out) { out[0] = 2.0; };
        setups.push_back({"drift against the wall", pushed, ConvexDomain::interval(),
                          point_start(grid, 1.0), grid});
        CoefficientBundle planar;
        planar.state_dim = 2;
        planar.noise_dim = 2;
        planar.diffusion = [](double, const PathView&, Eigen::Ref<MatrixXd> out) { out.setIdentity(); };
        planar.h = [](const PathPairView&) { return 0.0; };
        VectorXd start2(2);
        start2 << 0.9, 0.0;
        setups.push_back({"disk near boundary", planar, ConvexDomain::ball(2),
                          InitialCondition::at_point(grid, start2), grid});
    }
    const CounterRng rng(808, RngStream::probe);
    double worst = 0.0;
    int trial = 0;
    for (const auto& setup : setups) {
        for (int j = 0; j < 5; ++j, ++trial) {
            const int restart = static_cast<int>(rng.uniform(trial) * setup.grid.steps());
            const std::uint64_t seed = 5000 + static_cast<std::uint64_t>(trial);
            worst = std::max(worst, replay_tower(setup.coeffs, setup.domain, setup.init, setup.grid,
                                                 restart, seed));
        }
    }
    report(4, worst <= 1e-10, "tower-property replay over 20 random triples",
           "max discrepancy " + fmt(worst) + " <= 1e-10");
}

// 5. Local-time identity residual drops by >= 1.5x when dt goes 1e-2 -> 1e-3
//    (reflected Brownian motion, 1e4 samples).
void criterion_5() {
    const auto heat = make_heat_neumann();
    const auto dom = ConvexDomain::interval();
    const TimeGrid coarse(1.0, 100, 0.0), fine(1.0, 1000, 0.0);
    const auto ec = simulate_forward(heat.coefficients, dom, point_start(coarse, 0.5), coarse, 10000, 61, 2);
    const auto ef = simulate_forward(heat.coefficients, dom, point_start(fine, 0.5), fine, 10000, 61, 2);
    const double rc = local_time_identity(ec, heat.coefficients, dom, 2);
    const double rf = local_time_identity(ef, heat.coefficients, dom, 2);
    const double ratio = rc / rf;
    report(5, ratio >= 1.5, "local-time identity refinement",
           "residual " + fmt(rc) + " -> " + fmt(rf) + ", ratio " + fmt(ratio) + " >= 1.5");
}

// 6. Exponential moment for q in {0.5, 1} on reflected Brownian motion:
//    finite, and 5e4 vs 1e5 samples agree within 2 combined SEs.
void criterion_6() {
    const auto heat = make_heat_neumann();
    const auto dom = ConvexDomain::interval();
    const TimeGrid grid(1.0, 1000, 0.0);
    const auto half = simulate_forward(heat.coefficients, dom, point_start(grid, 0.5), grid, 50000, 77, 2);
    const auto full = simulate_forward(heat.coefficients, dom, point_start(grid, 0.5), grid, 100000, 77, 2);
    bool pass = true;
    std::string detail;
    for (const double q : {0.5, 1.0}) {
        const auto mh = exp_moment(half, q);
        const auto mf = exp_moment(full, q);
        const double gap = std::abs(mh.value - mf.value);
        const double tol = 2.0 * std::hypot(mh.standard_error, mf.standard_error);
        if (!std::isfinite(mh.value) || !std::isfinite(mf.value) || gap > tol) pass = false;
        detail += "q=" + fmt(q) + ": " + fmt(mh.value) + " vs " + fmt(mf.value) + " (gap " + fmt(gap) +
                  " <= " + fmt(tol) + "); ";
    }
    report(6, pass, "exponential moment of the boundary local time", detail.substr(0, detail.size() - 2));
}

// 7. Penalization sweep on the heat benchmark, n in {10, 100, 1000}: coupled forward
//    sup-error and |Y^n - Y| nonincreasing up to 2 combined SEs.
void criterion_7() {
    const auto heat = make_heat_neumann();
    const auto dom = ConvexDomain::interval();
    const PenaltyField pen(dom);
    const TimeGrid grid(0.5, 2000, 0.1);
    const auto rows = penalization_sweep(heat.coefficients, dom, pen, point_start(grid, 0.5), grid,
                                         {10.0, 100.0, 1000.0}, 2000, 313, RegressionBasis::poly2_state(1),
                                         PicardConfig{}, 2);
    bool pass = true;
    std::string detail;
    for (std::size_t j = 0; j < rows.size(); ++j) {
        if (rows[j].skipped) pass = false;
        detail += "n=" + fmt(rows[j].stiffness) + ": supX=" + fmt(rows[j].forward_sup_error) +
                  " dY=" + fmt(rows[j].y_error) + "; ";
        if (j > 0) {
            const auto& a = rows[j - 1];
            const auto& b = rows[j];
            if (b.forward_sup_error >
                a.forward_sup_error + 2.0 * std::hypot(a.forward_sup_se, b.forward_sup_se)) {
                pass = false;
            }
            if (b.y_error > a.y_error + 2.0 * std::hypot(a.y_error_se, b.y_error_se)) pass = false;
        }
    }
    report(7, pass, "penalization sweep convergence", detail.substr(0, detail.size() - 2));
}

// 8. Gradient consistency on the heat benchmark: quadratic-variation zeta vs
//    regression Z,
//    10% relative mean-square over [t, T - delta]. The window estimator
//    carries a triangular kernel centered eps to the right, so Z is read at
//    the kernel center.
void criterion_8() {
    const TimeGrid grid(0.5, 500, 0.1);
    const auto heat = make_heat_neumann();
    const auto dom = ConvexDomain::interval();
    const auto ens = simulate_forward(heat.coefficients, dom, point_start(grid, 0.25), grid, 50000, 515, 2);
    const auto bwd = solve_backward(heat.coefficients, ens, RegressionBasis::poly2_state(1), PicardConfig{}, 2);
    const double eps = 0.02;
    const int me = 10;
    std::vector<int> nodes;
    for (int s = 0; s + 2 * me <= 400; s += 4) nodes.push_back(s);
    const auto est = estimate_directional_gradient_values(ens, bwd.y, eps, 10.0, nodes, 2);
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < nodes.size(); ++j) {
        const int center = nodes[j] + me;
        double zbar = 0.0;
        for (int i = 0; i < ens.samples; ++i) zbar += bwd.z_at(i, center, 0);
        zbar /= ens.samples;
        const double diff = est.zeta(static_cast<int>(j), 0) - zbar;
        num += diff * diff;
        den += zbar * zbar;
    }
    const double rel = std::sqrt(num / den);
    report(8, rel <= 0.10, "directional gradient vs regression Z",
           "relative mean-square discrepancy " + fmt(rel) + " <= 0.1 over [0, T-delta]");
}

// 9. c_{beta, Ltilde} = min{(beta^2 - 8 Ltilde^2)/(4 beta^2), 1/584} on a
//    20-point table, exact to 1e-15.
void criterion_9() {
    const TimeGrid grid(1.0, 10, 0.1);
    const SamplePath flat(grid, 1);
    bool pass = true;
    double worst = 0.0;
    int points = 0;
    for (const double lt : {0.0, 0.1, 0.5, 1.0}) {
        for (const double beta : {1.0, 2.0, 4.0, 8.0, 32.0}) {
            if (beta <= 2.0 * std::sqrt(2.0) * lt) continue;
            AssumptionParams params;
            params.lipschitz_boundary = lt;
            params.beta = beta;
            const auto rep = check_h1_h2(params, flat, 1.0);
            const long double quad = (static_cast<long double>(beta) * beta - 8.0L * lt * lt) /
                                     (4.0L * static_cast<long double>(beta) * beta);
            const long double expected = std::min(quad, 1.0L / 584.0L);
            const double err = std::abs(static_cast<double>(expected - rep.c_bound));
            worst = std::max(worst, err);
            if (err > 1e-15) pass = false;
            ++points;
        }
    }
    // top up to exactly 20 points with beta just above the admissible line
    for (const double lt : {0.25, 0.75, 1.5}) {
        const double beta = 2.0 * std::sqrt(2.0) * lt + 0.5;
        AssumptionParams params;
        params.lipschitz_boundary = lt;
        params.beta = beta;
        const auto rep = check_h1_h2(params, flat, 1.0);
        const long double quad = (static_cast<long double>(beta) * beta - 8.0L * lt * lt) /
                                 (4.0L * static_cast<long double>(beta) * beta);
        const double err = std::abs(static_cast<double>(std::min(quad, 1.0L / 584.0L) - rep.c_bound));
        worst = std::max(worst, err);
        if (err > 1e-15) pass = false;
        ++points;
    }
    report(9, pass && points >= 20,
           "assumption validator constant table", std::to_string(points) + " points, max |err| " + fmt(worst));
}

// 10. CLI determinism: the same config run twice is byte-identical (modulo
//     report.json, which carries wall-clock timings), and the thread count
//     changes nothing.
void criterion_10(const std::string& cli) {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "rfbsde_acceptance";
    fs::remove_all(base);
    fs::create_directories(base);
    const fs::path cfg = base / "smoke.conf";
    {
        std::ofstream out(cfg);
        out << "[problem]\nname = heat-neumann\n"
            << "[grid]\nhorizon = 0.1\nsteps = 100\ndelay = 0.02\n"
            << "[init]\nkind = constant\nvalue = 0.5\n"
            << "[op.evaluate-u]\nsamples = 2000\nseed = 42\npoints = 0.25, 0.5, 0.75\n"
            << "[op.forward]\nsamples = 50\nseed = 9\nformat = both\n"
            << "[op.exp-moment]\nq = 0.5, 1\nsamples = 2000\nseed = 7\n"
            << "[op.replay-tower]\ncount = 5\nseed = 3\n";
    }
    auto run = [&](const std::string& dir, int threads) {
        const std::string cmd = cli + " run " + cfg.string() + " --out " + (base / dir).string() +
                                " --threads " + std::to_string(threads) + " > /dev/null 2>&1";
        return std::system(cmd.c_str());
    };
    bool pass = run("a", 1) == 0 && run("b", 1) == 0 && run("c", 2) == 0;
    std::string detail = pass ? "" : "CLI runs failed; ";
    if (pass) {
        auto slurp = [](const fs::path& p) {
            std::ifstream in(p, std::ios::binary);
            std::stringstream ss;
            ss << in.rdbuf();
            return ss.str();
        };
        for (const auto& entry : fs::directory_iterator(base / "a")) {
            const std::string name = entry.path().filename().string();
            if (name == "report.json") continue;  // wall-clock timings live here
            if (slurp(entry.path()) != slurp(base / "b" / name)) {
                pass = false;
                detail += name + " differs across reruns; ";
            }
            if (slurp(entry.path()) != slurp(base / "c" / name)) {
                pass = false;
                detail += name + " differs across thread counts; ";
            }
        }
        if (pass) detail = "rerun and 2-thread outputs byte-identical (report.json timings excluded)";
    }
    report(10, pass, "CLI determinism", detail);
    fs::remove_all(base);
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli = argc > 1 ? argv[1] : "";
    if (cli.empty()) {
        const auto guess =
            std::filesystem::path(argv[0]).parent_path().parent_path() / "tools" / "rfbsde_cli";
        cli = guess.string();
    }

    criterion_9();   // cheap first: fail fast on the exact-arithmetic check
    criterion_4();
    criterion_3();
    criterion_5();
    criterion_10(cli);
    criterion_2();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_1();

    if (failures == 0) {
        std::printf("all acceptance criteria passed\n");
    } else {
        std::printf("%d acceptance criteria FAILED\n", failures);
    }
    return failures == 0 ? 0 : 1;
}
