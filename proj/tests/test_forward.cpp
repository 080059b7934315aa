#include <catch2/catch_amalgamated.hpp>

#include "rfbsde/forward.hpp"
#include "rfbsde/problem.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

using namespace rfbsde;

namespace {

CoefficientBundle drift_diffusion(double b, double sigma) {
    CoefficientBundle c;
    c.state_dim = 1;
    c.noise_dim = 1;
    if (b != 0.0) {
        c.drift = [b](double, const PathView&, Eigen::Ref<VectorXd> out) { out[0] = b; };
    }
    c.diffusion = [sigma](double, const PathView&, Eigen::Ref<MatrixXd> out) { out(0, 0) = sigma; };
    c.h = [](const PathPairView&) { return 0.0; };
    return c;
}

InitialCondition point_start(const TimeGrid& grid, double x0, int start = 0) {
    return InitialCondition::at_point(grid, VectorXd::Constant(1, x0), start);
}

}  // namespace

TEST_CASE("noise ensemble regeneration") {
    const TimeGrid grid(1.0, 100, 0.0);
    const NoiseEnsemble noise(grid, 50, 2, 99);
    CHECK(noise.increment(3, 7, 1) == NoiseEnsemble(grid, 50, 2, 99).increment(3, 7, 1));
    CHECK(noise.increment(3, 7, 1) != NoiseEnsemble(grid, 50, 2, 100).increment(3, 7, 1));

    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double w = noise.increment(i, 0, 0);
        sum += w;
        sumsq += w * w;
    }
    CHECK(std::abs(sum / n) < 4.0 * std::sqrt(grid.dt() / n));
    CHECK(sumsq / n == Catch::Approx(grid.dt()).epsilon(0.05));
}

TEST_CASE("no motion means no reflection") {
    const TimeGrid grid(1.0, 50, 0.0);
    const auto dom = ConvexDomain::interval();
    const auto ens = simulate_forward(drift_diffusion(0.0, 0.0), dom, point_start(grid, 0.3), grid, 3, 1);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k <= 50; ++k) {
            CHECK(ens.x_value(i, k)[0] == 0.3);
            CHECK(ens.k_value(i, k)[0] == 0.0);
            CHECK(ens.a_at(i, k) == 0.0);
        }
    }
}

TEST_CASE("constant outward drift from the right endpoint") {
    // hand-stepping the projection scheme: every prediction is 1 + dt,
    // projected back to 1 with correction -dt, so A(T) = T - t.
    const TimeGrid grid(1.0, 100, 0.0);
    const auto dom = ConvexDomain::interval();
    const auto ens = simulate_forward(drift_diffusion(1.0, 0.0), dom, point_start(grid, 1.0), grid, 1, 7);
    const double dt = grid.dt();
    for (int k = 1; k <= 100; ++k) {
        CHECK(ens.x_value(0, k)[0] == 1.0);
        CHECK(ens.k_value(0, k)[0] == Catch::Approx(-k * dt).epsilon(1e-12));
        CHECK(ens.a_at(0, k) == Catch::Approx(k * dt).epsilon(1e-12));
    }
}

TEST_CASE("reflected brownian motion stays inside and keeps its mean") {
    const TimeGrid grid(1.0, 200, 0.0);
    const auto dom = ConvexDomain::interval();
    const int samples = 10000;
    const auto ens = simulate_forward(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.5), grid,
                                      samples, 42, 2);
    double sum = 0, sumsq = 0;
    for (int i = 0; i < samples; ++i) {
        for (int k = 0; k <= 200; ++k) {
            const double x = ens.x_value(i, k)[0];
            REQUIRE(x >= 0.0);
            REQUIRE(x <= 1.0);
        }
        const double xt = ens.x_value(i, 200)[0];
        sum += xt;
        sumsq += xt * xt;
    }
    const double mean = sum / samples;
    const double se = std::sqrt((sumsq / samples - mean * mean) / samples);
    CHECK(std::abs(mean - 0.5) <= 3.0 * se);
}

TEST_CASE("frozen history before the start node") {
    const TimeGrid grid(1.0, 10, 0.0);
    const auto dom = ConvexDomain::interval();
    VectorXd from = VectorXd::Constant(1, 0.2), to = VectorXd::Constant(1, 0.8);
    const auto init = InitialCondition::ramp(grid, from, to, 5);
    const auto ens = simulate_forward(drift_diffusion(0.0, 1.0), dom, init, grid, 4, 3);
    for (int i = 0; i < 4; ++i) {
        for (int k = 0; k <= 5; ++k) {
            CHECK(ens.x_value(i, k)[0] == init.state.value(k)[0]);
            CHECK(ens.k_value(i, k)[0] == 0.0);
            CHECK(ens.a_at(i, k) == 0.0);
        }
        CHECK(ens.x_value(i, 6)[0] != ens.x_value(i, 5)[0]);
    }
}

TEST_CASE("determinism: worker count never changes the ensemble") {
    const TimeGrid grid(0.5, 50, 0.0);
    const auto dom = ConvexDomain::ball(2);
    CoefficientBundle c;
    c.state_dim = 2;
    c.noise_dim = 2;
    c.drift = [](double, const PathView& x, Eigen::Ref<VectorXd> out) { out = 0.5 * x.current_value(); };
    c.diffusion = [](double, const PathView&, Eigen::Ref<MatrixXd> out) { out.setIdentity(); };
    c.h = [](const PathPairView&) { return 0.0; };
    const auto init = InitialCondition::at_point(grid, VectorXd::Zero(2));
    const auto e1 = simulate_forward(c, dom, init, grid, 500, 11, 1);
    const auto e4 = simulate_forward(c, dom, init, grid, 500, 11, 4);
    CHECK(e1.x == e4.x);
    CHECK(e1.k == e4.k);
    CHECK(e1.a == e4.a);
}

TEST_CASE("replay tower") {
    const TimeGrid grid(1.0, 100, 0.0);
    const auto dom = ConvexDomain::interval();
    const auto bundle = drift_diffusion(0.0, 1.0);
    const auto init = point_start(grid, 0.9);  // close to the boundary: reflections happen
    SECTION("restart at the start is an identical run") {
        CHECK(replay_tower(bundle, dom, init, grid, 0, 5) == 0.0);
    }
    SECTION("restart at the horizon is an empty continuation") {
        CHECK(replay_tower(bundle, dom, init, grid, 100, 5) == 0.0);
    }
    SECTION("midpoint restart replays exactly") {
        CHECK(replay_tower(bundle, dom, init, grid, 50, 5) <= 1e-10);
    }
    SECTION("off-grid restart rejected") {
        CHECK_THROWS_AS(replay_tower(bundle, dom, init, grid, 101, 5), std::invalid_argument);
    }
}

TEST_CASE("exponential moment of the local time") {
    const TimeGrid grid(0.5, 50, 0.0);
    const auto dom = ConvexDomain::interval();
    SECTION("no local time means the moment is exactly one") {
        const auto ens = simulate_forward(drift_diffusion(0.0, 0.0), dom, point_start(grid, 0.5), grid, 100, 1);
        const auto m = exp_moment(ens, 1.0);
        CHECK(m.value == 1.0);
        CHECK(m.standard_error == 0.0);
    }
    SECTION("q = 0 gives exactly one") {
        const auto ens = simulate_forward(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.5), grid, 100, 1);
        const auto m = exp_moment(ens, 0.0);
        CHECK(m.value == 1.0);
    }
    SECTION("finite and stable under sample doubling") {
        const auto half = simulate_forward(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.5), grid, 4000, 8, 2);
        const auto full = simulate_forward(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.5), grid, 8000, 8, 2);
        const auto mh = exp_moment(half, 1.0);
        const auto mf = exp_moment(full, 1.0);
        CHECK(std::isfinite(mh.value));
        CHECK(std::abs(mh.value - mf.value) <=
              2.0 * std::sqrt(mh.standard_error * mh.standard_error +
                              mf.standard_error * mf.standard_error));
    }
}

TEST_CASE("initial-condition continuity probe") {
    const TimeGrid grid(0.5, 50, 0.0);
    const auto dom = ConvexDomain::interval();
    SECTION("no dynamics: the ratio is exactly one") {
        const auto res = lipschitz_initial(drift_diffusion(0.0, 0.0), dom, point_start(grid, 0.3),
                                           point_start(grid, 0.5), grid, 50, 2, 2.0);
        CHECK(res.ratio == Catch::Approx(1.0).epsilon(1e-12));
    }
    SECTION("identical starts are rejected") {
        CHECK_THROWS_AS(lipschitz_initial(drift_diffusion(0.0, 0.0), dom, point_start(grid, 0.3),
                                          point_start(grid, 0.3), grid, 10, 2, 2.0),
                        std::invalid_argument);
    }
    SECTION("ratio stays bounded across a geometric sweep of distances") {
        double lo = 1e300, hi = 0.0;
        for (double gap : {0.2, 0.1, 0.05}) {
            const auto res = lipschitz_initial(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.4),
                                               point_start(grid, 0.4 + gap), grid, 2000, 13, 2.0, 2);
            lo = std::min(lo, res.ratio);
            hi = std::max(hi, res.ratio);
        }
        CHECK(hi / lo <= 2.0);
    }
    SECTION("p = 2 and p = 4 both finite") {
        for (double p : {2.0, 4.0}) {
            const auto res = lipschitz_initial(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.3),
                                               point_start(grid, 0.6), grid, 500, 17, p);
            CHECK(std::isfinite(res.ratio));
        }
    }
}

TEST_CASE("local time identity") {
    const auto dom = ConvexDomain::interval();
    SECTION("constant interior path: identically zero") {
        const TimeGrid grid(1.0, 20, 0.0);
        const auto ens = simulate_forward(drift_diffusion(0.0, 0.0), dom, point_start(grid, 0.5), grid, 5, 1);
        CHECK(local_time_identity(ens, drift_diffusion(0.0, 0.0), dom) == 0.0);
    }
    SECTION("deterministic drift case reproduces A exactly") {
        const TimeGrid grid(1.0, 50, 0.0);
        const auto bundle = drift_diffusion(1.0, 0.0);
        const auto ens = simulate_forward(bundle, dom, point_start(grid, 1.0), grid, 1, 1);
        CHECK(local_time_identity(ens, bundle, dom) <= 1e-13);
    }
    SECTION("residual decreases under grid refinement") {
        const auto bundle = drift_diffusion(0.0, 1.0);
        const TimeGrid coarse(0.5, 50, 0.0), fine(0.5, 500, 0.0);
        const auto ec = simulate_forward(bundle, dom, point_start(coarse, 0.5), coarse, 1000, 4, 2);
        const auto ef = simulate_forward(bundle, dom, point_start(fine, 0.5), fine, 1000, 4, 2);
        const double rc = local_time_identity(ec, bundle, dom, 2);
        const double rf = local_time_identity(ef, bundle, dom, 2);
        CHECK(rf < rc);
    }
}

TEST_CASE("penalized scheme") {
    const auto dom = ConvexDomain::interval();
    const PenaltyField pen(dom);
    SECTION("interior-only dynamics match the projection scheme exactly") {
        const TimeGrid grid(1.0, 20, 0.0);
        const auto bundle = drift_diffusion(0.0, 0.0);
        const auto proj = simulate_forward(bundle, dom, point_start(grid, 0.4), grid, 3, 9);
        const auto penalized = simulate_penalized(bundle, dom, pen, 100.0, point_start(grid, 0.4), grid, 3, 9);
        CHECK(proj.x == penalized.x);
        for (int i = 0; i < 3; ++i) CHECK(penalized.k_value(i, 20)[0] == 0.0);
    }
    SECTION("sup distance to the projection scheme is nonincreasing in n") {
        const TimeGrid grid(0.5, 500, 0.0);
        const auto bundle = drift_diffusion(0.0, 1.0);
        const auto init = point_start(grid, 0.5);
        const int samples = 1000;
        const auto ref = simulate_forward(bundle, dom, init, grid, samples, 21, 2);
        double prev = 1e300;
        for (double n : {10.0, 100.0, 1000.0}) {
            const auto pn = simulate_penalized(bundle, dom, pen, n, init, grid, samples, 21, 2);
            double acc = 0.0;
            for (int i = 0; i < samples; ++i) {
                double sup = 0.0;
                for (int k = 0; k <= 500; ++k) {
                    sup = std::max(sup, std::abs(pn.x_value(i, k)[0] - ref.x_value(i, k)[0]));
                }
                acc += sup;
            }
            const double mean_sup = acc / samples;
            CHECK(mean_sup < prev);
            prev = mean_sup;
        }
    }
    SECTION("drift against the penalty settles at the balance point") {
        const TimeGrid grid(1.0, 1000, 0.0);
        const double n = 100.0;
        const auto ens = simulate_penalized(drift_diffusion(1.0, 0.0), dom, pen, n, point_start(grid, 1.0),
                                            grid, 1, 2);
        const double x_end = ens.x_value(0, 1000)[0];
        CHECK(x_end == Catch::Approx(1.0 + 1.0 / (2.0 * n)).margin(1e-4));
        CHECK(std::abs(x_end - 1.0) <= 1.0 / std::sqrt(n));
    }
    SECTION("exploding stiffness raises a stiffness error") {
        const TimeGrid grid(1.0, 100, 0.0);  // n dt = 1e6: the explicit step overflows
        CHECK_THROWS_AS(simulate_penalized(drift_diffusion(0.0, 1.0), dom, pen, 1e8,
                                           point_start(grid, 0.99), grid, 8, 3),
                        StiffnessError);
    }
    SECTION("stability guard is reported in the run log") {
        const TimeGrid grid(1.0, 100, 0.0);
        const auto ens = simulate_penalized(drift_diffusion(0.0, 0.0), dom, pen, 100.0,
                                            point_start(grid, 0.5), grid, 2, 3);
        REQUIRE_FALSE(ens.warnings.empty());
        CHECK(ens.warnings.front().find("stability guard") != std::string::npos);
    }
    SECTION("maximal excursion is nonincreasing in n (median over samples)") {
        const TimeGrid grid(0.5, 500, 0.0);
        const auto bundle = drift_diffusion(0.0, 1.0);
        const auto init = point_start(grid, 0.9);
        const int samples = 400;
        double prev = 1e300;
        for (double n : {10.0, 100.0, 1000.0}) {
            const auto pn = simulate_penalized(bundle, dom, pen, n, init, grid, samples, 5, 2);
            std::vector<double> exc(samples, 0.0);
            for (int i = 0; i < samples; ++i) {
                double worst = 0.0;
                for (int k = 0; k <= 500; ++k) {
                    worst = std::max(worst, dom.project(pn.x_value(i, k)).correction.norm());
                }
                exc[static_cast<std::size_t>(i)] = worst;
            }
            std::nth_element(exc.begin(), exc.begin() + samples / 2, exc.end());
            const double median = exc[static_cast<std::size_t>(samples / 2)];
            CHECK(median <= prev);
            prev = median;
        }
    }
}

TEST_CASE("ensemble exports") {
    const TimeGrid grid(0.5, 5, 0.0);
    const auto dom = ConvexDomain::interval();
    const auto ens = simulate_forward(drift_diffusion(0.0, 1.0), dom, point_start(grid, 0.5), grid, 7, 123);

    SECTION("binary cache round trip is exact") {
        std::stringstream buf;
        write_binary(ens, buf);
        const auto back = read_binary(buf, grid);
        CHECK(back.x == ens.x);
        CHECK(back.k == ens.k);
        CHECK(back.a == ens.a);
        CHECK(back.samples == ens.samples);
    }
    SECTION("csv export has one row per (sample, node)") {
        std::stringstream buf;
        write_csv(ens, buf);
        std::string line;
        int rows = 0;
        while (std::getline(buf, line)) ++rows;
        CHECK(rows == 1 + 7 * 6);
    }
}
