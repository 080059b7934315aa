#include <catch2/catch_amalgamated.hpp>

#include "rfbsde/geometry.hpp"
#include "rfbsde/rng.hpp"

#include <cmath>

using namespace rfbsde;

namespace {
VectorXd vec1(double x) { return VectorXd::Constant(1, x); }
VectorXd vec2(double x, double y) {
    VectorXd v(2);
    v << x, y;
    return v;
}
}  // namespace

TEST_CASE("interval level and normal") {
    const auto dom = ConvexDomain::interval();
    SECTION("symmetric maximum at the midpoint") {
        const auto [lvl, nrm] = dom.level_and_normal(vec1(0.5));
        CHECK(lvl == 0.25);
        CHECK(nrm[0] == 0.0);
    }
    SECTION("endpoint: interior normal points right") {
        const auto [lvl, nrm] = dom.level_and_normal(vec1(0.0));
        CHECK(lvl == 0.0);
        CHECK(nrm[0] == 1.0);
    }
    SECTION("non-finite input rejected") {
        CHECK_THROWS_AS(dom.level(vec1(std::nan(""))), std::invalid_argument);
    }
}

TEST_CASE("disk level and normal") {
    const auto dom = ConvexDomain::ball(2);
    const auto [lvl, nrm] = dom.level_and_normal(vec2(0.0, -1.0));
    CHECK(lvl == 0.0);
    CHECK(nrm[0] == 0.0);
    CHECK(nrm[1] == 1.0);  // interior normal points toward the center
}

TEST_CASE("projection") {
    const auto interval = ConvexDomain::interval();
    SECTION("interior point is a fixed point") {
        const auto p = interval.project(vec1(0.4));
        CHECK(p.point[0] == 0.4);
        CHECK(p.correction[0] == 0.0);
    }
    SECTION("endpoint clamp") {
        const auto p = interval.project(vec1(1.3));
        CHECK(p.point[0] == 1.0);
        CHECK(p.correction[0] == Catch::Approx(-0.3));
    }
    SECTION("radial projection on the disk") {
        const auto disk = ConvexDomain::ball(2);
        const auto p = disk.project(vec2(2.0, 0.0));
        CHECK(p.point[0] == 1.0);
        CHECK(p.point[1] == 0.0);
        CHECK(p.correction[0] == -1.0);
    }
}

TEST_CASE("projection properties on random probes") {
    const CounterRng rng(5, RngStream::probe);
    for (const auto& dom : {ConvexDomain::interval(), ConvexDomain::ball(3)}) {
        const int d = dom.dimension();
        for (int probe = 0; probe < 200; ++probe) {
            VectorXd y(d);
            for (int i = 0; i < d; ++i) y[i] = 2.5 * rng.normal(probe, 0, i);
            const auto pr = dom.project(y);
            // idempotence
            CHECK(dom.project(pr.point).correction.norm() <= 1e-12);
            // closest-point optimality against 100 random points of the closure
            const double dist = pr.correction.norm();
            for (int q = 1; q <= 100; ++q) {
                VectorXd z(d);
                for (int i = 0; i < d; ++i) z[i] = 2.5 * rng.normal(probe, q, i);
                const VectorXd inside = dom.project(z).point;
                CHECK(dist <= (inside - y).norm() + 1e-12);
            }
            // exterior corrections are parallel to the interior normal
            if (dist > 1e-10) {
                const VectorXd nrm = dom.normal(pr.point);
                CHECK(std::abs(nrm.norm() - 1.0) <= 1e-9);
                const double align = pr.correction.dot(nrm) / dist;
                CHECK(align == Catch::Approx(1.0).margin(1e-9));
            }
        }
    }
}

TEST_CASE("boundary invariants and the convexity probe") {
    const CounterRng rng(6, RngStream::probe);
    for (const auto& dom : {ConvexDomain::interval(), ConvexDomain::ball(2)}) {
        const int d = dom.dimension();
        for (int probe = 0; probe < 100; ++probe) {
            VectorXd y(d);
            for (int i = 0; i < d; ++i) y[i] = 3.0 * rng.normal(probe, 7, i) + 2.0;
            const auto pr = dom.project(y);
            if (pr.correction.norm() <= 1e-10) continue;
            const VectorXd boundary = pr.point;
            CHECK(std::abs(dom.level(boundary)) <= 1e-12);
            CHECK(std::abs(dom.normal(boundary).norm() - 1.0) <= 1e-9);
            // convexity: <x2 - x1, grad level(x1)> >= 0 for x2 in the closure
            for (int q = 0; q < 20; ++q) {
                VectorXd z(d);
                for (int i = 0; i < d; ++i) z[i] = 2.0 * rng.normal(probe, 100 + q, i);
                const VectorXd x2 = dom.project(z).point;
                CHECK((x2 - boundary).dot(dom.normal(boundary)) >= -1e-12);
            }
        }
    }
}

TEST_CASE("custom domain registration probes") {
    // a shifted interval [0, 2] with unit gradient at the endpoints
    auto level = [](const VectorXd& x) { return 0.5 * x[0] * (2.0 - x[0]); };
    auto grad = [](const VectorXd& x) { return VectorXd::Constant(1, 1.0 - x[0]).eval(); };
    auto hess = [](const VectorXd&) { return MatrixXd::Constant(1, 1, -1.0).eval(); };
    auto proj = [](const VectorXd& y) { return VectorXd::Constant(1, std::clamp(y[0], 0.0, 2.0)).eval(); };
    CHECK_NOTHROW(ConvexDomain::custom("interval02", 1, level, grad, hess, proj));

    // a broken projection must be rejected at registration
    auto bad_proj = [](const VectorXd& y) { return VectorXd::Constant(1, std::clamp(y[0], 0.5, 1.5)).eval(); };
    CHECK_THROWS_AS(ConvexDomain::custom("broken", 1, level, grad, hess, bad_proj), std::invalid_argument);
}

TEST_CASE("penalty field") {
    const PenaltyField pen(ConvexDomain::interval());
    SECTION("zero on the closure") {
        CHECK(pen.rho(vec1(0.5)) == 0.0);
        CHECK(pen.gradient(vec1(0.5))[0] == 0.0);
        CHECK(pen.gradient(vec1(1.0))[0] == 0.0);
    }
    SECTION("outside the interval: gradient of dist^2") {
        CHECK(pen.gradient(vec1(1.2))[0] == Catch::Approx(0.4));
        CHECK(pen.rho(vec1(1.2)) == Catch::Approx(0.04));
    }
    SECTION("sign condition against the level gradient at x = 1.2") {
        const auto dom = ConvexDomain::interval();
        const double inner = dom.normal(vec1(1.2))[0] * pen.gradient(vec1(1.2))[0];
        CHECK(inner == Catch::Approx(-0.56));
        CHECK(inner <= 1e-12);
    }
    SECTION("gradient matches central finite differences of rho") {
        const CounterRng rng(9, RngStream::probe);
        for (const auto& dom : {ConvexDomain::interval(), ConvexDomain::ball(2)}) {
            const PenaltyField field(dom);
            const int d = dom.dimension();
            const double h = 1e-6;
            for (int probe = 0; probe < 1000; ++probe) {
                VectorXd x(d);
                for (int i = 0; i < d; ++i) x[i] = 2.0 * rng.normal(probe, 11, i);
                const VectorXd g = field.gradient(x);
                for (int i = 0; i < d; ++i) {
                    VectorXd xp = x, xm = x;
                    xp[i] += h;
                    xm[i] -= h;
                    const double fd = (field.rho(xp) - field.rho(xm)) / (2.0 * h);
                    CHECK(g[i] == Catch::Approx(fd).margin(1e-6 * std::max(1.0, std::abs(fd))));
                }
            }
        }
    }
    SECTION("sign condition at random exterior points near the boundary") {
        const CounterRng rng(10, RngStream::probe);
        const auto dom = ConvexDomain::ball(2);
        const PenaltyField field(dom);
        for (int probe = 0; probe < 200; ++probe) {
            VectorXd dir(2);
            for (int i = 0; i < 2; ++i) dir[i] = rng.normal(probe, 12, i);
            if (dir.norm() < 1e-8) continue;
            const VectorXd x = dir / dir.norm() * (1.0 + 0.05 * rng.uniform(probe, 13));
            CHECK(dom.normal(x).dot(field.gradient(x)) <= 1e-12);
        }
    }
}
