#pragma once

#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "rfbsde/common.hpp"
#include "rfbsde/geometry.hpp"
#include "rfbsde/parallel.hpp"
#include "rfbsde/paths.hpp"
#include "rfbsde/rng.hpp"

namespace rfbsde {

/// Read-only view of one sample's state history up to node `current`.
/// Coefficients receive views, never the raw ensemble; reading past
/// `current` breaks non-anticipativity and is caught by the validator probe.
class PathView {
public:
    PathView(const TimeGrid& grid, const double* data, int dim, int current)
        : grid_(&grid), data_(data), dim_(dim), current_(current) {}

    const TimeGrid& grid() const { return *grid_; }
    int dim() const { return dim_; }
    int current() const { return current_; }
    double time() const { return grid_->node(current_); }

    Eigen::Map<const VectorXd> value(int k) const {
        return Eigen::Map<const VectorXd>(data_ + static_cast<std::ptrdiff_t>(k) * dim_, dim_);
    }
    Eigen::Map<const VectorXd> current_value() const { return value(current_); }

private:
    const TimeGrid* grid_;
    const double* data_;
    int dim_;
    int current_;
};

/// The realized forward pair (X, K) of one sample, plus the local time A.
struct PathPairView {
    PathView x;        // state path
    PathView k;        // reflection path
    const double* a;   // local-time series, one scalar per node
    int current;

    double a_value(int node) const { return a[node]; }
    double a_current() const { return a[current]; }
};

using DriftFn = std::function<void(double t, const PathView& x, Eigen::Ref<VectorXd> out)>;
using DiffusionFn = std::function<void(double t, const PathView& x, Eigen::Ref<MatrixXd> out)>;
/// f(t, (X,K), y, z, delayed y-segment). The segment rows run over
/// theta = -delta..0, last row = current value.
using DriverFn = std::function<double(double t, const PathPairView& xk, double y,
                                      const Eigen::Ref<const VectorXd>& z,
                                      const Eigen::Ref<const VectorXd>& y_delay)>;
using BoundaryDriverFn = std::function<double(double t, const PathPairView& xk, double y,
                                              const Eigen::Ref<const VectorXd>& y_delay)>;
using TerminalFn = std::function<double(const PathPairView& xk)>;

/// Coefficients of the forward-backward system. Empty f or g means
/// identically zero. The uses_delay flags let solvers skip building delayed
/// segments; they are contracts, not optimizations the library guesses.
struct CoefficientBundle {
    int state_dim = 1;
    int noise_dim = 1;
    DriftFn drift;            // b; empty = 0
    DiffusionFn diffusion;    // sigma; required
    DriverFn f;               // generator under dt
    BoundaryDriverFn g;       // generator under dA
    TerminalFn h;             // terminal functional; required
    bool f_uses_delay = false;
    bool g_uses_delay = false;

    void eval_drift(double t, const PathView& x, Eigen::Ref<VectorXd> out) const {
        if (drift) {
            drift(t, x, out);
        } else {
            out.setZero();
        }
    }
    bool uses_delay() const { return f_uses_delay || g_uses_delay; }
};

enum class DelayMeasure { point_at_zero, point_at_minus_delta, uniform };

inline const char* to_string(DelayMeasure m) {
    switch (m) {
        case DelayMeasure::point_at_zero: return "point0";
        case DelayMeasure::point_at_minus_delta: return "point-delta";
        case DelayMeasure::uniform: return "uniform";
    }
    return "?";
}

/// Quadrature of int_{-delta}^{0} w(theta) rho(dtheta) for a segment sampled
/// on the grid (w given at theta_j = (j - m) dt). Point masses are exact;
/// the uniform density uses the trapezoid rule.
inline double delay_measure_integral(const VectorXd& w, DelayMeasure measure, double /*delta*/) {
    const int m = static_cast<int>(w.size()) - 1;
    switch (measure) {
        case DelayMeasure::point_at_zero: return w[m];
        case DelayMeasure::point_at_minus_delta: return w[0];
        case DelayMeasure::uniform: {
            if (m == 0) return w[0];
            double s = 0.5 * (w[0] + w[m]);
            for (int j = 1; j < m; ++j) s += w[j];
            return s / m;  // (dt / delta) * sum, with delta = m dt
        }
    }
    return 0.0;
}

/// Lipschitz bound that may depend on the reflection path (L1, L1~ of the
/// delay conditions). Plain constants are the common case.
struct DelayBound {
    double constant = 0.0;
    std::function<double(const SamplePath&)> fn;  // optional override

    DelayBound() = default;
    DelayBound(double c) : constant(c) {}  // NOLINT: implicit by design

    double eval(const SamplePath& reflection) const { return fn ? fn(reflection) : constant; }
};

/// Constants of assumptions (A1)-(A4) plus the smallness data of (H1)/(H2).
struct AssumptionParams {
    double lipschitz = 0.0;           // L: b, sigma, and f in (y, z)
    double lipschitz_boundary = 0.0;  // L~: g in y
    double growth = 1.0;              // M
    double growth_boundary = 1.0;     // M~
    double growth_power = 1.0;        // p: recorded, consumed only by growth validation
    double beta = 1.0;                // must exceed 2 sqrt(2) L~
    DelayBound delay_bound_f;         // L1
    DelayBound delay_bound_g;         // L1~
    DelayMeasure delay_measure_f = DelayMeasure::point_at_minus_delta;
    DelayMeasure delay_measure_g = DelayMeasure::point_at_minus_delta;

    void validate() const {
        require(lipschitz >= 0 && lipschitz_boundary >= 0 && growth >= 0 && growth_boundary >= 0 &&
                    delay_bound_f.constant >= 0 && delay_bound_g.constant >= 0,
                "assumption constants must be nonnegative");
        require(beta > 2.0 * std::sqrt(2.0) * lipschitz_boundary,
                "beta must exceed 2*sqrt(2)*Ltilde");
    }
};

struct HCheckReport {
    double c_bound = 0.0;  // min{(beta^2 - 8 Ltilde^2) / (4 beta^2), 1/584}
    double h1_lhs = 0.0;
    double h2_lhs = 0.0;
    bool pass_h1 = false;
    bool pass_h2 = false;
    bool pass() const { return pass_h1 && pass_h2; }
};

/// Evaluate the contraction conditions (H1)/(H2) on a probe reflection path.
/// Passing means the lhs sits strictly below c_bound (margin 1e-12), i.e.
/// some admissible c exists. The conditions are sufficient, not necessary;
/// callers treat failure as a warning.
inline HCheckReport check_h1_h2(const AssumptionParams& params, const SamplePath& reflection_probe,
                                double horizon) {
    params.validate();
    const double beta = params.beta;
    const double lt = params.lipschitz_boundary;
    const double l = params.lipschitz;
    HCheckReport rep;
    rep.c_bound = std::min((beta * beta - 8.0 * lt * lt) / (4.0 * beta * beta), 1.0 / 584.0);

    const double delta = reflection_probe.grid().delay();
    const double omega = modulus_delta(reflection_probe, delta);
    const double expo = std::exp((8.0 * l * l + 0.5) * delta + beta * omega);

    const double l1 = params.delay_bound_f.eval(reflection_probe);
    const double l1t = params.delay_bound_g.eval(reflection_probe);

    if (l1 == 0.0) {
        rep.h1_lhs = 0.0;
    } else {
        require(l > 0.0, "(H1) is undefined for L = 0 with L1 > 0: division by 4L^2");
        rep.h1_lhs = l1 * std::max(1.0, horizon) * expo / (4.0 * l * l);
    }
    const int last = reflection_probe.node_count() - 1;
    rep.h2_lhs = 4.0 * l1t * total_variation(reflection_probe, 0, last) * expo / beta;

    constexpr double margin = 1e-12;
    rep.pass_h1 = rep.h1_lhs < rep.c_bound - margin;
    rep.pass_h2 = rep.h2_lhs < rep.c_bound - margin;
    return rep;
}

struct LipschitzReport {
    double ratio_drift = 0.0;
    double ratio_diffusion = 0.0;
    double ratio_f_yz = 0.0;
    double ratio_f_delay = 0.0;   // against L1
    double ratio_g_y = 0.0;       // against L~
    double ratio_g_delay = 0.0;   // against L1~
    double ratio_h_growth = 0.0;  // |h| / (1 + |psi|^p), against M
    double ratio_f_growth = 0.0;  // |f(t,.,0,0,0)| / (1 + |phi| + |varphi|), against M
    double ratio_g_growth = 0.0;  // |g(t,.,0,0)| / same, against M~
    bool non_anticipative = true;
    bool pass = false;
    std::vector<std::string> failures;
};

namespace detail {

/// Random closed-domain-valued path: projected Gaussian walk.
inline RowMajorMatrixXd random_domain_path(const ConvexDomain& domain, const TimeGrid& grid,
                                           const CounterRng& rng, std::uint64_t probe, std::uint64_t lane) {
    const int d = domain.dimension();
    RowMajorMatrixXd values(grid.node_count(), d);
    VectorXd x(d);
    for (int i = 0; i < d; ++i) x[i] = rng.normal(probe, lane * 1000, i);
    x = domain.project(x).point;
    values.row(0) = x.transpose();
    const double step = std::sqrt(grid.dt());
    for (int k = 1; k < grid.node_count(); ++k) {
        VectorXd dx(d);
        for (int i = 0; i < d; ++i) dx[i] = step * rng.normal(probe, lane * 1000 + k, i);
        x = domain.project(x + dx).point;
        values.row(k) = x.transpose();
    }
    return values;
}

}  // namespace detail

/// Monte Carlo check of the declared Lipschitz constants over random path
/// and argument pairs, plus the non-anticipativity probe for b and sigma
/// (mutate the future of the path, demand bit-identical output). Observed
/// ratios may exceed the declared constants by at most 1e-9.
inline LipschitzReport validate_lipschitz(const CoefficientBundle& coeffs,
                                          const AssumptionParams& params, const ConvexDomain& domain,
                                          const TimeGrid& grid, int probes, std::uint64_t seed,
                                          int threads = 1) {
    require(probes >= 1, "validator needs at least one probe");
    const CounterRng rng(seed, RngStream::probe);
    const int d = coeffs.state_dim;
    const int dp = coeffs.noise_dim;
    const int m = grid.delay_steps();

    struct Partial {
        double drift = 0, diff = 0, f_yz = 0, f_delay = 0, g_y = 0, g_delay = 0;
        double h_growth = 0, f_growth = 0, g_growth = 0;
        bool anticipative = false;
        bool finite = true;
    };
    std::vector<Partial> slots(static_cast<std::size_t>(probes));

    parallel_chunks(probes, threads, [&](int begin, int end) {
        VectorXd b1(d), b2(d);
        MatrixXd s1(d, dp), s2(d, dp);
        for (int p = begin; p < end; ++p) {
            Partial& out = slots[static_cast<std::size_t>(p)];
            const RowMajorMatrixXd path1 = detail::random_domain_path(domain, grid, rng, p, 1);
            const RowMajorMatrixXd path2 = detail::random_domain_path(domain, grid, rng, p, 2);
            const int node = static_cast<int>(rng.uniform(p, 3) * grid.steps());
            const double t = grid.node(node);
            const PathView v1(grid, path1.data(), d, node);
            const PathView v2(grid, path2.data(), d, node);

            double dist = 0.0;
            for (int k = 0; k <= node; ++k) dist = std::max(dist, (path1.row(k) - path2.row(k)).norm());
            if (dist > 1e-12) {
                coeffs.eval_drift(t, v1, b1);
                coeffs.eval_drift(t, v2, b2);
                out.drift = (b1 - b2).norm() / dist;
                coeffs.diffusion(t, v1, s1);
                coeffs.diffusion(t, v2, s2);
                out.diff = (s1 - s2).norm() / dist;
                if (!b1.allFinite() || !s1.allFinite()) out.finite = false;
            }

            // non-anticipativity: change the path after `node`, outputs must not move
            if (node < grid.steps()) {
                RowMajorMatrixXd mutated = path1;
                mutated.bottomRows(grid.steps() - node).array() += 0.7;
                const PathView vm(grid, mutated.data(), d, node);
                coeffs.eval_drift(t, v1, b1);
                coeffs.eval_drift(t, vm, b2);
                coeffs.diffusion(t, v1, s1);
                coeffs.diffusion(t, vm, s2);
                if (b1 != b2 || s1 != s2) out.anticipative = true;
            }

            // f and g over random (y, z, yhat) pairs on a fixed path pair
            const RowMajorMatrixXd refl = RowMajorMatrixXd::Zero(grid.node_count(), d);
            std::vector<double> local_time(static_cast<std::size_t>(grid.node_count()), 0.0);
            const PathPairView pair{v1, PathView(grid, refl.data(), d, node), local_time.data(), node};
            const double y1 = rng.normal(p, 4), y2 = rng.normal(p, 5);
            VectorXd z1(dp), z2(dp);
            for (int i = 0; i < dp; ++i) {
                z1[i] = rng.normal(p, 6, i);
                z2[i] = rng.normal(p, 7, i);
            }
            VectorXd seg1(m + 1), seg2(m + 1);
            for (int j = 0; j <= m; ++j) {
                seg1[j] = rng.normal(p, 8, j);
                seg2[j] = rng.normal(p, 9, j);
            }
            if (coeffs.f) {
                const double num = std::abs(coeffs.f(t, pair, y1, z1, seg1) - coeffs.f(t, pair, y2, z2, seg1));
                const double den = std::abs(y1 - y2) + (z1 - z2).norm();
                if (den > 1e-12) out.f_yz = num / den;
                VectorXd w = (seg1 - seg2).array().square();
                const double l2 = delay_measure_integral(w, params.delay_measure_f, grid.delay());
                if (l2 > 1e-12) {
                    const double dnum = coeffs.f(t, pair, y1, z1, seg1) - coeffs.f(t, pair, y1, z1, seg2);
                    out.f_delay = dnum * dnum / l2;
                }
            }
            if (coeffs.g) {
                const double num = std::abs(coeffs.g(t, pair, y1, seg1) - coeffs.g(t, pair, y2, seg1));
                if (std::abs(y1 - y2) > 1e-12) out.g_y = num / std::abs(y1 - y2);
                VectorXd w = (seg1 - seg2).array().square();
                const double l2 = delay_measure_integral(w, params.delay_measure_g, grid.delay());
                if (l2 > 1e-12) {
                    const double dnum = coeffs.g(t, pair, y1, seg1) - coeffs.g(t, pair, y1, seg2);
                    out.g_delay = dnum * dnum / l2;
                }
            }

            // growth bounds at the zero arguments, against M, M~ and the power p
            double path_sup = 0.0;
            for (int k = 0; k <= node; ++k) path_sup = std::max(path_sup, path1.row(k).norm());
            const VectorXd zero_z = VectorXd::Zero(dp);
            const VectorXd zero_seg = VectorXd::Zero(m + 1);
            if (coeffs.h) {
                const PathPairView full{PathView(grid, path1.data(), d, grid.steps()),
                                        PathView(grid, refl.data(), d, grid.steps()), local_time.data(),
                                        grid.steps()};
                double sup_full = 0.0;
                for (int k = 0; k <= grid.steps(); ++k) sup_full = std::max(sup_full, path1.row(k).norm());
                const double hv = coeffs.h(full);
                if (!std::isfinite(hv)) out.finite = false;
                out.h_growth = std::abs(hv) / (1.0 + std::pow(sup_full, params.growth_power));
            }
            if (coeffs.f) {
                const double fv = coeffs.f(t, pair, 0.0, zero_z, zero_seg);
                if (!std::isfinite(fv)) out.finite = false;
                out.f_growth = std::abs(fv) / (1.0 + path_sup);
            }
            if (coeffs.g) {
                const double gv = coeffs.g(t, pair, 0.0, zero_seg);
                if (!std::isfinite(gv)) out.finite = false;
                out.g_growth = std::abs(gv) / (1.0 + path_sup);
            }
        }
    });

    LipschitzReport rep;
    bool all_finite = true;
    for (const auto& s : slots) {
        rep.ratio_drift = std::max(rep.ratio_drift, s.drift);
        rep.ratio_diffusion = std::max(rep.ratio_diffusion, s.diff);
        rep.ratio_f_yz = std::max(rep.ratio_f_yz, s.f_yz);
        rep.ratio_f_delay = std::max(rep.ratio_f_delay, s.f_delay);
        rep.ratio_g_y = std::max(rep.ratio_g_y, s.g_y);
        rep.ratio_g_delay = std::max(rep.ratio_g_delay, s.g_delay);
        rep.ratio_h_growth = std::max(rep.ratio_h_growth, s.h_growth);
        rep.ratio_f_growth = std::max(rep.ratio_f_growth, s.f_growth);
        rep.ratio_g_growth = std::max(rep.ratio_g_growth, s.g_growth);
        if (s.anticipative) rep.non_anticipative = false;
        if (!s.finite) all_finite = false;
    }
    if (!all_finite) rep.failures.push_back("a coefficient returned a non-finite value on a finite probe");

    constexpr double slack = 1e-9;
    auto check = [&](double observed, double declared, const char* what) {
        if (observed > declared + slack) {
            rep.failures.push_back(std::string(what) + ": observed " + format_double(observed) +
                                   " exceeds declared " + format_double(declared));
        }
    };
    check(rep.ratio_drift, params.lipschitz, "drift Lipschitz");
    check(rep.ratio_diffusion, params.lipschitz, "diffusion Lipschitz");
    check(rep.ratio_f_yz, params.lipschitz, "f Lipschitz in (y,z)");
    check(rep.ratio_f_delay, params.delay_bound_f.constant, "f delay Lipschitz (squared)");
    check(rep.ratio_g_y, params.lipschitz_boundary, "g Lipschitz in y");
    check(rep.ratio_g_delay, params.delay_bound_g.constant, "g delay Lipschitz (squared)");
    check(rep.ratio_h_growth, params.growth, "h growth");
    check(rep.ratio_f_growth, params.growth, "f growth at zero");
    check(rep.ratio_g_growth, params.growth_boundary, "g growth at zero");
    if (!rep.non_anticipative) rep.failures.push_back("b or sigma reads the future of the path");
    rep.pass = rep.failures.empty();
    return rep;
}

/// A named problem: coefficients plus their declared assumption constants.
struct Problem {
    std::string name;
    CoefficientBundle coefficients;
    AssumptionParams assumptions;
};

/// Heat benchmark: reflected Brownian motion on [0,1], f = g = 0, terminal cos(pi x(T)).
/// cos(pi x) is a Neumann eigenfunction, so u(t,x) = exp(-pi^2 (T-t)/2) cos(pi x).
inline Problem make_heat_neumann() {
    Problem p;
    p.name = "heat-neumann";
    p.coefficients.state_dim = 1;
    p.coefficients.noise_dim = 1;
    p.coefficients.diffusion = [](double, const PathView&, Eigen::Ref<MatrixXd> out) { out(0, 0) = 1.0; };
    p.coefficients.h = [](const PathPairView& xk) {
        return std::cos(std::numbers::pi * xk.x.value(xk.x.grid().steps())[0]);
    };
    p.assumptions.lipschitz = 0.0;
    p.assumptions.lipschitz_boundary = 0.0;
    p.assumptions.growth = 1.0;
    p.assumptions.growth_boundary = 1.0;
    p.assumptions.beta = 1.0;
    return p;
}

/// Manufactured boundary benchmark on [0,1] with exact solution
/// u*(t,x) = exp(-lambda (T-t)) q(x), q(x) = x^2 + x (q' nonzero at both
/// endpoints, so the Stieltjes boundary term is genuinely exercised).
/// With b = 0, sigma = 1:
///   f = -du*/dt - q''/2 * exp(...) and g = -q'(x) * level'(x) * exp(...).
inline Problem make_manufactured_neumann(double horizon, double lambda = 1.0) {
    require(horizon > 0 && std::isfinite(lambda), "manufactured problem needs a positive horizon");
    Problem p;
    p.name = "manufactured-neumann";
    auto ustar = [horizon, lambda](double t, double x) {
        return std::exp(-lambda * (horizon - t)) * (x * x + x);
    };
    p.coefficients.state_dim = 1;
    p.coefficients.noise_dim = 1;
    p.coefficients.diffusion = [](double, const PathView&, Eigen::Ref<MatrixXd> out) { out(0, 0) = 1.0; };
    p.coefficients.f = [horizon, lambda](double t, const PathPairView& xk, double, const Eigen::Ref<const VectorXd>&,
                                         const Eigen::Ref<const VectorXd>&) {
        const double x = xk.x.current_value()[0];
        return -std::exp(-lambda * (horizon - t)) * (lambda * (x * x + x) + 1.0);
    };
    p.coefficients.g = [horizon, lambda](double t, const PathPairView& xk, double,
                                         const Eigen::Ref<const VectorXd>&) {
        const double x = xk.x.current_value()[0];
        // -du*/dnu with nu = level gradient 1 - 2x (unit at both endpoints)
        return -std::exp(-lambda * (horizon - t)) * (2.0 * x + 1.0) * (1.0 - 2.0 * x);
    };
    p.coefficients.h = [ustar, horizon](const PathPairView& xk) {
        return ustar(horizon, xk.x.value(xk.x.grid().steps())[0]);
    };
    p.assumptions.lipschitz = 0.0;
    p.assumptions.lipschitz_boundary = 0.0;
    p.assumptions.growth = 3.0 * std::max(1.0, std::abs(lambda)) + 1.0;
    p.assumptions.growth_boundary = 9.0;
    p.assumptions.beta = 1.0;
    return p;
}

/// Delay benchmark: state-independent driver f = a * yhat(-delta), g = 0, h = 1.
/// The solution is the deterministic delay ODE handled by the
/// method-of-steps oracle.
inline Problem make_linear_delay(double a = 0.5) {
    Problem p;
    p.name = "linear-delay";
    p.coefficients.state_dim = 1;
    p.coefficients.noise_dim = 1;
    p.coefficients.diffusion = [](double, const PathView&, Eigen::Ref<MatrixXd> out) { out(0, 0) = 1.0; };
    p.coefficients.f = [a](double, const PathPairView&, double, const Eigen::Ref<const VectorXd>&,
                           const Eigen::Ref<const VectorXd>& y_delay) { return a * y_delay[0]; };
    p.coefficients.f_uses_delay = true;
    p.coefficients.h = [](const PathPairView&) { return 1.0; };
    p.assumptions.lipschitz = 1.0;  // any L >= 0 is truthful; 1 keeps (H1) well defined
    p.assumptions.lipschitz_boundary = 0.0;
    p.assumptions.delay_bound_f = DelayBound(a * a);
    p.assumptions.delay_measure_f = DelayMeasure::point_at_minus_delta;
    p.assumptions.beta = 4.0;
    return p;
}

}  // namespace rfbsde
