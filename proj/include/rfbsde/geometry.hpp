#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <utility>

#include "rfbsde/common.hpp"
#include "rfbsde/rng.hpp"

namespace rfbsde {

struct Projection {
    VectorXd point;       // closest point of the closed domain
    VectorXd correction;  // point - query; zero inside, normal at the contact point outside
};

/// Smooth bounded convex domain G = { level > 0 } with boundary { level = 0 }
/// and interior unit normal grad(level) on the boundary. Closest-point
/// projection realizes the discrete Skorokhod step.
///
/// The level function need not be bounded globally; only its values on and
/// near the closure matter for the simulated dynamics.
class ConvexDomain {
public:
    using LevelFn = std::function<double(const VectorXd&)>;
    using GradientFn = std::function<VectorXd(const VectorXd&)>;
    using HessianFn = std::function<MatrixXd(const VectorXd&)>;
    using ProjectFn = std::function<VectorXd(const VectorXd&)>;

    /// [0, 1] with level x(1-x); |level'| = 1 at both endpoints.
    static ConvexDomain interval() {
        ConvexDomain d;
        d.impl_ = std::make_shared<Impl>(Impl{
            "interval", 1,
            [](const VectorXd& x) { return x[0] * (1.0 - x[0]); },
            [](const VectorXd& x) { return VectorXd::Constant(1, 1.0 - 2.0 * x[0]).eval(); },
            [](const VectorXd&) { return MatrixXd::Constant(1, 1, -2.0).eval(); },
            [](const VectorXd& y) { return VectorXd::Constant(1, std::clamp(y[0], 0.0, 1.0)).eval(); }});
        return d;
    }

    /// Unit ball with level (1 - |x|^2)/2; |grad| = 1 on the sphere.
    static ConvexDomain ball(int dim) {
        require(dim >= 1, "ball dimension must be positive");
        ConvexDomain d;
        d.impl_ = std::make_shared<Impl>(Impl{
            "ball", dim,
            [](const VectorXd& x) { return 0.5 * (1.0 - x.squaredNorm()); },
            [](const VectorXd& x) { return (-x).eval(); },
            [dim](const VectorXd&) { return (-MatrixXd::Identity(dim, dim)).eval(); },
            [](const VectorXd& y) {
                const double r = y.norm();
                return (r <= 1.0 ? y : (y / r)).eval();
            }});
        return d;
    }

    /// User-supplied domain; the projection callback is probe-tested at
    /// registration (idempotence, closest-point optimality, unit normal).
    static ConvexDomain custom(std::string name, int dim, LevelFn level, GradientFn gradient,
                               HessianFn hessian, ProjectFn project, std::uint64_t probe_seed = 2024,
                               int probes = 64) {
        require(dim >= 1, "domain dimension must be positive");
        ConvexDomain d;
        d.impl_ = std::make_shared<Impl>(Impl{std::move(name), dim, std::move(level), std::move(gradient),
                                              std::move(hessian), std::move(project)});
        d.run_registration_probes(probe_seed, probes);
        return d;
    }

    const std::string& name() const { return impl_->name; }
    int dimension() const { return impl_->dim; }

    double level(const VectorXd& x) const {
        check_input(x);
        return impl_->level(x);
    }

    /// grad(level); the interior unit normal at boundary points.
    VectorXd normal(const VectorXd& x) const {
        check_input(x);
        return impl_->gradient(x);
    }

    std::pair<double, VectorXd> level_and_normal(const VectorXd& x) const {
        check_input(x);
        return {impl_->level(x), impl_->gradient(x)};
    }

    MatrixXd level_hessian(const VectorXd& x) const {
        check_input(x);
        return impl_->hessian(x);
    }

    Projection project(const VectorXd& y) const {
        check_input(y);
        VectorXd p = impl_->project(y);
        if (!p.allFinite()) {
            throw NumericalError("projection failed at y = [" + to_string(y) + "]");
        }
        return {p, p - y};
    }

    bool contains(const VectorXd& x, double tol = 1e-12) const { return level(x) >= -tol; }

private:
    struct Impl {
        std::string name;
        int dim;
        LevelFn level;
        GradientFn gradient;
        HessianFn hessian;
        ProjectFn project;
    };

    std::shared_ptr<const Impl> impl_;

    void check_input(const VectorXd& x) const {
        require(static_cast<int>(x.size()) == impl_->dim, "point dimension mismatch");
        require_finite(x, "domain query point");
    }

    static std::string to_string(const VectorXd& v) {
        std::string s;
        for (int i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
        return s;
    }

    void run_registration_probes(std::uint64_t seed, int probes) const {
        const CounterRng rng(seed, RngStream::probe);
        const int dim = impl_->dim;
        for (int p = 0; p < probes; ++p) {
            VectorXd y(dim);
            for (int i = 0; i < dim; ++i) y[i] = 3.0 * rng.normal(p, 0, i);
            const Projection pr = project(y);
            // idempotence
            const Projection pr2 = project(pr.point);
            require(pr2.correction.norm() <= 1e-9, "custom domain: projection is not idempotent");
            // closest point beats random competitors from the closure
            const double dist = pr.correction.norm();
            for (int q = 0; q < 16; ++q) {
                VectorXd z(dim);
                for (int i = 0; i < dim; ++i) z[i] = 3.0 * rng.normal(p, q + 1, i);
                const VectorXd inside = impl_->project(z);
                require(dist <= (inside - y).norm() + 1e-9,
                        "custom domain: projection is not the closest point");
            }
            if (dist > 1e-8) {
                // exterior query: projected point is on the boundary with unit normal
                require(std::abs(impl_->level(pr.point)) <= 1e-7,
                        "custom domain: projected point not on the boundary");
                require(std::abs(impl_->gradient(pr.point).norm() - 1.0) <= 1e-6,
                        "custom domain: boundary normal is not unit length");
            }
        }
    }
};

/// Penalty field for the penalized scheme: rho = dist(x, closure)^2 with
/// gradient 2 dist * outward direction = 2 (x - P(x)). C^1 across the
/// boundary, zero on the closure.
class PenaltyField {
public:
    explicit PenaltyField(ConvexDomain domain) : domain_(std::move(domain)) {}

    const ConvexDomain& domain() const { return domain_; }

    double rho(const VectorXd& x) const { return domain_.project(x).correction.squaredNorm(); }

    /// delta_pen(x) = grad rho(x); zero on the closure, outward outside.
    VectorXd gradient(const VectorXd& x) const { return -2.0 * domain_.project(x).correction; }

    /// Bound on |d delta_pen / dx|, used by the explicit-step stability guard.
    double gradient_jacobian_bound() const { return 2.0; }

private:
    ConvexDomain domain_;
};

}  // namespace rfbsde
