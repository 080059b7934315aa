#pragma once

#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "rfbsde/common.hpp"
#include "rfbsde/geometry.hpp"
#include "rfbsde/parallel.hpp"
#include "rfbsde/paths.hpp"
#include "rfbsde/problem.hpp"
#include "rfbsde/rng.hpp"

namespace rfbsde {

/// Brownian increments as a pure function of (seed, sample, step, component).
/// Nothing is stored; regeneration is bit-identical on any worker layout.
class NoiseEnsemble {
public:
    NoiseEnsemble(const TimeGrid& grid, int samples, int noise_dim, std::uint64_t seed)
        : rng_(seed, RngStream::forward_noise),
          sqrt_dt_(std::sqrt(grid.dt())),
          samples_(samples),
          noise_dim_(noise_dim),
          seed_(seed) {}

    int samples() const { return samples_; }
    int noise_dim() const { return noise_dim_; }
    std::uint64_t seed() const { return seed_; }

    /// Increment of component `c` over [t_k, t_{k+1}].
    double increment(int sample, int step, int c) const {
        return sqrt_dt_ * rng_.normal(static_cast<std::uint64_t>(sample),
                                      static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(c));
    }

    void increments(int sample, int step, Eigen::Ref<VectorXd> out) const {
        for (int c = 0; c < noise_dim_; ++c) out[c] = increment(sample, step, c);
    }

private:
    CounterRng rng_;
    double sqrt_dt_;
    int samples_;
    int noise_dim_;
    std::uint64_t seed_;
};

enum class ForwardScheme { projection, penalized };

/// Discrete forward ensemble: per-sample paths X (in the closed domain for
/// the projection scheme), K (reflection) and A (local time). History before
/// the start node is the frozen initial pair.
struct ForwardEnsemble {
    TimeGrid grid;
    int state_dim = 1;
    int noise_dim = 1;
    int samples = 0;
    int start = 0;
    ForwardScheme scheme = ForwardScheme::projection;
    double penalty_stiffness = 0.0;  // n of the penalized scheme, 0 otherwise
    std::uint64_t seed = 0;
    std::vector<double> x;  // sample-major, node-major within a sample, d per node
    std::vector<double> k;
    std::vector<double> a;  // one scalar per node
    std::vector<std::string> warnings;

    ForwardEnsemble(const TimeGrid& g, int d, int dp, int n_samples, int start_node)
        : grid(g), state_dim(d), noise_dim(dp), samples(n_samples), start(start_node) {
        const auto nodes = static_cast<std::size_t>(g.node_count());
        x.assign(static_cast<std::size_t>(n_samples) * nodes * d, 0.0);
        k.assign(static_cast<std::size_t>(n_samples) * nodes * d, 0.0);
        a.assign(static_cast<std::size_t>(n_samples) * nodes, 0.0);
    }

    std::size_t state_offset(int sample, int node) const {
        return (static_cast<std::size_t>(sample) * grid.node_count() + node) * state_dim;
    }
    std::size_t scalar_offset(int sample, int node) const {
        return static_cast<std::size_t>(sample) * grid.node_count() + node;
    }

    double* x_row(int sample, int node) { return x.data() + state_offset(sample, node); }
    const double* x_row(int sample, int node) const { return x.data() + state_offset(sample, node); }
    double* k_row(int sample, int node) { return k.data() + state_offset(sample, node); }
    const double* k_row(int sample, int node) const { return k.data() + state_offset(sample, node); }
    double& a_at(int sample, int node) { return a[scalar_offset(sample, node)]; }
    double a_at(int sample, int node) const { return a[scalar_offset(sample, node)]; }

    Eigen::Map<const VectorXd> x_value(int sample, int node) const {
        return Eigen::Map<const VectorXd>(x_row(sample, node), state_dim);
    }
    Eigen::Map<const VectorXd> k_value(int sample, int node) const {
        return Eigen::Map<const VectorXd>(k_row(sample, node), state_dim);
    }

    PathView x_view(int sample, int current) const {
        return PathView(grid, x_row(sample, 0), state_dim, current);
    }
    PathPairView pair_view(int sample, int current) const {
        return PathPairView{x_view(sample, current), PathView(grid, k_row(sample, 0), state_dim, current),
                            a.data() + scalar_offset(sample, 0), current};
    }

    NoiseEnsemble noise() const { return NoiseEnsemble(grid, samples, noise_dim, seed); }
};

/// Post-pass over a freshly simulated ensemble; throws NumericalError with
/// the offending (sample, node) if any invariant fails.
inline void check_forward_invariants(const ForwardEnsemble& e, const ConvexDomain& domain) {
    const bool projected = e.scheme == ForwardScheme::projection;
    for (int i = 0; i < e.samples; ++i) {
        for (int node = e.start; node <= e.grid.steps(); ++node) {
            if (projected && domain.level(e.x_value(i, node)) < -1e-12) {
                throw NumericalError("ensemble invariant: X left the domain at sample " +
                                     std::to_string(i) + ", node " + std::to_string(node));
            }
            if (node > e.start) {
                const double da = e.a_at(i, node) - e.a_at(i, node - 1);
                const double dk = (e.k_value(i, node) - e.k_value(i, node - 1)).norm();
                if (da < 0 || std::abs(da - dk) > 1e-12 * std::max(1.0, e.a_at(i, node))) {
                    throw NumericalError("ensemble invariant: dA != |dK| at sample " + std::to_string(i) +
                                         ", node " + std::to_string(node));
                }
            }
        }
        if (e.a_at(i, e.start) != 0.0) {
            throw NumericalError("ensemble invariant: A must start at zero");
        }
    }
}

namespace detail {

inline void seed_history(ForwardEnsemble& e, const InitialCondition& init, int sample) {
    const int d = e.state_dim;
    for (int node = 0; node <= init.start; ++node) {
        for (int i = 0; i < d; ++i) {
            e.x_row(sample, node)[i] = init.state.at(node, i);
            e.k_row(sample, node)[i] = init.reflection.at(node, i);
        }
        e.a_at(sample, node) = 0.0;
    }
}

}  // namespace detail

/// Euler scheme with closest-point projection after each substep: the
/// projection correction is the discrete Skorokhod push, dK its increment,
/// dA = |dK|. Deterministic in (problem, init, grid, seed, samples) for any
/// thread count.
inline ForwardEnsemble simulate_forward(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                        const InitialCondition& init, const TimeGrid& grid, int samples,
                                        std::uint64_t seed, int threads = 1) {
    require(samples >= 1, "need at least one sample");
    require(grid == init.state.grid(), "initial condition grid mismatch");
    require(coeffs.state_dim == domain.dimension(), "problem/domain dimension mismatch");
    require(coeffs.state_dim == init.state.dim(), "initial condition dimension mismatch");
    for (int node = 0; node <= init.start; ++node) {
        require(domain.contains(init.state.value(node), 1e-12),
                "initial state history must be valued in the closed domain");
    }

    ForwardEnsemble ens(grid, coeffs.state_dim, coeffs.noise_dim, samples, init.start);
    ens.scheme = ForwardScheme::projection;
    ens.seed = seed;
    const NoiseEnsemble noise(grid, samples, coeffs.noise_dim, seed);
    const double dt = grid.dt();
    const int d = coeffs.state_dim;
    const int dp = coeffs.noise_dim;

    parallel_chunks(samples, threads, [&](int begin, int end) {
        VectorXd b(d), dw(dp), pred(d);
        MatrixXd sigma(d, dp);
        for (int i = begin; i < end; ++i) {
            detail::seed_history(ens, init, i);
            for (int step = init.start; step < grid.steps(); ++step) {
                const double t = grid.node(step);
                const PathView hist = ens.x_view(i, step);
                coeffs.eval_drift(t, hist, b);
                coeffs.diffusion(t, hist, sigma);
                noise.increments(i, step, dw);
                pred = hist.current_value() + b * dt + sigma * dw;
                if (!pred.allFinite()) {
                    throw NumericalError("forward state became non-finite at sample " +
                                         std::to_string(i) + ", step " + std::to_string(step));
                }
                const Projection proj = domain.project(pred);
                double* xn = ens.x_row(i, step + 1);
                double* kn = ens.k_row(i, step + 1);
                const double* kp = ens.k_row(i, step);
                for (int c = 0; c < d; ++c) {
                    xn[c] = proj.point[c];
                    kn[c] = kp[c] + proj.correction[c];
                }
                ens.a_at(i, step + 1) = ens.a_at(i, step) + proj.correction.norm();
            }
        }
    });
    check_forward_invariants(ens, domain);
    return ens;
}

/// Unconstrained Euler scheme with the stiff drift b - n delta_pen; the
/// discrete K^n integrates -n delta_pen(X) dt and A^n accumulates |dK^n|.
/// Shares the noise stream with simulate_forward for coupled comparisons.
inline ForwardEnsemble simulate_penalized(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                          const PenaltyField& penalty, double stiffness,
                                          const InitialCondition& init, const TimeGrid& grid, int samples,
                                          std::uint64_t seed, int threads = 1) {
    require(samples >= 1, "need at least one sample");
    require(stiffness > 0, "penalization stiffness must be positive");
    require(grid == init.state.grid(), "initial condition grid mismatch");
    require(coeffs.state_dim == domain.dimension(), "problem/domain dimension mismatch");

    ForwardEnsemble ens(grid, coeffs.state_dim, coeffs.noise_dim, samples, init.start);
    ens.scheme = ForwardScheme::penalized;
    ens.penalty_stiffness = stiffness;
    ens.seed = seed;
    const NoiseEnsemble noise(grid, samples, coeffs.noise_dim, seed);
    const double dt = grid.dt();
    const int d = coeffs.state_dim;
    const int dp = coeffs.noise_dim;

    const double guard = stiffness * dt * penalty.gradient_jacobian_bound();
    if (guard > 1.0) {
        ens.warnings.push_back("penalized scheme stability guard n*dt*|grad delta_pen| = " +
                               format_double(guard) + " exceeds 1; consider dt < " +
                               format_double(dt / guard));
    }

    parallel_chunks(samples, threads, [&](int begin, int end) {
        VectorXd b(d), dw(dp), push(d);
        MatrixXd sigma(d, dp);
        for (int i = begin; i < end; ++i) {
            detail::seed_history(ens, init, i);
            for (int step = init.start; step < grid.steps(); ++step) {
                const double t = grid.node(step);
                const PathView hist = ens.x_view(i, step);
                coeffs.eval_drift(t, hist, b);
                coeffs.diffusion(t, hist, sigma);
                noise.increments(i, step, dw);
                push = -stiffness * dt * penalty.gradient(hist.current_value());
                double* xn = ens.x_row(i, step + 1);
                double* kn = ens.k_row(i, step + 1);
                const double* xp = ens.x_row(i, step);
                const double* kp = ens.k_row(i, step);
                const VectorXd move = b * dt + sigma * dw;
                double push_norm = 0.0;
                for (int c = 0; c < d; ++c) {
                    xn[c] = xp[c] + move[c] + push[c];
                    kn[c] = kp[c] + push[c];
                    push_norm += push[c] * push[c];
                }
                ens.a_at(i, step + 1) = ens.a_at(i, step) + std::sqrt(push_norm);
                if (!std::isfinite(xn[0]) || !std::isfinite(push_norm)) {
                    throw StiffnessError("penalized scheme overflow at n = " + format_double(stiffness) +
                                         ", sample " + std::to_string(i) + "; suggested dt < " +
                                         format_double(1.0 / (2.0 * stiffness)));
                }
            }
        }
    });
    return ens;
}

/// Restart the simulation at node r from the realized history and replay the
/// same noise; returns the max over [r, T] of |X difference| + |K difference|.
/// Exact replay makes this zero to floating-point accumulation.
inline double replay_tower(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                           const InitialCondition& init, const TimeGrid& grid, int restart_node,
                           std::uint64_t seed) {
    require(restart_node >= init.start && restart_node <= grid.steps(),
            "restart node must lie on the grid between start and horizon");
    const ForwardEnsemble full = simulate_forward(coeffs, domain, init, grid, 1, seed);

    SamplePath phi(grid, coeffs.state_dim), varphi(grid, coeffs.state_dim);
    for (int node = 0; node <= restart_node; ++node) {
        phi.set_value(node, full.x_value(0, node));
        varphi.set_value(node, full.k_value(0, node));
    }
    const InitialCondition restart(restart_node, std::move(phi), std::move(varphi));
    const ForwardEnsemble replay = simulate_forward(coeffs, domain, restart, grid, 1, seed);

    double worst = 0.0;
    for (int node = restart_node; node <= grid.steps(); ++node) {
        const double dx = (full.x_value(0, node) - replay.x_value(0, node)).norm();
        const double dk = (full.k_value(0, node) - replay.k_value(0, node)).norm();
        worst = std::max(worst, dx + dk);
    }
    return worst;
}

struct MomentEstimate {
    double value = 0.0;
    double standard_error = 0.0;
    int samples = 0;
};

/// Monte Carlo estimate of E[exp(q A(T))] with its standard error.
inline MomentEstimate exp_moment(const ForwardEnsemble& ens, double q) {
    require(ens.samples >= 1, "empty ensemble");
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < ens.samples; ++i) {
        const double v = std::exp(q * ens.a_at(i, ens.grid.steps()));
        sum += v;
        sumsq += v * v;
    }
    const double n = ens.samples;
    const double mean = sum / n;
    const double var = std::max(0.0, sumsq / n - mean * mean);
    return {mean, ens.samples > 1 ? std::sqrt(var / (n - 1)) : 0.0, ens.samples};
}

struct LipschitzInitialResult {
    double ratio = 0.0;       // E[sup (|dX| + |dA|)^p] / distance^p
    double distance = 0.0;    // sup-norm distance of the initial state histories
    double numerator = 0.0;
};

/// Coupled-path continuity probe for the initial-state dependence: both
/// ensembles share the reflection history and the noise.
inline LipschitzInitialResult lipschitz_initial(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                                const InitialCondition& init1, const InitialCondition& init2,
                                                const TimeGrid& grid, int samples, std::uint64_t seed,
                                                double p, int threads = 1) {
    require(init1.start == init2.start, "initial conditions must share the start node");
    require(init1.reflection.values() == init2.reflection.values(),
            "initial conditions must share the reflection history");
    double dist = 0.0;
    for (int node = 0; node <= init1.start; ++node) {
        dist = std::max(dist, (init1.state.value(node) - init2.state.value(node)).norm());
    }
    require(dist > 0.0, "initial states coincide; the ratio is undefined");

    const ForwardEnsemble e1 = simulate_forward(coeffs, domain, init1, grid, samples, seed, threads);
    const ForwardEnsemble e2 = simulate_forward(coeffs, domain, init2, grid, samples, seed, threads);

    double acc = 0.0;
    for (int i = 0; i < samples; ++i) {
        double sup = 0.0;
        for (int node = 0; node <= grid.steps(); ++node) {
            const double dx = (e1.x_value(i, node) - e2.x_value(i, node)).norm();
            const double da = std::abs(e1.a_at(i, node) - e2.a_at(i, node));
            sup = std::max(sup, dx + da);
        }
        acc += std::pow(sup, p);
    }
    LipschitzInitialResult res;
    res.distance = dist;
    res.numerator = acc / samples;
    res.ratio = res.numerator / std::pow(dist, p);
    return res;
}

/// Mean absolute residual of the discrete local-time identity
///   A(s) = level(X(s)) - level(X(t)) - sum (L level)(X) dt - sum grad(level) sigma dW,
/// averaged over samples and nodes. Decays like sqrt(dt) under refinement.
inline double local_time_identity(const ForwardEnsemble& ens, const CoefficientBundle& coeffs,
                                  const ConvexDomain& domain, int threads = 1) {
    const NoiseEnsemble noise = ens.noise();
    const double dt = ens.grid.dt();
    const int d = ens.state_dim;
    const int dp = ens.noise_dim;
    const int nodes = ens.grid.steps() - ens.start;
    require(nodes >= 1, "ensemble has no evolution interval");

    std::vector<double> per_sample(static_cast<std::size_t>(ens.samples), 0.0);
    parallel_chunks(ens.samples, threads, [&](int begin, int end) {
        VectorXd b(d), dw(dp);
        MatrixXd sigma(d, dp);
        for (int i = begin; i < end; ++i) {
            const double l0 = domain.level(ens.x_value(i, ens.start));
            double drift_sum = 0.0;
            double mart_sum = 0.0;
            double acc = 0.0;
            for (int step = ens.start; step < ens.grid.steps(); ++step) {
                const double t = ens.grid.node(step);
                const PathView hist = ens.x_view(i, step);
                coeffs.eval_drift(t, hist, b);
                coeffs.diffusion(t, hist, sigma);
                noise.increments(i, step, dw);
                const VectorXd xk = hist.current_value();
                const VectorXd grad = domain.normal(xk);
                const MatrixXd hess = domain.level_hessian(xk);
                const double gen = 0.5 * (sigma * sigma.transpose() * hess).trace() + b.dot(grad);
                drift_sum += gen * dt;
                mart_sum += grad.dot(sigma * dw);
                const double rhs = domain.level(ens.x_value(i, step + 1)) - l0 - drift_sum - mart_sum;
                acc += std::abs(ens.a_at(i, step + 1) - rhs);
            }
            per_sample[static_cast<std::size_t>(i)] = acc / nodes;
        }
    });
    double total = 0.0;
    for (const double v : per_sample) total += v;
    return total / ens.samples;
}

/// Columnar CSV: sample, step, X components, K components, A.
inline void write_csv(const ForwardEnsemble& ens, std::ostream& out) {
    out << "sample,step";
    for (int c = 0; c < ens.state_dim; ++c) out << ",x" << c;
    for (int c = 0; c < ens.state_dim; ++c) out << ",k" << c;
    out << ",a\n";
    for (int i = 0; i < ens.samples; ++i) {
        for (int node = 0; node <= ens.grid.steps(); ++node) {
            out << i << ',' << node;
            for (int c = 0; c < ens.state_dim; ++c) out << ',' << format_double(ens.x_row(i, node)[c]);
            for (int c = 0; c < ens.state_dim; ++c) out << ',' << format_double(ens.k_row(i, node)[c]);
            out << ',' << format_double(ens.a_at(i, node)) << "\n";
        }
    }
}

/// Binary cache, little-endian: magic "RFBS", then u32 {version, d, d', N,
/// samples}, then per sample, per node: X (d doubles), K (d doubles), A (1).
inline void write_binary(const ForwardEnsemble& ens, std::ostream& out) {
    const char magic[4] = {'R', 'F', 'B', 'S'};
    out.write(magic, 4);
    const std::uint32_t header[5] = {1u, static_cast<std::uint32_t>(ens.state_dim),
                                     static_cast<std::uint32_t>(ens.noise_dim),
                                     static_cast<std::uint32_t>(ens.grid.steps()),
                                     static_cast<std::uint32_t>(ens.samples)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<double> row(static_cast<std::size_t>(2 * ens.state_dim + 1));
    for (int i = 0; i < ens.samples; ++i) {
        for (int node = 0; node <= ens.grid.steps(); ++node) {
            double* r = row.data();
            for (int c = 0; c < ens.state_dim; ++c) *r++ = ens.x_row(i, node)[c];
            for (int c = 0; c < ens.state_dim; ++c) *r++ = ens.k_row(i, node)[c];
            *r = ens.a_at(i, node);
            out.write(reinterpret_cast<const char*>(row.data()),
                      static_cast<std::streamsize>(row.size() * sizeof(double)));
        }
    }
}

/// Inverse of write_binary. The grid supplies the times (the cache stores
/// only N); callers must pass the grid the ensemble was simulated on.
inline ForwardEnsemble read_binary(std::istream& in, const TimeGrid& grid) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "RFBS", 4) != 0) throw ConfigError("ensemble cache: bad magic");
    std::uint32_t header[5];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || header[0] != 1u) throw ConfigError("ensemble cache: unsupported version");
    const int d = static_cast<int>(header[1]);
    const int dp = static_cast<int>(header[2]);
    const int steps = static_cast<int>(header[3]);
    const int samples = static_cast<int>(header[4]);
    require(steps == grid.steps(), "ensemble cache: grid step count mismatch");
    ForwardEnsemble ens(grid, d, dp, samples, 0);
    std::vector<double> row(static_cast<std::size_t>(2 * d + 1));
    for (int i = 0; i < samples; ++i) {
        for (int node = 0; node <= steps; ++node) {
            in.read(reinterpret_cast<char*>(row.data()),
                    static_cast<std::streamsize>(row.size() * sizeof(double)));
            if (!in) throw ConfigError("ensemble cache: truncated payload");
            const double* r = row.data();
            for (int c = 0; c < d; ++c) ens.x_row(i, node)[c] = *r++;
            for (int c = 0; c < d; ++c) ens.k_row(i, node)[c] = *r++;
            ens.a_at(i, node) = *r;
        }
    }
    return ens;
}

}  // namespace rfbsde
