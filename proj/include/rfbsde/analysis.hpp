#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "rfbsde/backward.hpp"
#include "rfbsde/common.hpp"
#include "rfbsde/forward.hpp"
#include "rfbsde/geometry.hpp"
#include "rfbsde/parallel.hpp"
#include "rfbsde/paths.hpp"
#include "rfbsde/problem.hpp"

namespace rfbsde {

struct FunctionalEstimate {
    double value = 0.0;
    double standard_error = 0.0;
    int samples = 0;
    double horizon = 0.0;
    double dt = 0.0;
};

/// Per-sample pathwise totals xi = h + sum f dt + sum g dA evaluated on the
/// converged backward solution. Regression with a constant feature preserves
/// cross-sample means, so mean(xi) equals the start value up to the Picard
/// tolerance; the spread of xi is what the bootstrap resamples.
inline VectorXd pathwise_totals(const CoefficientBundle& coeffs, const ForwardEnsemble& ens,
                                const BackwardEnsemble& bwd, int threads = 1) {
    const TimeGrid& grid = ens.grid;
    const int md = grid.delay_steps();
    const double dt = grid.dt();
    VectorXd xi(ens.samples);
    parallel_chunks(ens.samples, threads, [&](int begin, int end) {
        VectorXd seg = VectorXd::Zero(md + 1);
        for (int i = begin; i < end; ++i) {
            double total = coeffs.h(ens.pair_view(i, grid.steps()));
            for (int node = ens.start + 1; node <= grid.steps(); ++node) {
                if (!coeffs.f && !coeffs.g) break;
                if (coeffs.uses_delay()) {
                    detail::delayed_iterate_segment(bwd.y, i, node, md, ens.start, seg);
                }
                const PathPairView pair = ens.pair_view(i, node);
                const double t = grid.node(node);
                const double y = bwd.y(i, node);
                if (coeffs.f) {
                    total += coeffs.f(t, pair, y, bwd.z_value(i, node - 1), seg) * dt;
                }
                if (coeffs.g) {
                    const double da = ens.a_at(i, node) - ens.a_at(i, node - 1);
                    if (da != 0.0) total += coeffs.g(t, pair, y, seg) * da;
                }
            }
            xi[i] = total;
        }
    });
    return xi;
}

/// Standard error of the mean via index bootstrap with counter-based draws.
inline double bootstrap_se(const VectorXd& values, int resamples, std::uint64_t seed) {
    const int n = static_cast<int>(values.size());
    if (n < 2) return 0.0;
    const CounterRng rng(seed, RngStream::bootstrap);
    double sum = 0.0, sumsq = 0.0;
    for (int b = 0; b < resamples; ++b) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) {
            const int idx = std::min(n - 1, static_cast<int>(rng.uniform(b, j) * n));
            acc += values[idx];
        }
        const double mean = acc / n;
        sum += mean;
        sumsq += mean * mean;
    }
    const double mean = sum / resamples;
    return std::sqrt(std::max(0.0, sumsq / resamples - mean * mean));
}

/// u(t, psi) as the start value of the backward solution on a fresh forward
/// ensemble. The value is the cross-sample regression constant at the start
/// node; the error bar is a bootstrap over the pathwise totals.
inline FunctionalEstimate evaluate_u(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                     const InitialCondition& init, const TimeGrid& grid, int samples,
                                     std::uint64_t seed, const RegressionBasis& basis,
                                     const PicardConfig& picard, int threads = 1) {
    const ForwardEnsemble fwd = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    const BackwardEnsemble bwd = solve_backward(coeffs, fwd, basis, picard, threads);
    const VectorXd xi = pathwise_totals(coeffs, fwd, bwd, threads);
    FunctionalEstimate est;
    est.value = bwd.value_at_start();
    est.standard_error = bootstrap_se(xi, 200, seed);
    est.samples = samples;
    est.horizon = grid.horizon();
    est.dt = grid.dt();
    return est;
}

/// Memoization for repeated pointwise queries of u. The cache key covers the
/// initial data, grid, sample budget, seed, basis and Picard settings; keep
/// one cache per problem/domain pair.
class EvaluateCache {
public:
    FunctionalEstimate get_or_compute(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                      const InitialCondition& init, const TimeGrid& grid, int samples,
                                      std::uint64_t seed, const RegressionBasis& basis,
                                      const PicardConfig& picard, int threads = 1) {
        std::uint64_t key = init.digest();
        const double gridparams[3] = {grid.horizon(), static_cast<double>(grid.steps()), grid.delay()};
        key = fnv1a(gridparams, sizeof(gridparams), key);
        key = fnv1a(&samples, sizeof(samples), key);
        key = fnv1a(&seed, sizeof(seed), key);
        key = fnv1a(basis.name().data(), basis.name().size(), key);
        const double pic[3] = {static_cast<double>(picard.max_iterations), picard.tolerance, picard.damping};
        key = fnv1a(pic, sizeof(pic), key);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            if (const auto it = map_.find(key); it != map_.end()) return it->second;
        }
        const FunctionalEstimate est =
            evaluate_u(coeffs, domain, init, grid, samples, seed, basis, picard, threads);
        std::lock_guard<std::mutex> lock(mutex_);
        map_.emplace(key, est);
        return est;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return map_.size();
    }

private:
    mutable std::mutex mutex_;
    std::map<std::uint64_t, FunctionalEstimate> map_;
};

/// Functional of a stopped forward pair.
using PathFunctional = std::function<double(const PathPairView&)>;

/// Transition semigroup P_{t,s}[F](psi) = E[F(X^{t,psi}(. ^ s))]: Monte Carlo
/// mean of F over paths frozen after the stop node.
inline FunctionalEstimate semigroup_apply(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                          const PathFunctional& functional, const InitialCondition& init,
                                          const TimeGrid& grid, int stop_node, int samples,
                                          std::uint64_t seed, int threads = 1) {
    require(stop_node >= init.start && stop_node <= grid.steps(), "stop node must lie in [start, N]");
    const ForwardEnsemble ens = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    const int d = ens.state_dim;
    const int nodes = grid.node_count();
    VectorXd vals(samples);
    parallel_chunks(samples, threads, [&](int begin, int end) {
        RowMajorMatrixXd x(nodes, d), k(nodes, d);
        std::vector<double> a(static_cast<std::size_t>(nodes));
        for (int i = begin; i < end; ++i) {
            for (int node = 0; node < nodes; ++node) {
                const int src = std::min(node, stop_node);
                for (int c = 0; c < d; ++c) {
                    x(node, c) = ens.x_row(i, src)[c];
                    k(node, c) = ens.k_row(i, src)[c];
                }
                a[static_cast<std::size_t>(node)] = ens.a_at(i, src);
            }
            const PathPairView frozen{PathView(grid, x.data(), d, grid.steps()),
                                      PathView(grid, k.data(), d, grid.steps()), a.data(), grid.steps()};
            vals[i] = functional(frozen);
            if (!std::isfinite(vals[i])) {
                throw NumericalError("path functional returned a non-finite value");
            }
        }
    });
    FunctionalEstimate est;
    est.value = vals.mean();
    const double var = samples > 1 ? (vals.array() - est.value).square().sum() / (samples - 1) : 0.0;
    est.standard_error = std::sqrt(var / samples);
    est.samples = samples;
    est.horizon = grid.horizon();
    est.dt = grid.dt();
    return est;
}

/// Candidate solution functional u(t_node, path up to node) and its gradient
/// functional zeta for the mild-solution residual.
using CandidateValueFn = std::function<double(int node, const PathPairView&)>;
using CandidateGradientFn = std::function<void(int node, const PathPairView&, Eigen::Ref<VectorXd>)>;

/// Monte Carlo evaluation of the mild-solution right side
///   E[h] + int E[f(s, ., u, zeta, delayed u)] ds + E[sum g(...) dA]
/// minus u(t, psi); returns |residual| with the combined MC standard error.
/// The boundary accumulation uses the realized dA, which equals
/// <normal, dK> at every contact point of the projection scheme.
inline FunctionalEstimate mild_residual(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                        const CandidateValueFn& u_fn, const CandidateGradientFn& zeta_fn,
                                        const InitialCondition& init, const TimeGrid& grid, int samples,
                                        std::uint64_t seed, int threads = 1) {
    const ForwardEnsemble ens = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    const int md = grid.delay_steps();
    const double dt = grid.dt();
    VectorXd xi(samples);
    parallel_chunks(samples, threads, [&](int begin, int end) {
        VectorXd seg = VectorXd::Zero(md + 1);
        VectorXd zeta = VectorXd::Zero(ens.noise_dim);
        for (int i = begin; i < end; ++i) {
            double total = coeffs.h(ens.pair_view(i, grid.steps()));
            for (int node = ens.start + 1; node <= grid.steps(); ++node) {
                if (!coeffs.f && !coeffs.g) break;
                const PathPairView pair = ens.pair_view(i, node);
                const double t = grid.node(node);
                const double u_here = u_fn(node, pair);
                if (coeffs.uses_delay()) {
                    // delayed values of the candidate: re-evaluate at clamped
                    // earlier nodes on the truncated history
                    for (int j = 0; j <= md; ++j) {
                        const int src = std::max(node - md + j, 0);
                        seg[j] = (src == node) ? u_here : u_fn(src, ens.pair_view(i, src));
                    }
                }
                if (coeffs.f) {
                    zeta_fn(node, pair, zeta);
                    total += coeffs.f(t, pair, u_here, zeta, seg) * dt;
                }
                if (coeffs.g) {
                    const double da = ens.a_at(i, node) - ens.a_at(i, node - 1);
                    if (da != 0.0) total += coeffs.g(t, pair, u_here, seg) * da;
                }
            }
            xi[i] = total;
        }
    });
    const double mean = xi.mean();
    const double var = samples > 1 ? (xi.array() - mean).square().sum() / (samples - 1) : 0.0;
    const double lhs = u_fn(init.start, ens.pair_view(0, init.start));
    FunctionalEstimate est;
    est.value = std::abs(mean - lhs);
    est.standard_error = std::sqrt(var / samples);
    est.samples = samples;
    est.horizon = grid.horizon();
    est.dt = grid.dt();
    return est;
}

/// Internal-consistency variant: the candidate pair is the solver's own
/// (Y, Z) read along the solved ensemble's paths.
inline FunctionalEstimate mild_residual_self(const CoefficientBundle& coeffs, const ForwardEnsemble& ens,
                                             const BackwardEnsemble& bwd, int threads = 1) {
    const TimeGrid& grid = ens.grid;
    const int md = grid.delay_steps();
    const double dt = grid.dt();
    VectorXd xi(ens.samples);
    parallel_chunks(ens.samples, threads, [&](int begin, int end) {
        VectorXd seg = VectorXd::Zero(md + 1);
        for (int i = begin; i < end; ++i) {
            double total = coeffs.h(ens.pair_view(i, grid.steps()));
            for (int node = ens.start + 1; node <= grid.steps(); ++node) {
                if (!coeffs.f && !coeffs.g) break;
                const PathPairView pair = ens.pair_view(i, node);
                const double t = grid.node(node);
                const double y = bwd.y(i, node);
                if (coeffs.uses_delay()) {
                    detail::delayed_iterate_segment(bwd.y, i, node, md, ens.start, seg);
                }
                if (coeffs.f) {
                    total += coeffs.f(t, pair, y, bwd.z_value(i, node - 1), seg) * dt;
                }
                if (coeffs.g) {
                    const double da = ens.a_at(i, node) - ens.a_at(i, node - 1);
                    if (da != 0.0) total += coeffs.g(t, pair, y, seg) * da;
                }
            }
            xi[i] = total;
        }
    });
    const double mean = xi.mean();
    const double var = ens.samples > 1 ? (xi.array() - mean).square().sum() / (ens.samples - 1) : 0.0;
    FunctionalEstimate est;
    est.value = std::abs(mean - bwd.value_at_start());
    est.standard_error = std::sqrt(var / ens.samples);
    est.samples = ens.samples;
    est.horizon = grid.horizon();
    est.dt = grid.dt();
    return est;
}

struct GradientEstimate {
    std::vector<int> nodes;
    MatrixXd zeta;            // one row per node, d' columns
    MatrixXd standard_error;  // same shape
    double window = 0.0;      // the epsilon of the quadratic-variation quotient
    double truncation = 0.0;  // N_trunc
};

/// Core of the joint-quadratic-variation estimator, fed with candidate
/// values v(node, path) already tabulated per (sample, node):
///   zeta(s) ~ mean_i T_N[ (1/eps^2) sum_{t_k in [s, s+eps)} dt
///                         (v(t_k+eps) - v(t_k)) (W(t_k+eps) - W(t_k)) ].
inline GradientEstimate estimate_directional_gradient_values(const ForwardEnsemble& ens, const MatrixXd& v,
                                                             double eps, double n_trunc,
                                                             std::vector<int> nodes = {}, int threads = 1) {
    const TimeGrid& grid = ens.grid;
    require(n_trunc > 0, "truncation level must be positive");
    const double ratio = eps / grid.dt();
    const int me = static_cast<int>(std::lround(ratio));
    require(me >= 1 && std::abs(ratio - me) <= 1e-9 * std::max(1.0, ratio),
            "window must be a positive integer multiple of dt");
    require(v.rows() == ens.samples && v.cols() == grid.node_count(),
            "candidate values must be tabulated per (sample, node)");
    if (nodes.empty()) {
        for (int s = ens.start; s + 2 * me <= grid.steps(); ++s) nodes.push_back(s);
    }
    for (const int s : nodes) {
        require(s >= ens.start && s + 2 * me <= grid.steps(), "gradient node window exceeds the horizon");
    }

    const int dp = ens.noise_dim;
    const int nn = static_cast<int>(nodes.size());
    const NoiseEnsemble noise = ens.noise();
    const double dt = grid.dt();

    struct Acc {
        MatrixXd sum, sumsq;
    };
    Acc init_acc{MatrixXd::Zero(nn, dp), MatrixXd::Zero(nn, dp)};
    const Acc total = blocked_reduce<Acc>(
        ens.samples, threads, init_acc,
        [&](int begin, int end) {
            Acc acc{MatrixXd::Zero(nn, dp), MatrixXd::Zero(nn, dp)};
            MatrixXd cumw(grid.node_count(), dp);
            VectorXd dw(dp);
            for (int i = begin; i < end; ++i) {
                cumw.row(0).setZero();
                for (int step = 0; step < grid.steps(); ++step) {
                    noise.increments(i, step, dw);
                    cumw.row(step + 1) = cumw.row(step) + dw.transpose();
                }
                for (int j = 0; j < nn; ++j) {
                    const int s = nodes[static_cast<std::size_t>(j)];
                    for (int c = 0; c < dp; ++c) {
                        double inner = 0.0;
                        for (int k = s; k < s + me; ++k) {
                            inner += dt * (v(i, k + me) - v(i, k)) * (cumw(k + me, c) - cumw(k, c));
                        }
                        inner /= eps * eps;
                        inner = std::clamp(inner, -n_trunc, n_trunc);
                        acc.sum(j, c) += inner;
                        acc.sumsq(j, c) += inner * inner;
                    }
                }
            }
            return acc;
        },
        [](Acc a, const Acc& b) {
            a.sum += b.sum;
            a.sumsq += b.sumsq;
            return a;
        });

    GradientEstimate out;
    out.nodes = std::move(nodes);
    out.window = eps;
    out.truncation = n_trunc;
    out.zeta = total.sum / ens.samples;
    out.standard_error.resize(nn, dp);
    for (int j = 0; j < nn; ++j) {
        for (int c = 0; c < dp; ++c) {
            const double mean = out.zeta(j, c);
            const double var =
                ens.samples > 1
                    ? std::max(0.0, (total.sumsq(j, c) - ens.samples * mean * mean) / (ens.samples - 1))
                    : 0.0;
            out.standard_error(j, c) = std::sqrt(var / ens.samples);
        }
    }
    return out;
}

/// Full operation: simulate, tabulate the candidate functional along the
/// realized paths, then run the quadratic-variation quotient.
inline GradientEstimate estimate_directional_gradient(const CoefficientBundle& coeffs,
                                                      const ConvexDomain& domain,
                                                      const CandidateValueFn& v_fn,
                                                      const InitialCondition& init, const TimeGrid& grid,
                                                      double eps, double n_trunc, int samples,
                                                      std::uint64_t seed, std::vector<int> nodes = {},
                                                      int threads = 1) {
    const ForwardEnsemble ens = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    MatrixXd v(samples, grid.node_count());
    parallel_chunks(samples, threads, [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            for (int node = 0; node < grid.node_count(); ++node) {
                v(i, node) = v_fn(node, ens.pair_view(i, node));
            }
        }
    });
    return estimate_directional_gradient_values(ens, v, eps, n_trunc, std::move(nodes), threads);
}

/// Penalized coefficient bundle: drift b - n delta_pen and driver
/// f - n g <grad level, delta_pen>; the boundary generator is folded into
/// the driver, so the returned bundle has no dA term.
inline CoefficientBundle penalized_generator(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                             const PenaltyField& penalty, double stiffness) {
    require(stiffness > 0, "penalization stiffness must be positive");
    CoefficientBundle out;
    out.state_dim = coeffs.state_dim;
    out.noise_dim = coeffs.noise_dim;
    out.diffusion = coeffs.diffusion;
    out.h = coeffs.h;
    out.f_uses_delay = coeffs.f_uses_delay || coeffs.g_uses_delay;
    out.g_uses_delay = false;

    const DriftFn base_drift = coeffs.drift;
    out.drift = [base_drift, penalty, stiffness](double t, const PathView& x, Eigen::Ref<VectorXd> out_v) {
        if (base_drift) {
            base_drift(t, x, out_v);
        } else {
            out_v.setZero();
        }
        out_v -= stiffness * penalty.gradient(x.current_value());
    };

    const DriverFn base_f = coeffs.f;
    const BoundaryDriverFn base_g = coeffs.g;
    if (base_f || base_g) {
        out.f = [base_f, base_g, domain, penalty, stiffness](double t, const PathPairView& xk, double y,
                                                             const Eigen::Ref<const VectorXd>& z,
                                                             const Eigen::Ref<const VectorXd>& y_delay) {
            double val = base_f ? base_f(t, xk, y, z, y_delay) : 0.0;
            if (base_g) {
                const VectorXd x = xk.x.current_value();
                const double inner = domain.normal(x).dot(penalty.gradient(x));
                if (inner != 0.0) val -= stiffness * base_g(t, xk, y, y_delay) * inner;
            }
            return val;
        };
    }
    return out;
}

struct PenalizationRow {
    double stiffness = 0.0;
    bool skipped = false;
    std::string warning;
    double forward_sup_error = 0.0;
    double forward_sup_se = 0.0;
    double a_sup_error = 0.0;
    double a_sup_se = 0.0;
    double y_error = 0.0;
    double y_error_se = 0.0;
    double z_mse = 0.0;
    double z_mse_se = 0.0;
};

/// Coupled convergence table of the penalized scheme against the projection
/// reference, per stiffness value. Shared seed, so the comparisons are
/// pathwise. A row whose simulation overflows is reported and skipped.
inline std::vector<PenalizationRow> penalization_sweep(const CoefficientBundle& coeffs,
                                                       const ConvexDomain& domain,
                                                       const PenaltyField& penalty,
                                                       const InitialCondition& init, const TimeGrid& grid,
                                                       const std::vector<double>& stiffness_list,
                                                       int samples, std::uint64_t seed,
                                                       const RegressionBasis& basis,
                                                       const PicardConfig& picard, int threads = 1) {
    require(!stiffness_list.empty(), "empty stiffness list");
    for (std::size_t j = 1; j < stiffness_list.size(); ++j) {
        require(stiffness_list[j] > stiffness_list[j - 1], "stiffness list must be increasing");
    }
    const ForwardEnsemble ref = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    const BackwardEnsemble ref_bwd = solve_backward(coeffs, ref, basis, picard, threads);
    const VectorXd ref_xi = pathwise_totals(coeffs, ref, ref_bwd, threads);

    std::vector<PenalizationRow> rows;
    for (const double n : stiffness_list) {
        PenalizationRow row;
        row.stiffness = n;
        try {
            const ForwardEnsemble pen = simulate_penalized(coeffs, domain, penalty, n, init, grid, samples,
                                                           seed, threads);
            const CoefficientBundle pen_coeffs = penalized_generator(coeffs, domain, penalty, n);
            const BackwardEnsemble pen_bwd = solve_backward(pen_coeffs, pen, basis, picard, threads);

            VectorXd sup_x(samples), sup_a(samples), z_ms(samples);
            for (int i = 0; i < samples; ++i) {
                double sx = 0.0, sa = 0.0, zs = 0.0;
                for (int node = init.start; node <= grid.steps(); ++node) {
                    sx = std::max(sx, (pen.x_value(i, node) - ref.x_value(i, node)).norm());
                    sa = std::max(sa, std::abs(pen.a_at(i, node) - ref.a_at(i, node)));
                }
                for (int step = init.start; step < grid.steps(); ++step) {
                    zs += (pen_bwd.z_value(i, step) - ref_bwd.z_value(i, step)).squaredNorm();
                }
                sup_x[i] = sx;
                sup_a[i] = sa;
                z_ms[i] = zs / std::max(1, grid.steps() - init.start);
            }
            auto mean_se = [&](const VectorXd& v, double& mean, double& se) {
                mean = v.mean();
                const double var = samples > 1 ? (v.array() - mean).square().sum() / (samples - 1) : 0.0;
                se = std::sqrt(var / samples);
            };
            mean_se(sup_x, row.forward_sup_error, row.forward_sup_se);
            mean_se(sup_a, row.a_sup_error, row.a_sup_se);
            mean_se(z_ms, row.z_mse, row.z_mse_se);

            row.y_error = std::abs(pen_bwd.value_at_start() - ref_bwd.value_at_start());
            const VectorXd pen_xi = pathwise_totals(pen_coeffs, pen, pen_bwd, threads);
            row.y_error_se = bootstrap_se(pen_xi - ref_xi, 200, seed);
        } catch (const StiffnessError& err) {
            row.skipped = true;
            row.warning = err.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Smooth cylinder functional of the current point, with analytic
/// derivatives; the generator probe needs both.
struct CylinderFunctional {
    std::function<double(const VectorXd&)> value;
    std::function<VectorXd(const VectorXd&)> gradient;
    std::function<MatrixXd(const VectorXd&)> hessian;
};

struct GeneratorRow {
    double s = 0.0;
    double quotient = 0.0;
    double quotient_se = 0.0;
    double analytic = 0.0;
};

/// Monte Carlo difference quotient (P_{t,s}[F] - F)/(s - t) against the
/// analytic second-order operator at the start point. Interior starts only;
/// the quotient converges at rate O(s - t) plus MC noise.
inline std::vector<GeneratorRow> generator_check(const CoefficientBundle& coeffs, const ConvexDomain& domain,
                                                 const CylinderFunctional& functional,
                                                 const InitialCondition& init, const TimeGrid& grid,
                                                 const std::vector<int>& s_nodes, int samples,
                                                 std::uint64_t seed, int threads = 1) {
    const VectorXd x0 = init.state.value(init.start);
    require(domain.level(x0) > 0.0, "generator probe requires a strictly interior start point");
    const double t0 = grid.node(init.start);

    // analytic L F at the start, with b and sigma evaluated on the history
    const int d = coeffs.state_dim;
    VectorXd b(d);
    MatrixXd sigma(d, coeffs.noise_dim);
    const PathView hist_view(grid, init.state.values().data(), d, init.start);
    coeffs.eval_drift(t0, hist_view, b);
    coeffs.diffusion(t0, hist_view, sigma);
    const double analytic = 0.5 * (sigma * sigma.transpose() * functional.hessian(x0)).trace() +
                            b.dot(functional.gradient(x0));

    const ForwardEnsemble ens = simulate_forward(coeffs, domain, init, grid, samples, seed, threads);
    const double f0 = functional.value(x0);

    std::vector<GeneratorRow> rows;
    for (const int s : s_nodes) {
        require(s > init.start && s <= grid.steps(), "quotient node must lie in (start, N]");
        VectorXd vals(samples);
        for (int i = 0; i < samples; ++i) vals[i] = functional.value(ens.x_value(i, s));
        GeneratorRow row;
        row.s = grid.node(s);
        const double mean = vals.mean();
        const double var = samples > 1 ? (vals.array() - mean).square().sum() / (samples - 1) : 0.0;
        const double dt_gap = grid.node(s) - t0;
        row.quotient = (mean - f0) / dt_gap;
        row.quotient_se = std::sqrt(var / samples) / dt_gap;
        row.analytic = analytic;
        rows.push_back(row);
    }
    return rows;
}

inline void write_csv(const std::vector<PenalizationRow>& rows, std::ostream& out) {
    out << "stiffness,skipped,forward_sup_error,forward_sup_se,a_sup_error,a_sup_se,"
           "y_error,y_error_se,z_mse,z_mse_se,warning\n";
    for (const auto& r : rows) {
        out << format_double(r.stiffness) << ',' << (r.skipped ? 1 : 0) << ','
            << format_double(r.forward_sup_error) << ',' << format_double(r.forward_sup_se) << ','
            << format_double(r.a_sup_error) << ',' << format_double(r.a_sup_se) << ','
            << format_double(r.y_error) << ',' << format_double(r.y_error_se) << ','
            << format_double(r.z_mse) << ',' << format_double(r.z_mse_se) << ',' << r.warning << "\n";
    }
}

inline void write_csv(const GradientEstimate& est, const TimeGrid& grid, std::ostream& out) {
    out << "node,time";
    for (int c = 0; c < est.zeta.cols(); ++c) out << ",zeta" << c << ",se" << c;
    out << "\n";
    for (std::size_t j = 0; j < est.nodes.size(); ++j) {
        out << est.nodes[j] << ',' << format_double(grid.node(est.nodes[j]));
        for (int c = 0; c < est.zeta.cols(); ++c) {
            out << ',' << format_double(est.zeta(static_cast<int>(j), c)) << ','
                << format_double(est.standard_error(static_cast<int>(j), c));
        }
        out << "\n";
    }
}

inline void write_csv(const std::vector<GeneratorRow>& rows, std::ostream& out) {
    out << "s,quotient,quotient_se,analytic\n";
    for (const auto& r : rows) {
        out << format_double(r.s) << ',' << format_double(r.quotient) << ','
            << format_double(r.quotient_se) << ',' << format_double(r.analytic) << "\n";
    }
}

}  // namespace rfbsde
