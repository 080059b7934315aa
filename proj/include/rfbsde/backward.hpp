#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "rfbsde/common.hpp"
#include "rfbsde/forward.hpp"
#include "rfbsde/parallel.hpp"
#include "rfbsde/problem.hpp"

namespace rfbsde {

/// Feature map for the least-squares conditional expectations. The first
/// feature must be the constant 1 (enforced when the normal equations are
/// assembled); that constant is what makes regression preserve cross-sample
/// means.
class RegressionBasis {
public:
    using FeatureFn = std::function<void(const PathPairView&, Eigen::Ref<VectorXd>)>;

    /// {1, X, upper triangle of X X^T, A}
    static RegressionBasis poly2_state(int state_dim) {
        const int m = 2 + state_dim + state_dim * (state_dim + 1) / 2;
        return RegressionBasis("poly2-state", m,
                               [state_dim](const PathPairView& p, Eigen::Ref<VectorXd> out) {
                                   const auto x = p.x.current_value();
                                   int idx = 0;
                                   out[idx++] = 1.0;
                                   for (int i = 0; i < state_dim; ++i) out[idx++] = x[i];
                                   for (int i = 0; i < state_dim; ++i)
                                       for (int j = i; j < state_dim; ++j) out[idx++] = x[i] * x[j];
                                   out[idx] = p.a_current();
                               });
    }

    /// poly2-state plus the running integral and running max of each state
    /// component. Recomputed from scratch at every node; use on small grids.
    static RegressionBasis poly2_path(int state_dim) {
        const int base = 2 + state_dim + state_dim * (state_dim + 1) / 2;
        const int m = base + 2 * state_dim;
        return RegressionBasis("poly2-path", m,
                               [state_dim, base](const PathPairView& p, Eigen::Ref<VectorXd> out) {
                                   const auto x = p.x.current_value();
                                   int idx = 0;
                                   out[idx++] = 1.0;
                                   for (int i = 0; i < state_dim; ++i) out[idx++] = x[i];
                                   for (int i = 0; i < state_dim; ++i)
                                       for (int j = i; j < state_dim; ++j) out[idx++] = x[i] * x[j];
                                   out[idx++] = p.a_current();
                                   const double dt = p.x.grid().dt();
                                   for (int i = 0; i < state_dim; ++i) {
                                       double integral = 0.0, running_max = p.x.value(0)[i];
                                       for (int k = 0; k < p.current; ++k) {
                                           integral += p.x.value(k)[i] * dt;
                                           running_max = std::max(running_max, p.x.value(k + 1)[i]);
                                       }
                                       out[base + i] = integral;
                                       out[base + state_dim + i] = running_max;
                                   }
                               });
    }

    static RegressionBasis custom(std::string name, int size, FeatureFn fn) {
        require(size >= 1, "basis must have at least the constant feature");
        return RegressionBasis(std::move(name), size, std::move(fn));
    }

    const std::string& name() const { return name_; }
    int size() const { return size_; }

    void features(const PathPairView& pair, Eigen::Ref<VectorXd> out) const { fn_(pair, out); }

private:
    RegressionBasis(std::string name, int size, FeatureFn fn)
        : name_(std::move(name)), size_(size), fn_(std::move(fn)) {}

    std::string name_;
    int size_;
    FeatureFn fn_;
};

inline RegressionBasis make_basis(const std::string& preset, int state_dim) {
    if (preset == "poly2-state") return RegressionBasis::poly2_state(state_dim);
    if (preset == "poly2-path") return RegressionBasis::poly2_path(state_dim);
    throw ConfigError("unknown basis preset: " + preset);
}

struct PicardConfig {
    int max_iterations = 20;
    double tolerance = 1e-6;   // on the sup over (sample, node) of |dY|
    double damping = 1.0;      // 1 = undamped

    void validate() const {
        require(max_iterations >= 1, "picard needs at least one iteration");
        require(tolerance > 0, "picard tolerance must be positive");
        require(damping >= 0.0 && damping <= 1.0, "picard damping must lie in [0, 1]");
    }
};

struct PicardLogEntry {
    int iteration = 0;
    double sup_change = 0.0;
};

struct BackwardEnsemble {
    TimeGrid grid;
    int samples = 0;
    int start = 0;
    int noise_dim = 1;
    MatrixXd y;                                // samples x nodes; meaningful on [start, N]
    std::vector<double> z;                     // sample-major, steps x noise_dim per sample
    std::vector<MatrixXd> step_coefficients;   // per step: m x (1 + d'); col 0 = Y, rest = Z
    std::vector<double> fit_residual_std;      // per node: std of (target - fitted), last sweep
    std::vector<PicardLogEntry> picard_log;
    bool converged = false;
    std::vector<std::string> warnings;

    BackwardEnsemble(const TimeGrid& g, int n_samples, int start_node, int dp)
        : grid(g), samples(n_samples), start(start_node), noise_dim(dp) {
        y = MatrixXd::Zero(n_samples, g.node_count());
        z.assign(static_cast<std::size_t>(n_samples) * g.steps() * dp, 0.0);
        step_coefficients.assign(static_cast<std::size_t>(g.steps()), MatrixXd());
        fit_residual_std.assign(static_cast<std::size_t>(g.node_count()), 0.0);
    }

    std::size_t z_offset(int sample, int step) const {
        return (static_cast<std::size_t>(sample) * grid.steps() + step) * noise_dim;
    }
    double& z_at(int sample, int step, int c) { return z[z_offset(sample, step) + c]; }
    double z_at(int sample, int step, int c) const { return z[z_offset(sample, step) + c]; }
    Eigen::Map<const VectorXd> z_value(int sample, int step) const {
        return Eigen::Map<const VectorXd>(z.data() + z_offset(sample, step), noise_dim);
    }

    /// Value at the start node; with a shared start state this is the
    /// cross-sample regression value carried by the constant feature.
    double value_at_start() const { return y(0, start); }

    /// Pointwise fit noise scale at a node: residual std times the square
    /// root of the average leverage m/n.
    double fit_noise(int node, int basis_size) const {
        return fit_residual_std[static_cast<std::size_t>(node)] *
               std::sqrt(static_cast<double>(basis_size) / samples);
    }
};

namespace detail {

/// Solve the averaged normal equations G beta = B; on a singular or
/// exploding solve, retry once with ridge 1e-10 and fail loudly after that.
inline MatrixXd solve_normal_equations(const MatrixXd& g, const MatrixXd& b, int step) {
    auto acceptable = [&](const MatrixXd& beta, const MatrixXd& lhs) {
        if (!beta.allFinite()) return false;
        if (beta.cwiseAbs().maxCoeff() > 1e10) return false;
        const double resid = (lhs * beta - b).norm();
        return resid <= 1e-8 * (1.0 + b.norm() + lhs.norm() * beta.norm());
    };
    MatrixXd beta = g.ldlt().solve(b);
    if (acceptable(beta, g)) return beta;
    const MatrixXd ridged = g + 1e-10 * MatrixXd::Identity(g.rows(), g.cols());
    beta = ridged.ldlt().solve(b);
    if (acceptable(beta, ridged)) return beta;
    throw NumericalError("singular regression normal equations at step " + std::to_string(step) +
                         " (ridge retry failed)");
}

struct SweepScratch {
    RowMajorMatrixXd phi;        // n x m
    MatrixXd targets;            // n x (1 + d'): col 0 = Y target, rest = Z targets
    MatrixXd fitted;             // n x (1 + d')
    RowMajorMatrixXd dw;         // n x d': increments of the current step
    explicit SweepScratch(int samples, int m, int dp)
        : phi(samples, m), targets(samples, 1 + dp), fitted(samples, 1 + dp), dw(samples, dp) {}
};

struct NormalEq {
    MatrixXd g, b;
};

/// Deterministic blocked assembly of G = Phi' Phi / n and B = Phi' T / n
/// over the given target columns.
inline NormalEq assemble(const SweepScratch& sc, int samples, int col_begin, int col_count, int threads) {
    const int m = static_cast<int>(sc.phi.cols());
    if (!(sc.phi.col(0).array() == 1.0).all()) {
        throw std::invalid_argument("the first regression feature must be the constant 1");
    }
    if (!sc.phi.allFinite()) {
        throw NumericalError("regression features must be finite for every sample");
    }
    NormalEq init{MatrixXd::Zero(m, m), MatrixXd::Zero(m, col_count)};
    NormalEq total = blocked_reduce<NormalEq>(
        samples, threads, init,
        [&](int begin, int end) {
            NormalEq part{MatrixXd::Zero(m, m), MatrixXd::Zero(m, col_count)};
            const auto rows = sc.phi.middleRows(begin, end - begin);
            part.g.noalias() = rows.transpose() * rows;
            part.b.noalias() =
                rows.transpose() * sc.targets.block(begin, col_begin, end - begin, col_count);
            return part;
        },
        [](NormalEq acc, const NormalEq& p) {
            acc.g += p.g;
            acc.b += p.b;
            return acc;
        });
    total.g /= samples;
    total.b /= samples;
    return total;
}

/// Fill a delayed scalar segment from row `sample` of the iterate matrix,
/// anchored at `node`: entry j holds U(node - m + j) clamped below at the
/// solve start (the frozen-past values before the start are not part of this
/// solve; the start value stands in for them).
inline void delayed_iterate_segment(const MatrixXd& u, int sample, int node, int delay_steps, int start,
                                    Eigen::Ref<VectorXd> seg) {
    for (int j = 0; j <= delay_steps; ++j) {
        seg[j] = u(sample, std::max(node - delay_steps + j, start));
    }
}

}  // namespace detail

/// One application of the fixed-point map: a single backward regression
/// sweep reading every delayed argument (and the z argument of f) from the
/// previous iterate. solve_backward iterates this map.
inline BackwardEnsemble picard_map(const CoefficientBundle& coeffs, const ForwardEnsemble& ens,
                                   const RegressionBasis& basis, const BackwardEnsemble& previous,
                                   int threads = 1) {
    require(previous.samples == ens.samples && previous.grid == ens.grid,
            "previous iterate does not match the ensemble");
    const TimeGrid& grid = ens.grid;
    const int n = ens.samples;
    const int m = basis.size();
    const int dp = ens.noise_dim;
    const int md = grid.delay_steps();
    const double dt = grid.dt();
    const NoiseEnsemble noise = ens.noise();
    const bool need_segment = coeffs.uses_delay();

    BackwardEnsemble out(grid, n, ens.start, dp);
    out.warnings = previous.warnings;
    detail::SweepScratch sc(n, m, dp);

    parallel_chunks(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; ++i) out.y(i, grid.steps()) = coeffs.h(ens.pair_view(i, grid.steps()));
    });

    for (int step = grid.steps() - 1; step >= ens.start; --step) {
        const double t_next = grid.node(step + 1);
        parallel_chunks(n, threads, [&](int begin, int end) {
            VectorXd seg = VectorXd::Zero(md + 1);
            VectorXd dw(dp);
            for (int i = begin; i < end; ++i) {
                Eigen::Map<VectorXd> row(sc.phi.data() + static_cast<std::ptrdiff_t>(i) * m, m);
                basis.features(ens.pair_view(i, step), row);
                const double y_next = out.y(i, step + 1);
                double target = y_next;
                if (coeffs.f || coeffs.g) {
                    if (need_segment) {
                        detail::delayed_iterate_segment(previous.y, i, step + 1, md, ens.start, seg);
                    }
                    const PathPairView pair = ens.pair_view(i, step + 1);
                    if (coeffs.f) {
                        target += coeffs.f(t_next, pair, y_next, previous.z_value(i, step), seg) * dt;
                    }
                    if (coeffs.g) {
                        const double da = ens.a_at(i, step + 1) - ens.a_at(i, step);
                        if (da != 0.0) target += coeffs.g(t_next, pair, y_next, seg) * da;
                    }
                }
                sc.targets(i, 0) = target;
                noise.increments(i, step, dw);
                sc.dw.row(i) = dw.transpose();
            }
        });

        const detail::NormalEq eq_y = detail::assemble(sc, n, 0, 1, threads);
        const MatrixXd beta_y = detail::solve_normal_equations(eq_y.g, eq_y.b, step);
        sc.fitted.col(0).noalias() = sc.phi * beta_y;
        if (!sc.fitted.col(0).allFinite()) {
            throw NumericalError("regression produced non-finite values at step " + std::to_string(step));
        }
        parallel_chunks(n, threads, [&](int begin, int end) {
            for (int i = begin; i < end; ++i) out.y(i, step) = sc.fitted(i, 0);
        });

        // martingale integrand: the fitted Y at this step is measurable here,
        // so centering the target leaves the conditional expectation intact
        // and removes the dominant noise term
        parallel_chunks(n, threads, [&](int begin, int end) {
            for (int i = begin; i < end; ++i) {
                const double centered = out.y(i, step + 1) - sc.fitted(i, 0);
                for (int c = 0; c < dp; ++c) sc.targets(i, 1 + c) = centered * sc.dw(i, c) / dt;
            }
        });
        const detail::NormalEq eq_z = detail::assemble(sc, n, 1, dp, threads);
        const MatrixXd beta_z = detail::solve_normal_equations(eq_z.g, eq_z.b, step);
        sc.fitted.rightCols(dp).noalias() = sc.phi * beta_z;
        if (!sc.fitted.rightCols(dp).allFinite()) {
            throw NumericalError("regression produced non-finite values at step " + std::to_string(step));
        }
        parallel_chunks(n, threads, [&](int begin, int end) {
            for (int i = begin; i < end; ++i) {
                for (int c = 0; c < dp; ++c) out.z_at(i, step, c) = sc.fitted(i, 1 + c);
            }
        });
        MatrixXd beta(m, 1 + dp);
        beta.col(0) = beta_y;
        beta.rightCols(dp) = beta_z;
        out.step_coefficients[static_cast<std::size_t>(step)] = beta;
        const double ss = blocked_reduce<double>(
            n, threads, 0.0,
            [&](int begin, int end) {
                double acc = 0.0;
                for (int i = begin; i < end; ++i) {
                    const double r = sc.targets(i, 0) - sc.fitted(i, 0);
                    acc += r * r;
                }
                return acc;
            },
            [](double a, double b) { return a + b; });
        out.fit_residual_std[static_cast<std::size_t>(step)] = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    }
    return out;
}

/// Least-squares estimate of the martingale integrand at one step: regress
/// target * dW_{k+1} / dt componentwise on the step-k features. Returns the
/// fitted values, one row per sample.
inline MatrixXd regress_z(const ForwardEnsemble& ens, const VectorXd& target, const RegressionBasis& basis,
                          int step, int threads = 1) {
    require(static_cast<int>(target.size()) == ens.samples, "one target per sample required");
    require(step >= 0 && step < ens.grid.steps(), "step out of range");
    require_finite(target, "regression target");
    const int n = ens.samples;
    const int dp = ens.noise_dim;
    detail::SweepScratch sc(n, basis.size(), dp);
    const NoiseEnsemble noise = ens.noise();
    const double dt = ens.grid.dt();
    parallel_chunks(n, threads, [&](int begin, int end) {
        VectorXd dw(dp);
        const int m = basis.size();
        for (int i = begin; i < end; ++i) {
            Eigen::Map<VectorXd> row(sc.phi.data() + static_cast<std::ptrdiff_t>(i) * m, m);
            basis.features(ens.pair_view(i, step), row);
            noise.increments(i, step, dw);
            sc.targets(i, 0) = 0.0;
            for (int c = 0; c < dp; ++c) sc.targets(i, 1 + c) = target[i] * dw[c] / dt;
        }
    });
    const detail::NormalEq eq = detail::assemble(sc, n, 1, dp, threads);
    const MatrixXd beta = detail::solve_normal_equations(eq.g, eq.b, step);
    return sc.phi * beta;
}

namespace detail {

/// Starting iterate: Y0 is the regression of the terminal value at every
/// step (so delayed segments start from something sensible), Z0 = 0.
inline BackwardEnsemble initial_iterate(const CoefficientBundle& coeffs, const ForwardEnsemble& ens,
                                        const RegressionBasis& basis, int threads) {
    const TimeGrid& grid = ens.grid;
    const int n = ens.samples;
    BackwardEnsemble out(grid, n, ens.start, ens.noise_dim);
    SweepScratch sc(n, basis.size(), 0);
    parallel_chunks(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            out.y(i, grid.steps()) = coeffs.h(ens.pair_view(i, grid.steps()));
            sc.targets(i, 0) = out.y(i, grid.steps());
        }
    });
    for (int step = grid.steps() - 1; step >= ens.start; --step) {
        parallel_chunks(n, threads, [&](int begin, int end) {
            const int m = basis.size();
            for (int i = begin; i < end; ++i) {
                Eigen::Map<VectorXd> row(sc.phi.data() + static_cast<std::ptrdiff_t>(i) * m, m);
                basis.features(ens.pair_view(i, step), row);
            }
        });
        const NormalEq eq = assemble(sc, n, 0, 1, threads);
        const MatrixXd beta = solve_normal_equations(eq.g, eq.b, step);
        sc.fitted.noalias() = sc.phi * beta;
        parallel_chunks(n, threads, [&](int begin, int end) {
            for (int i = begin; i < end; ++i) out.y(i, step) = sc.fitted(i, 0);
        });
    }
    return out;
}

}  // namespace detail

/// Outer Picard iteration over picard_map with least-squares conditional
/// expectations inside. Terminal values are exact per sample; everything
/// else is regression. Non-convergence is reported, not thrown.
inline BackwardEnsemble solve_backward(const CoefficientBundle& coeffs, const ForwardEnsemble& ens,
                                       const RegressionBasis& basis, const PicardConfig& picard,
                                       int threads = 1) {
    picard.validate();
    require(ens.samples >= 1, "empty ensemble");

    BackwardEnsemble current = detail::initial_iterate(coeffs, ens, basis, threads);
    std::vector<PicardLogEntry> log;
    bool converged = false;

    for (int iter = 1; iter <= picard.max_iterations; ++iter) {
        BackwardEnsemble next = picard_map(coeffs, ens, basis, current, threads);
        if (picard.damping < 1.0) {
            const double lambda = picard.damping;
            next.y = current.y + lambda * (next.y - current.y);
            for (std::size_t j = 0; j < next.z.size(); ++j) {
                next.z[j] = current.z[j] + lambda * (next.z[j] - current.z[j]);
            }
        }
        double change = 0.0;
        for (int node = ens.start; node <= ens.grid.steps(); ++node) {
            change = std::max(change,
                              (next.y.col(node) - current.y.col(node)).cwiseAbs().maxCoeff());
        }
        log.push_back({iter, change});
        current = std::move(next);
        if (change <= picard.tolerance) {
            converged = true;
            break;
        }
    }
    current.picard_log = log;
    current.converged = converged;
    if (!converged) {
        current.warnings.push_back("picard iteration did not reach tolerance " +
                                   format_double(picard.tolerance) + " within " +
                                   std::to_string(picard.max_iterations) + " iterations (last change " +
                                   format_double(log.back().sup_change) + ")");
    }
    return current;
}

/// CSV: sample, step, Y, Z components (Z printed as zero at the terminal
/// node where it is not defined).
inline void write_csv(const BackwardEnsemble& b, std::ostream& out) {
    out << "sample,step,y";
    for (int c = 0; c < b.noise_dim; ++c) out << ",z" << c;
    out << "\n";
    for (int i = 0; i < b.samples; ++i) {
        for (int node = b.start; node <= b.grid.steps(); ++node) {
            out << i << ',' << node << ',' << format_double(b.y(i, node));
            for (int c = 0; c < b.noise_dim; ++c) {
                out << ',' << format_double(node < b.grid.steps() ? b.z_at(i, node, c) : 0.0);
            }
            out << "\n";
        }
    }
}

/// Picard log as JSON lines: {"iteration": m, "sup_change": x}.
inline void write_picard_log(const BackwardEnsemble& b, std::ostream& out) {
    for (const auto& e : b.picard_log) {
        out << "{\"iteration\": " << e.iteration << ", \"sup_change\": " << format_double(e.sup_change)
            << "}\n";
    }
}

}  // namespace rfbsde
