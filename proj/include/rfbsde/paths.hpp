#pragma once

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "rfbsde/common.hpp"

namespace rfbsde {

/// Uniform grid on [0, T] with N steps plus the delay length. The delay must
/// be an exact multiple of dt; everything downstream (delayed segments, the
/// delay-ODE oracle) relies on that.
class TimeGrid {
public:
    TimeGrid(double horizon, int steps, double delay) : horizon_(horizon), steps_(steps), delay_(delay) {
        require(std::isfinite(horizon) && horizon > 0.0, "grid horizon must be positive");
        require(steps >= 1, "grid must have at least one step");
        require(std::isfinite(delay) && delay >= 0.0, "delay must be nonnegative");
        require(delay <= horizon, "delay cannot exceed the horizon");
        const double ratio = delay / dt();
        delay_steps_ = static_cast<int>(std::lround(ratio));
        require(std::abs(ratio - delay_steps_) <= 1e-9 * std::max(1.0, ratio),
                "delay must be an integer multiple of dt");
    }

    double horizon() const { return horizon_; }
    int steps() const { return steps_; }
    int node_count() const { return steps_ + 1; }
    double dt() const { return horizon_ / steps_; }
    /// Node times; node(steps()) is exactly the horizon.
    double node(int k) const { return horizon_ * k / steps_; }
    double delay() const { return delay_; }
    int delay_steps() const { return delay_steps_; }

    bool operator==(const TimeGrid& o) const {
        return horizon_ == o.horizon_ && steps_ == o.steps_ && delay_ == o.delay_;
    }

private:
    double horizon_;
    int steps_;
    double delay_;
    int delay_steps_;
};

/// One d-valued discrete path on a TimeGrid; immutable by convention once
/// handed to a simulation.
class SamplePath {
public:
    SamplePath(const TimeGrid& grid, int dim)
        : grid_(grid), values_(RowMajorMatrixXd::Zero(grid.node_count(), dim)) {
        require(dim >= 1, "path dimension must be positive");
    }

    static SamplePath constant(const TimeGrid& grid, const VectorXd& value) {
        SamplePath p(grid, static_cast<int>(value.size()));
        p.values_.rowwise() = value.transpose();
        return p;
    }

    const TimeGrid& grid() const { return grid_; }
    int dim() const { return static_cast<int>(values_.cols()); }
    int node_count() const { return static_cast<int>(values_.rows()); }

    VectorXd value(int k) const { return values_.row(k).transpose(); }
    void set_value(int k, const VectorXd& v) { values_.row(k) = v.transpose(); }
    double& at(int k, int i) { return values_(k, i); }
    double at(int k, int i) const { return values_(k, i); }

    const RowMajorMatrixXd& values() const { return values_; }
    RowMajorMatrixXd& values() { return values_; }

private:
    TimeGrid grid_;
    RowMajorMatrixXd values_;  // row k holds the value at node k, contiguously
};

/// Segment of a path over [s - delta, s], clamped at time zero: row j holds
/// path((s + theta_j)^+) with theta_j = (j - delay_steps) dt. The last row is
/// the value at s itself.
inline MatrixXd delayed_segment(const SamplePath& path, int s_node, double delay) {
    const TimeGrid& grid = path.grid();
    require(s_node >= 0 && s_node < grid.node_count(), "segment anchor must be a grid node");
    const double ratio = delay / grid.dt();
    const int m = static_cast<int>(std::lround(ratio));
    require(std::abs(ratio - m) <= 1e-9 * std::max(1.0, ratio) && m >= 0,
            "delay must be an integer multiple of dt");
    MatrixXd seg(m + 1, path.dim());
    for (int j = 0; j <= m; ++j) {
        const int k = std::max(s_node - m + j, 0);
        seg.row(j) = path.values().row(k);
    }
    return seg;
}

/// Total variation over the node range [a_node, b_node]: sum of Euclidean
/// norms of the increments.
inline double total_variation(const SamplePath& path, int a_node, int b_node) {
    require(a_node <= b_node, "total_variation requires a <= b");
    require(a_node >= 0 && b_node < path.node_count(), "node range out of grid");
    double tv = 0.0;
    for (int k = a_node; k < b_node; ++k) {
        tv += (path.values().row(k + 1) - path.values().row(k)).norm();
    }
    return tv;
}

/// Modulus of continuity: sup over s in [0, T - delta] of the total variation
/// on [s, s + delta].
inline double modulus_delta(const SamplePath& path, double delay) {
    const TimeGrid& grid = path.grid();
    require(delay >= 0.0 && delay <= grid.horizon(), "delay must lie in [0, T]");
    const double ratio = delay / grid.dt();
    const int m = static_cast<int>(std::lround(ratio));
    require(std::abs(ratio - m) <= 1e-9 * std::max(1.0, ratio),
            "delay must be an integer multiple of dt");
    // rolling window: TV(s+1, s+1+m) = TV(s, s+m) - first increment + new one
    double window = total_variation(path, 0, m);
    double best = window;
    for (int s = 1; s + m < path.node_count(); ++s) {
        window -= (path.values().row(s) - path.values().row(s - 1)).norm();
        window += (path.values().row(s + m) - path.values().row(s + m - 1)).norm();
        best = std::max(best, window);
    }
    return best;
}

inline double sup_norm(const SamplePath& path) {
    double best = 0.0;
    for (int k = 0; k < path.node_count(); ++k) {
        best = std::max(best, path.values().row(k).norm());
    }
    return best;
}

/// Initial data psi = (phi, varphi): the state history and the reflection
/// history up to the start node. Nodes past `start` are ignored.
struct InitialCondition {
    int start = 0;
    SamplePath state;       // phi, valued in the closed domain
    SamplePath reflection;  // varphi, bounded variation

    InitialCondition(int start_node, SamplePath phi, SamplePath varphi)
        : start(start_node), state(std::move(phi)), reflection(std::move(varphi)) {
        require(start >= 0 && start < state.node_count(), "start node out of grid");
        require(state.grid() == reflection.grid(), "state and reflection must share the grid");
        require(reflection.dim() == state.dim(), "state and reflection must share the dimension");
        for (int k = 0; k <= start; ++k) {
            require_finite(state.value(k), "initial state");
            require_finite(reflection.value(k), "initial reflection");
        }
    }

    /// phi frozen at x0, varphi = 0; the plain "start at a point" case.
    static InitialCondition at_point(const TimeGrid& grid, const VectorXd& x0, int start_node = 0) {
        SamplePath phi = SamplePath::constant(grid, x0);
        SamplePath varphi(grid, static_cast<int>(x0.size()));
        return InitialCondition(start_node, std::move(phi), std::move(varphi));
    }

    /// Linear ramp from x_from at time 0 to x_to at the start node.
    static InitialCondition ramp(const TimeGrid& grid, const VectorXd& x_from, const VectorXd& x_to,
                                 int start_node) {
        require(start_node >= 1, "ramp needs at least one step of history");
        SamplePath phi(grid, static_cast<int>(x_from.size()));
        for (int k = 0; k < grid.node_count(); ++k) {
            const double w = std::min(1.0, static_cast<double>(k) / start_node);
            phi.set_value(k, (1.0 - w) * x_from + w * x_to);
        }
        SamplePath varphi(grid, static_cast<int>(x_from.size()));
        return InitialCondition(start_node, std::move(phi), std::move(varphi));
    }

    double start_time() const { return state.grid().node(start); }

    std::uint64_t digest() const {
        std::uint64_t h = fnv1a(&start, sizeof(start));
        const auto span = static_cast<std::size_t>(start + 1) * state.dim();
        h = fnv1a(state.values().data(), span * sizeof(double), h);
        h = fnv1a(reflection.values().data(), span * sizeof(double), h);
        return h;
    }
};

/// CSV: one row per node, "time,c0,c1,...". Used for reports and for the
/// CLI's initial-condition files.
inline void write_csv(const SamplePath& path, std::ostream& out) {
    out << "time";
    for (int i = 0; i < path.dim(); ++i) out << ",c" << i;
    out << "\n";
    for (int k = 0; k < path.node_count(); ++k) {
        out << format_double(path.grid().node(k));
        for (int i = 0; i < path.dim(); ++i) out << ',' << format_double(path.at(k, i));
        out << "\n";
    }
}

inline SamplePath read_csv(const TimeGrid& grid, int dim, std::istream& in) {
    SamplePath path(grid, dim);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("path CSV is empty");
    int k = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (k >= grid.node_count()) throw ConfigError("path CSV has more rows than grid nodes");
        std::istringstream row(line);
        std::string cell;
        if (!std::getline(row, cell, ',')) throw ConfigError("path CSV row missing time column");
        for (int i = 0; i < dim; ++i) {
            if (!std::getline(row, cell, ',')) throw ConfigError("path CSV row has too few columns");
            path.at(k, i) = std::strtod(cell.c_str(), nullptr);
        }
        ++k;
    }
    if (k != grid.node_count()) throw ConfigError("path CSV has fewer rows than grid nodes");
    require_finite(path.values(), "path CSV values");
    return path;
}

}  // namespace rfbsde
