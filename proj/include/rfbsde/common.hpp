#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <cmath>

#include <Eigen/Dense>

namespace rfbsde {

using Eigen::MatrixXd;
using Eigen::VectorXd;
/// Node-major path storage: row k (one grid node) is contiguous, which is
/// what PathView aliases.
using RowMajorMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when a simulation or solve breaks down numerically (non-finite
/// state, failed projection, singular regression after the ridge retry).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised by the penalized scheme when n·dt is too large for the explicit
/// step; carries a suggested step size in the message.
class StiffnessError : public NumericalError {
public:
    explicit StiffnessError(const std::string& what) : NumericalError(what) {}
};

/// Raised by the config layer: unknown keys, missing files, bad grammar.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

inline void require_finite(double x, const char* name) {
    if (!std::isfinite(x)) {
        throw std::invalid_argument(std::string(name) + " must be finite, got " + std::to_string(x));
    }
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& x, const char* name) {
    if (!x.allFinite()) {
        throw std::invalid_argument(std::string(name) + " must be finite");
    }
}

/// Shortest round-trip decimal form of a double. Used by every CSV/JSON
/// writer so that identical runs produce byte-identical files.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    // prefer the shortest representation that round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char probe[32];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, x);
        if (std::strtod(probe, nullptr) == x) return probe;
    }
    return buf;
}

/// FNV-1a over raw bytes; used for memoization digests of initial data.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace rfbsde
