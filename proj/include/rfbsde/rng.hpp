#pragma once

#include <array>
#include <cstdint>
#include <cmath>

namespace rfbsde {

/// Philox 4x64, 10 rounds. Stateless counter-based generator: the value for a
/// given (counter, key) never depends on how many draws happened before, which
/// is what makes ensemble regeneration independent of worker count.
namespace philox {

using u64 = std::uint64_t;

inline u64 mulhilo(u64 a, u64 b, u64& hi) {
    const auto p = static_cast<unsigned __int128>(a) * b;
    hi = static_cast<u64>(p >> 64);
    return static_cast<u64>(p);
}

inline std::array<u64, 4> block(std::array<u64, 4> ctr, std::array<u64, 2> key) {
    constexpr u64 m0 = 0xD2E7470EE14C6C93ULL;
    constexpr u64 m1 = 0xCA5A826395121157ULL;
    constexpr u64 w0 = 0x9E3779B97F4A7C15ULL;
    constexpr u64 w1 = 0xBB67AE8584CAA73BULL;
    for (int round = 0; round < 10; ++round) {
        u64 hi0, hi1;
        const u64 lo0 = mulhilo(m0, ctr[0], hi0);
        const u64 lo1 = mulhilo(m1, ctr[2], hi1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += w0;
        key[1] += w1;
    }
    return ctr;
}

/// Map to (0, 1]: top 53 bits, shifted away from 0 so log() is safe.
inline double to_unit(u64 x) {
    return static_cast<double>((x >> 11) + 1) * 0x1.0p-53;
}

}  // namespace philox

/// Purpose tags keep independent uses of the same seed on disjoint streams.
enum class RngStream : std::uint64_t {
    forward_noise = 0,
    probe = 1,
    bootstrap = 2,
    path_sampling = 3,
};

/// Deterministic random field indexed by a 3-part counter. `normal` returns
/// the same value for the same (seed, stream, a, b, c) on any thread.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, RngStream stream)
        : key_{seed, 0x7266627364650000ULL ^ static_cast<std::uint64_t>(stream)} {}

    double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return philox::to_unit(philox::block({a, b, c, 0}, key_)[0]);
    }

    /// Standard normal via Box-Muller on one Philox block.
    double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        const auto blk = philox::block({a, b, c, 0}, key_);
        const double u1 = philox::to_unit(blk[0]);
        const double u2 = philox::to_unit(blk[1]);
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

private:
    std::array<std::uint64_t, 2> key_;
};

}  // namespace rfbsde
