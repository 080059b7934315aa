#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace rfbsde {

/// Run `fn(begin, end)` over a static partition of [0, count). Workers own
/// disjoint ranges; callers must only write to disjoint slots, so results do
/// not depend on the thread count. Exceptions are rethrown on the caller.
template <typename Fn>
void parallel_chunks(int count, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, count));
    if (threads <= 1 || count <= 1) {
        if (count > 0) fn(0, count);
        return;
    }
    const int chunk = (count + threads - 1) / threads;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        const int begin = w * chunk;
        const int end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&, w, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// Fixed block size for reductions. Partial sums are computed per block (in
/// parallel) and folded in block order, so the floating-point result is the
/// same for any thread count.
inline constexpr int kReductionBlock = 4096;

/// Deterministic blocked reduction: `partial(begin, end)` returns the value
/// for one block, `fold(acc, value)` combines in increasing block order.
template <typename T, typename PartialFn, typename FoldFn>
T blocked_reduce(int count, int threads, T init, PartialFn&& partial, FoldFn&& fold) {
    if (count <= 0) return init;
    const int blocks = (count + kReductionBlock - 1) / kReductionBlock;
    std::vector<T> slots(static_cast<std::size_t>(blocks), init);
    parallel_chunks(blocks, threads, [&](int bbegin, int bend) {
        for (int b = bbegin; b < bend; ++b) {
            const int begin = b * kReductionBlock;
            const int end = std::min(count, begin + kReductionBlock);
            slots[static_cast<std::size_t>(b)] = partial(begin, end);
        }
    });
    T acc = init;
    for (const auto& s : slots) acc = fold(acc, s);
    return acc;
}

}  // namespace rfbsde
