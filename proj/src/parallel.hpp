#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace magrecon::detail {

/// Splits [0, n) into `threads` contiguous chunks and runs fn(lo, hi) on each.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    const std::size_t t = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
    if (t <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::jthread> workers;
    workers.reserve(t - 1);
    const std::size_t chunk = (n + t - 1) / t;
    for (std::size_t k = 1; k < t; ++k) {
        const std::size_t lo = std::min(n, k * chunk);
        const std::size_t hi = std::min(n, lo + chunk);
        workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    fn(std::size_t{0}, std::min(n, chunk));
}

}  // namespace magrecon::detail
