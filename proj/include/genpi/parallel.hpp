#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace genpi {

/// Runs fn(i) for i in [0, n) on at most `workers` threads. Work items are
/// independent; per-item exceptions are returned (null when fn succeeded)
/// rather than thrown, so one failure never loses the others' results.
template <class Fn>
[[nodiscard]] std::vector<std::exception_ptr> parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    std::vector<std::exception_ptr> errors(n);
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
        return errors;
    }
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    return errors;
}

/// Rethrows the first captured error, if any.
inline void rethrow_first(std::vector<std::exception_ptr> const& errors) {
    for (auto const& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace genpi
