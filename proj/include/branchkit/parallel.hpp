#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace branchkit {

/// Worker count from BRANCHKIT_WORKERS, or 1.
inline unsigned default_workers() {
    if (const char* v = std::getenv("BRANCHKIT_WORKERS")) {
        try {
            const long n = std::stol(v);
            if (n >= 1) return static_cast<unsigned>(n);
        } catch (...) {
        }
    }
    return 1;
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads.  Results must
/// be written to per-index slots; the first exception by index is rethrown.
template <class F>
void parallel_for(std::size_t count, unsigned workers, F&& fn) {
    workers = std::max(1u, workers);
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const unsigned n = static_cast<unsigned>(std::min<std::size_t>(workers, count));
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace branchkit
