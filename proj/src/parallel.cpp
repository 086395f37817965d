#include "quantstat/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace quantstat {

int default_workers() {
    if (const char* env = std::getenv("QUANTSTAT_WORKERS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_blocks(uint64_t n, int workers,
                     const std::function<void(uint64_t, uint64_t)>& fn) {
    if (n == 0) return;
    const uint64_t nw = std::min<uint64_t>(std::max(workers, 1), n);
    if (nw <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(nw);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    const uint64_t chunk = (n + nw - 1) / nw;
    for (uint64_t w = 0; w < nw; ++w) {
        const uint64_t first = w * chunk;
        const uint64_t last = std::min(n, first + chunk);
        if (first >= last) break;
        threads.emplace_back([&, first, last] {
            try {
                fn(first, last);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace quantstat
