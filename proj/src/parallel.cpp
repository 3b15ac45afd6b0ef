#include "pyrafeat/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "pyrafeat/errors.hpp"

namespace pyrafeat {

std::size_t worker_threads() {
    const char* env = std::getenv("PYRAFEAT_THREADS");
    if (!env || !*env) return 1;
    try {
        const long v = std::stol(env);
        return v < 1 ? 1 : std::size_t(v);
    } catch (const std::exception&) {
        throw ConfigError(std::string("PYRAFEAT_THREADS must be an integer, got '") + env + "'");
    }
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    std::vector<std::exception_ptr> errors(n);
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace pyrafeat
