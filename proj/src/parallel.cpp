#include "ccombat/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace ccombat {

std::vector<std::exception_ptr> parallel_for(std::size_t count, const ExecutionOptions& exec,
                                             const std::function<void(std::size_t)>& job) {
    std::vector<std::exception_ptr> errors(count);
    auto run_one = [&](std::size_t i) {
        try {
            job(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    const std::size_t workers =
        std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, exec.threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) run_one(i);
        return errors;
    }

    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) run_one(i);
            });
        }
    }
    return errors;
}

}  // namespace ccombat
