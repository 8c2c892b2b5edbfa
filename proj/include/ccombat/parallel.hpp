#ifndef CCOMBAT_PARALLEL_HPP
#define CCOMBAT_PARALLEL_HPP

#include <cstddef>
#include <exception>
#include <functional>
#include <vector>

namespace ccombat {

struct ExecutionOptions {
    /// Worker threads; values < 1 mean one.
    int threads = 1;
};

/// Runs `job(i)` for i in [0, count) on up to `threads` workers. Jobs must
/// write only to their own slot of any shared output. Returns one exception
/// pointer per job (null on success) so callers can report failures in
/// index order regardless of scheduling.
std::vector<std::exception_ptr> parallel_for(std::size_t count, const ExecutionOptions& exec,
                                             const std::function<void(std::size_t)>& job);

}  // namespace ccombat

#endif
