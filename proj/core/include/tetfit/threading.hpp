#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace tetfit {

// Process-wide worker count. 0 requests hardware concurrency. The TETFIT_THREADS
// environment variable seeds the initial value; an explicit set_thread_count
// wins over the environment.
int thread_count();
void set_thread_count(int n);

// Splits [0,n) into exactly `chunks()` contiguous static ranges and runs
// fn(chunk_index, begin, end) for each, possibly concurrently. The partition
// depends only on n and the configured thread count, and callers that write
// per-chunk results and reduce them in chunk order get results independent of
// scheduling. With one worker everything runs inline on the calling thread.
void parallel_for(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn);

// Number of chunks parallel_for will use for the current configuration.
int parallel_chunks();

}  // namespace tetfit
