#include "tetfit/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "tetfit/common.hpp"

namespace tetfit {
namespace {

int clamp_threads(int n) {
    if (n <= 0) {
        unsigned hw = std::thread::hardware_concurrency();
        n = hw == 0 ? 1 : static_cast<int>(hw);
    }
    return n > 64 ? 64 : n;
}

int initial_thread_count() {
    if (const char* env = std::getenv("TETFIT_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0') return clamp_threads(static_cast<int>(v));
    }
    return clamp_threads(0);
}

std::atomic<int> g_threads{initial_thread_count()};

// Lazily started pool for parallel_for. One job is in flight at a time and
// only one thread publishes jobs (nested or concurrent parallel_for is not
// supported). Chunk claiming happens under the mutex: a job's chunk counter is
// only reset once every claimed chunk has been accounted for, so a worker can
// never claim into a job it was not woken for. Chunks are coarse, so the two
// lock round-trips per chunk are noise.
struct Pool {
    std::mutex mu;
    std::condition_variable cv_job, cv_done;
    const std::function<void(int, std::size_t, std::size_t)>* fn = nullptr;
    std::size_t n = 0;
    int chunks = 0;
    int next = 0;
    int pending = 0;
    std::uint64_t generation = 0;
    std::exception_ptr error;
    std::vector<std::thread> workers;
    bool stop = false;

    static void run_chunk(const std::function<void(int, std::size_t, std::size_t)>& f,
                          std::size_t n, int chunks, int c) {
        std::size_t base = n / chunks, rem = n % chunks;
        std::size_t begin = c * base + (static_cast<std::size_t>(c) < rem ? c : rem);
        std::size_t len = base + (static_cast<std::size_t>(c) < rem ? 1 : 0);
        if (len > 0) f(c, begin, begin + len);
    }

    // Called with mu unlocked. The first exception is kept and rethrown by
    // run(); the chunk still counts as finished so the job can drain.
    void run_chunk_guarded(const std::function<void(int, std::size_t, std::size_t)>& f,
                           std::size_t n, int chunks, int c) {
        try {
            run_chunk(f, n, chunks, c);
        } catch (...) {
            std::lock_guard lk(mu);
            if (!error) error = std::current_exception();
        }
    }

    void worker() {
        std::uint64_t seen = 0;
        std::unique_lock lk(mu);
        for (;;) {
            cv_job.wait(lk, [&] { return stop || generation != seen; });
            if (stop) return;
            seen = generation;
            while (next < chunks) {
                int c = next++;
                auto* f = fn;
                std::size_t len = n;
                int nchunks = chunks;
                lk.unlock();
                run_chunk_guarded(*f, len, nchunks, c);
                lk.lock();
                if (--pending == 0) cv_done.notify_one();
            }
        }
    }

    void run(std::size_t len, int nchunks, const std::function<void(int, std::size_t, std::size_t)>& f) {
        std::unique_lock lk(mu);
        while (static_cast<int>(workers.size()) < nchunks - 1)
            workers.emplace_back([this] { worker(); });
        fn = &f;
        n = len;
        chunks = nchunks;
        next = 0;
        pending = nchunks;
        ++generation;
        cv_job.notify_all();
        while (next < chunks) {
            int c = next++;
            lk.unlock();
            run_chunk_guarded(f, len, nchunks, c);
            lk.lock();
            if (--pending == 0) cv_done.notify_one();
        }
        cv_done.wait(lk, [&] { return pending == 0; });
        fn = nullptr;
        if (error) {
            std::exception_ptr e = error;
            error = nullptr;
            std::rethrow_exception(e);
        }
    }

    ~Pool() {
        {
            std::lock_guard lk(mu);
            stop = true;
        }
        cv_job.notify_all();
        for (auto& w : workers) w.join();
    }
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

int thread_count() { return g_threads.load(); }

void set_thread_count(int n) { g_threads.store(clamp_threads(n)); }

int parallel_chunks() { return thread_count(); }

void parallel_for(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    int chunks = parallel_chunks();
    if (static_cast<std::size_t>(chunks) > n) chunks = static_cast<int>(n);
    if (chunks == 1) {
        Pool::run_chunk(fn, n, 1, 0);
        return;
    }
    pool().run(n, chunks, fn);
}

}  // namespace tetfit
