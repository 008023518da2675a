#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cmm {

// Fixed-size pool with static work partitioning. The thread count is frozen at
// first use (CMM_THREADS env var, else hardware concurrency) and recorded in
// checkpoints; for a fixed count, every partition of every loop is identical
// across runs, which keeps float reduction order — and therefore trajectories —
// bit-stable.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int num_threads() const { return int(workers_.size()) + 1; }

    // Runs fn(t) for t in [0, nt); t = 0 executes on the caller.
    void run(int nt, const std::function<void(int)>& fn) {
        if (nt <= 1) {
            fn(0);
            return;
        }
        {
            std::unique_lock lk(m_);
            job_ = &fn;
            nt_job_ = nt;
            pending_ = nt - 1;
            ++gen_;
        }
        cv_work_.notify_all();
        fn(0);
        std::unique_lock lk(m_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
        if (err_) {
            auto e = err_;
            err_ = nullptr;
            std::rethrow_exception(e);
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock lk(m_);
            stop_ = true;
            ++gen_;
        }
        cv_work_.notify_all();
        for (auto& w : workers_) w.join();
    }

private:
    ThreadPool() {
        int n = int(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("CMM_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) n = v;
        }
        if (n < 1) n = 1;
        for (int i = 1; i < n; ++i)
            workers_.emplace_back([this, i] { worker(i); });
    }

    void worker(int id) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* job;
            int nt;
            {
                std::unique_lock lk(m_);
                cv_work_.wait(lk, [&] { return gen_ != seen; });
                seen = gen_;
                if (stop_) return;
                job = job_;
                nt = nt_job_;
            }
            if (id < nt && job) {
                try {
                    (*job)(id);
                } catch (...) {
                    std::unique_lock lk(m_);
                    if (!err_) err_ = std::current_exception();
                }
            }
            {
                std::unique_lock lk(m_);
                if (id < nt && --pending_ == 0) cv_done_.notify_one();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex m_;
    std::condition_variable cv_work_, cv_done_;
    const std::function<void(int)>* job_ = nullptr;
    std::exception_ptr err_;
    uint64_t gen_ = 0;
    int nt_job_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

inline int num_threads() { return ThreadPool::instance().num_threads(); }

// body(begin, end) over disjoint contiguous chunks of [0, n).
template <class F>
void parallel_for(int64_t n, F&& body, int64_t grain = 16384) {
    if (n <= 0) return;
    int nt = num_threads();
    int64_t max_chunks = (n + grain - 1) / grain;
    if (max_chunks < nt) nt = int(max_chunks);
    if (nt <= 1) {
        body(int64_t(0), n);
        return;
    }
    int64_t base = n / nt, rem = n % nt;
    std::function<void(int)> fn = [&](int t) {
        int64_t b = t * base + std::min<int64_t>(t, rem);
        int64_t e = b + base + (t < rem ? 1 : 0);
        body(b, e);
    };
    ThreadPool::instance().run(nt, fn);
}

}  // namespace cmm
