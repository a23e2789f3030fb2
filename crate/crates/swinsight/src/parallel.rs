//! Thread pool shared by op kernels. `SWINSIGHT_THREADS` caps the size.
//!
//! Work is only ever split across disjoint output slices, never across a
//! shared accumulator, so the numeric result never depends on the pool size.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: OnceLock<ThreadPool> = OnceLock::new();

pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var("SWINSIGHT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool construction")
    })
}

/// Heuristic: parallel dispatch only pays off for enough independent work.
pub fn worth_it(batches: usize, flops_per_batch: usize) -> bool {
    batches >= 4 && batches * flops_per_batch >= 1 << 16 && pool().current_num_threads() > 1
}
