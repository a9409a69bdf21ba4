//! Optional item-level parallelism.
//!
//! Work is only ever split across independent items (batch elements) whose
//! results are merged in index order, so the output is bitwise identical for
//! every thread count.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();

/// Thread cap from `FCDX_THREADS`; defaults to 1.
pub fn threads() -> usize {
    std::env::var("FCDX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn pool() -> Option<&'static ThreadPool> {
    POOL.get_or_init(|| {
        let n = threads();
        (n > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool"))
    })
    .as_ref()
}

/// `(0..n).map(f).collect()`, possibly spread across the pool.
pub fn map_items<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
