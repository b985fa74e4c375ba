//! Worker-count control shared by the numeric kernels.
//!
//! Work is split per batch element only, and every cross-sample reduction is
//! summed in sample order afterwards, so results are bitwise identical for any
//! thread count.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

/// Environment variable bounding worker parallelism. `1` forces serial execution.
pub const THREADS_ENV: &str = "CELLSEARCH_THREADS";

fn pool() -> Option<&'static ThreadPool> {
    static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&t| t > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        if threads <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .ok()
        }
    })
    .as_ref()
}

/// Number of worker threads in use.
pub fn threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

/// Run `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match pool() {
        Some(p) if out.len() > chunk_len => p.install(|| {
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }),
        _ => out
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
