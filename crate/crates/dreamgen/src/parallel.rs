//! Schedule-independent data parallelism.
//!
//! Work is split into chunks whose boundaries depend only on the input length,
//! never on the worker count. Each chunk is computed independently and results
//! are combined in chunk order, so any thread count (including the sequential
//! fallback built without the `parallel` feature) produces bit-identical
//! results.
//!
//! Callers pick the pool: run inside `rayon::ThreadPool::install` to bound
//! worker count, or call directly to use the global pool. With one thread
//! requested (or the feature disabled) chunks run as a plain loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk width for per-sample batch work (SD generation, sample grads).
pub const SAMPLE_CHUNK: usize = 8;

/// Split `0..n` into chunks of width `chunk`, map each chunk, return results
/// in chunk order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    assert!(chunk > 0, "chunk width must be positive");
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect();
    run_ranges(ranges, f)
}

/// Map `f` over `0..n` one item at a time, preserving order.
pub fn map_items<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    map_chunks(n, 1, move |r| f(r.start))
}

#[cfg(feature = "parallel")]
fn run_ranges<T, F>(ranges: Vec<std::ops::Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    if rayon::current_num_threads() <= 1 || ranges.len() <= 1 {
        ranges.into_iter().map(f).collect()
    } else {
        ranges.into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_ranges<T, F>(ranges: Vec<std::ops::Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    ranges.into_iter().map(f).collect()
}

/// Run `f` on a pool capped at `threads` workers. `threads == 1` (or a build
/// without the `parallel` feature) runs `f` on the current thread.
pub fn with_threads<T, F>(threads: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("failed to build worker pool");
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_boundaries_are_fixed() {
        let sums = map_chunks(10, 4, |r| r.sum::<usize>());
        assert_eq!(sums, vec![0 + 1 + 2 + 3, 4 + 5 + 6 + 7, 8 + 9]);
    }

    #[test]
    fn results_identical_across_thread_counts() {
        let work = |r: std::ops::Range<usize>| -> f64 {
            r.map(|i| ((i as f64) + 0.1).sin()).sum()
        };
        let seq = with_threads(1, || map_chunks(100, SAMPLE_CHUNK, work));
        let par = with_threads(4, || map_chunks(100, SAMPLE_CHUNK, work));
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_input_yields_empty_output() {
        let out: Vec<usize> = map_chunks(0, 8, |r| r.len());
        assert!(out.is_empty());
    }
}
