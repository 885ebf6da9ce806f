//! Parallel/sequential execution shim.
//!
//! Heavy stages (per-imputation analysis, grid cells, per-draw imputation)
//! map over independent work items. With the `parallel` feature the map runs
//! on rayon; without it the same code compiles to a plain sequential loop.
//! Results are collected in index order either way, so output is identical
//! regardless of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential variant, always available (used by the benchmark suite as the
/// baseline the parallel path is compared against).
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Run `f` inside a rayon pool with `workers` threads when the `parallel`
/// feature is on and `workers > 0`; otherwise run it directly. `workers == 0`
/// means "library default" (rayon's global pool, or sequential without the
/// feature).
pub fn with_worker_limit<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("rayon pool");
            return pool.install(f);
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

/// Derive a per-stream seed from a base seed (splitmix64 step), so that
/// parallel work items own disjoint, reproducible random streams.
pub fn stream_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_index_order() {
        let xs = map_indexed(100, |i| i * i);
        let ys = map_indexed_seq(100, |i| i * i);
        assert_eq!(xs, ys);
    }

    #[test]
    fn stream_seeds_distinct() {
        let a = stream_seed(42, 0);
        let b = stream_seed(42, 1);
        let c = stream_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
