//! Data-parallel map helpers with a sequential fallback.
//!
//! All fan-out in the lab (per-sample attacks, per-chunk scoring, per-seed
//! pipelines) goes through [`map_indexed`]. With the `parallel` feature the
//! closure runs on the rayon pool; without it the loop is sequential. Both
//! paths collect results in index order, so any downstream reduction sees
//! the same operand order and produces bit-identical floats.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sequential twin of [`map_indexed`], always available (used by the bench
/// suite to compare against the parallel path within one build).
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Run `f` on a rayon pool with `jobs` threads; `None` keeps the default.
/// Without the `parallel` feature `f` simply runs on the current thread.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match jobs {
            Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("rayon pool")
                .install(f),
            _ => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let par: Vec<f64> = map_indexed(1000, f);
        let seq: Vec<f64> = map_indexed_seq(1000, f);
        assert_eq!(par, seq);
    }

    #[test]
    fn jobs_override_runs_closure() {
        let out = with_jobs(Some(1), || map_indexed(16, |i| i * 2));
        assert_eq!(out[15], 30);
    }
}
