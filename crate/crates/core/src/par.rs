//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon's pool; without it they run the same closures in order.
//!
//! Work is split so that results never depend on scheduling: each output
//! slot is written by exactly one closure call and reductions happen
//! sequentially afterwards.

/// Below this many multiply-adds a kernel runs inline even when parallel.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Builds an `m x n` zero-initialized buffer and lets `f(i, row)` fill row `i`.
pub fn rows<F, K>(m: usize, n: usize, work: usize, f: K) -> Vec<F>
where
    F: Copy + Default + Send,
    K: Fn(usize, &mut [F]) + Sync + Send,
{
    let mut out = vec![F::default(); m * n];
    if n == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
        return out;
    }
    let _ = work;
    for (i, row) in out.chunks_mut(n).enumerate() {
        f(i, row);
    }
    out
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, K>(items: &[T], f: K) -> Vec<R>
where
    T: Sync,
    R: Send,
    K: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` with kernels restricted to the calling thread.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

/// Whether this build fans work out over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
