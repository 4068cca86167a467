//! Execution policy for the data-parallel loops (batch forward/backward,
//! Monte Carlo trials, multi-seed sweeps).
//!
//! Work is always cut into fixed-size chunks whose results are combined in
//! index order, so `Sequential` and `Parallel` produce bitwise-identical
//! output. Without the `parallel` feature, `Parallel` runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of samples each work item handles in batched model passes.
pub const SAMPLE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over consecutive index ranges of length `chunk` (the last may
    /// be shorter), returning one result per range in order.
    pub fn map_chunks<R, F>(self, n: usize, chunk: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        let count = n.div_ceil(chunk);
        self.map(count, |c| {
            let start = c * chunk;
            f(start..(start + chunk).min(n))
        })
    }
}
