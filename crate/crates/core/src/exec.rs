//! Replication scheduling and per-replication random streams.
//!
//! Results are collected into index-addressed slots, so output never
//! depends on the worker count or on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Runs on the rayon pool when the `parallel` feature is enabled and
    /// falls back to sequential otherwise.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && *self == Execution::Parallel
    }
}

/// `[f(0), ..., f(count - 1)]`.
pub fn map_indexed<T, F>(exec: Execution, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..count).map(f).collect()
}

/// Independent stream `index` of the generator seeded by `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
