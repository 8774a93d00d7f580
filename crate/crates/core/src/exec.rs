//! Data-parallel execution over independent work items.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it, or with a single worker, items run in order on the calling
//! thread. Results are always returned in item order and no floating-point
//! reduction is ever split across threads, so outputs do not depend on the
//! worker count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Exec {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Exec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Exec").field("workers", &self.workers).finish()
    }
}

impl Default for Exec {
    fn default() -> Self {
        Self::with_workers(0)
    }
}

impl Exec {
    /// Everything on the calling thread.
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 0` means "all available cores".
    pub fn with_workers(workers: usize) -> Self {
        if workers == 1 {
            return Self::sequential();
        }
        #[cfg(feature = "parallel")]
        {
            let pool = if workers == 0 {
                None
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .ok()
                    .map(Arc::new)
            };
            Self { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { workers }
        }
    }

    /// Requested worker count (0 = all cores).
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && self.workers != 1
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.workers != 1 {
            use rayon::prelude::*;
            let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
            return match &self.pool {
                Some(pool) => pool.install(run),
                None => run(),
            };
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_for_any_worker_count() {
        let want: Vec<u64> = (0..1000u64).map(|i| i * i).collect();
        for w in [0, 1, 2, 4] {
            let got = Exec::with_workers(w).map(1000, |i| (i as u64) * (i as u64));
            assert_eq!(got, want, "workers={w}");
        }
    }
}
