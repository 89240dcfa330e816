//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (on by default) independent work items are
//! spread over the rayon pool; without it every helper runs sequentially.
//! Results are identical either way: work items never share accumulators.

use std::sync::atomic::{AtomicBool, Ordering};

/// Execution strategy for independent work items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this strategy will actually use more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

static KERNELS_PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggle row-chunked parallelism inside the dense kernels (matmul, attention).
pub fn set_parallel_kernels(enabled: bool) {
    KERNELS_PARALLEL.store(enabled, Ordering::Relaxed);
}

pub(crate) fn kernel_execution() -> Execution {
    if KERNELS_PARALLEL.load(Ordering::Relaxed) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Run `f` on consecutive `chunk`-sized mutable slices of `out`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(exec: Execution, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of worker threads available to [`Execution::Parallel`].
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
