//! Execution policy for the data-parallel loops.
//!
//! With the `parallel` feature (default) the [`ExecPolicy::Parallel`] variant
//! dispatches through rayon; without it every policy runs sequentially.
//! Reductions always happen in input order, so both policies produce
//! bit-identical results.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    #[default]
    Sequential,
    Parallel,
}

impl ExecPolicy {
    /// `Parallel` when the crate was built with rayon support.
    pub fn best() -> Self {
        if cfg!(feature = "parallel") {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            ExecPolicy::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    /// Fill disjoint mutable chunks in place.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk_lens: &[usize], f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let mut chunks = Vec::with_capacity(chunk_lens.len());
        let mut rest = data;
        for &len in chunk_lens {
            let (head, tail) = rest.split_at_mut(len);
            chunks.push(head);
            rest = tail;
        }
        match self {
            #[cfg(feature = "parallel")]
            ExecPolicy::Parallel => {
                use rayon::prelude::*;
                chunks
                    .into_par_iter()
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => chunks.into_iter().enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}

/// Run `f` inside a dedicated pool of `threads` workers (or inline when
/// rayon is unavailable or `threads <= 1`).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if threads > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}
