// SPDX-License-Identifier: Apache-2.0

//! Data-parallel helpers. With the `parallel` feature work is spread over the
//! rayon pool; without it, or with [`Backend::Sequential`], it runs in order
//! on the calling thread. Results are identical either way.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Backend {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Backend::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Backend::Sequential
        }
    }
}

/// Maps `f` over `range` and reduces with `merge`, stopping at the first error.
pub fn try_map_reduce<A, E, F, I, M>(range: Range<u64>, f: F, init: &I, merge: &M) -> Result<A, E>
where
    A: Send,
    E: Send,
    F: Fn(u64) -> Result<A, E> + Sync + Send,
    I: Fn() -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    try_map_reduce_with(Backend::default(), range, f, init, merge)
}

pub fn try_map_reduce_with<A, E, F, I, M>(
    backend: Backend,
    range: Range<u64>,
    f: F,
    init: &I,
    merge: &M,
) -> Result<A, E>
where
    A: Send,
    E: Send,
    F: Fn(u64) -> Result<A, E> + Sync + Send,
    I: Fn() -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    match backend {
        Backend::Sequential => {
            let mut acc = init();
            for i in range {
                acc = merge(acc, f(i)?);
            }
            Ok(acc)
        }
        #[cfg(feature = "parallel")]
        Backend::Rayon => {
            use rayon::prelude::*;
            range
                .into_par_iter()
                .map(f)
                .try_reduce(init, |a, b| Ok(merge(a, b)))
        }
    }
}

/// Runs `f` on a pool of `jobs` threads (sequentially when `jobs == 1` or the
/// `parallel` feature is off).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if jobs >= 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(f);
            }
        }
    }
    let _ = jobs;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree() {
        let f = |i: u64| -> Result<u64, ()> { Ok(i * i) };
        let seq = try_map_reduce_with(Backend::Sequential, 0..1000, f, &|| 0, &|a, b| a + b).unwrap();
        let def = try_map_reduce(0..1000, f, &|| 0, &|a, b| a + b).unwrap();
        assert_eq!(seq, def);
        assert_eq!(seq, (0..1000u64).map(|i| i * i).sum::<u64>());
    }

    #[test]
    fn errors_propagate() {
        let r = try_map_reduce(0..10, |i| if i == 7 { Err(i) } else { Ok(1) }, &|| 0, &|a, b| a + b);
        assert_eq!(r, Err(7));
    }
}
