//! Data-parallel helpers.
//!
//! With the `parallel` feature the maps below run on the rayon pool, unless
//! the worker count has been set to 1. Results are always returned in index
//! order so reductions performed by the caller are independent of the
//! number of workers.

use std::sync::atomic::{AtomicUsize, Ordering};

static WORKERS: AtomicUsize = AtomicUsize::new(0);

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "RESTCAL_WORKERS";

/// Sets the worker count. `0` means "use the rayon default", `1` forces the
/// sequential path.
pub fn set_workers(n: usize) {
    WORKERS.store(n, Ordering::Relaxed);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // The global pool can only be built once; later calls keep the first size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Reads the worker count from [`WORKERS_ENV`] if present.
pub fn init_from_env() {
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        set_workers(n);
    }
}

pub fn workers() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

fn sequential() -> bool {
    !cfg!(feature = "parallel") || workers() == 1
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if sequential() || n < 2 {
        return (0..n).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Consumes `items`, mapping each with its index; output keeps input order.
pub fn map_owned<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    if sequential() || items.len() < 2 {
        return items.into_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// Applies `f` to each element of a mutable slice.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    if sequential() || items.len() < 2 {
        items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map_range(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn for_each_mut_touches_all() {
        let mut v = vec![0usize; 17];
        for_each_mut(&mut v, |i, x| *x = i + 1);
        assert_eq!(v.iter().sum::<usize>(), (1..=17usize).sum::<usize>());
    }
}
