//! Data-parallel helpers.
//!
//! With the `parallel` feature the [`Execution::Parallel`] mode fans work out
//! over the rayon global pool; without it every mode runs sequentially.
//! Results always come back in input order, and every reduction in the crate
//! happens sequentially over the collected results, so output is bitwise
//! identical between modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this mode actually runs on more than one thread in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fallible order-preserving map; returns the first error in input order.
pub fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

/// Fallible order-preserving map over `0..n`.
pub fn try_map_range<R, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(exec, n, f).into_iter().collect()
}

/// Maximum of `f` over `0..n` (NaN-free inputs assumed). `max` is exact and
/// associative, so the parallel reduction matches the sequential one.
pub fn max_range<F>(exec: Execution, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n)
            .into_par_iter()
            .map(f)
            .reduce(|| f64::NEG_INFINITY, f64::max);
    }
    let _ = exec;
    (0..n).map(f).fold(f64::NEG_INFINITY, f64::max)
}
