//! Batch-map helpers with a rayon and a sequential lane.
//!
//! Every data-parallel loop in the crate goes through these two functions so
//! that builds without the `parallel` feature change nothing but wall-clock
//! time. Both lanes produce results in input order, and all reductions over
//! the returned vectors are written as ordinary sequential folds, so floating
//! point output is identical bit for bit regardless of feature flags or
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over a slice, preserving order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Sequential lane of [`map_slice`].
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sequential lane of [`map_range`].
#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
