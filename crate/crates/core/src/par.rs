//! Rayon/sequential execution switch.
//!
//! Batch gradients, corpus generation and evaluation are data-parallel per
//! example. With the `parallel` feature (default) they run on rayon; without
//! it the same call sites run sequentially. Results are collected in input
//! order and reduced sequentially, so outputs are bit-identical across thread
//! counts and across the two modes.

/// Map `f` over `items`, preserving order. Parallel when the `parallel`
/// feature is enabled.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept public so benches and tests can compare
/// against the parallel path under identical inputs.
pub fn ordered_map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over index range, preserving order.
#[cfg(feature = "parallel")]
pub fn ordered_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
