//! Order-preserving fan-out for independent per-item work.
//!
//! With the `parallel` feature the closure runs on the rayon pool; without it
//! (or when the caller passes `parallel = false`) the loop runs sequentially.
//! Both paths collect results in index order, so any deterministic caller
//! gets bit-identical output either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    map_indexed_seq(n, f)
}

/// Sequential reference path; always available so benchmarks can compare
/// against the parallel path directly.
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving item order.
pub fn map_slice<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    map_indexed(items.len(), parallel, |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let seq = map_indexed_seq(100, |i| i * i);
        let par = map_indexed(100, true, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn slice_map_preserves_order() {
        let items = vec![3.0f64, 1.0, 4.0, 1.0, 5.0];
        let out = map_slice(&items, true, |x| x * 2.0);
        assert_eq!(out, vec![6.0, 2.0, 8.0, 2.0, 10.0]);
    }
}
