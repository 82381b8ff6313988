//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps below run on the rayon pool; without it they
//! are plain iterator maps. Results are always returned in input order, so callers that
//! reduce them in order get bit-identical output from either build.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per work unit when splitting a batch or dataset. Fixed so that the
/// floating-point reduction tree does not depend on the thread count.
pub const CHUNK_ROWS: usize = 16;

/// Whether this build runs the maps on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Applies `f` to consecutive row ranges of `CHUNK_ROWS` covering `0..rows`.
pub fn map_row_chunks<R, F>(rows: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let ranges: Vec<Range<usize>> = (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|start| start..(start + CHUNK_ROWS).min(rows))
        .collect();
    map_ordered(&ranges, |r| f(r.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_all_rows_in_order() {
        let ranges = map_row_chunks(37, |r| r);
        assert_eq!(ranges.len(), 3);
        assert_eq!(ranges[0], 0..16);
        assert_eq!(ranges[2], 32..37);
        assert!(map_row_chunks(0, |r| r).is_empty());
    }

    #[test]
    fn map_keeps_input_order() {
        let v: Vec<u32> = (0..1000).collect();
        let out = map_ordered(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &x)| x == 2 * i as u32));
    }
}
