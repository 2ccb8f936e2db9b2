//! Data-parallel execution helpers.
//!
//! Every hot loop in the crate runs through these helpers so that the
//! `parallel` feature can swap rayon in and out without touching numeric
//! code. The helpers are written so that parallel and sequential execution
//! produce bit-identical floating-point results: work is split into chunks
//! with fixed boundaries, chunk outputs are either written to disjoint
//! slices or collected in chunk order, and reductions fold the per-chunk
//! partials sequentially. Thread scheduling therefore never changes the
//! order of any floating-point operation.

use std::ops::Range;

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Batch rows per work unit. Fixed so chunk boundaries (and thus FP
/// summation order) do not depend on thread count.
pub const CHUNK_ROWS: usize = 16;

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the sequential code path even when the `parallel` feature is
/// enabled. Used by benchmarks and determinism tests to compare both paths
/// within one binary.
pub fn force_sequential(on: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// True when work may be dispatched to rayon.
#[inline]
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Fixed-boundary chunking of `0..n`.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Applies `f` to each chunk of `data`, passing the chunk index. Chunks are
/// disjoint, so parallel execution cannot reorder any write.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over fixed chunks of `0..n` and returns the results in chunk
/// order.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Send + Sync,
{
    let ranges = chunk_ranges(n, chunk);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return ranges.into_par_iter().map(f).collect();
    }
    ranges.into_iter().map(f).collect()
}

/// Like [`for_each_chunk_mut`] but also collects a result per chunk, in
/// chunk order. Useful when a pass writes disjoint output chunks and
/// produces a partial reduction (e.g. parameter gradients) at the same time.
pub fn map_chunks_mut<T, R, F>(data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return data
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    data.chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Applies `f` to paired chunks of two buffers that represent the same rows
/// (e.g. values and an auxiliary index per value group). `chunk_a` and
/// `chunk_b` must cover the same number of rows per chunk.
pub fn for_each_chunk_pair_mut<T, U, F>(
    a: &mut [T],
    chunk_a: usize,
    b: &mut [U],
    chunk_b: usize,
    f: F,
) where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        a.par_chunks_mut(chunk_a)
            .zip(b.par_chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
        return;
    }
    for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
        f(i, ca, cb);
    }
}

/// Chunked map followed by an in-order fold. The fold order is the chunk
/// order regardless of how the map was scheduled, so accumulation of
/// floating-point partials is deterministic.
pub fn map_reduce_in_order<R, F, G>(n: usize, chunk: usize, map: F, mut fold: G)
where
    R: Send,
    F: Fn(Range<usize>) -> R + Send + Sync,
    G: FnMut(R),
{
    for partial in map_chunks(n, chunk, map) {
        fold(partial);
    }
}

/// Applies `f` to every element of `items`, in parallel when enabled. Each
/// element is independent; `f` must not rely on execution order.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges_cover_exactly() {
        let ranges = chunk_ranges(10, 4);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn map_chunks_preserves_order() {
        let out = map_chunks(33, 7, |r| r.start);
        assert_eq!(out, vec![0, 7, 14, 21, 28]);
    }

    #[test]
    fn disjoint_writes_land_in_place() {
        let mut data = vec![0usize; 20];
        for_each_chunk_mut(&mut data, 6, |i, c| {
            for v in c.iter_mut() {
                *v = i + 1;
            }
        });
        assert_eq!(data[0], 1);
        assert_eq!(data[6], 2);
        assert_eq!(data[19], 4);
    }
}
