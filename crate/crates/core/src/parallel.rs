//! Thin dispatch layer between rayon and plain sequential loops.
//!
//! Every data-parallel kernel in this crate writes disjoint output slices, so
//! the parallel and sequential paths produce bit-identical results; the
//! `parallel` feature only changes scheduling. Reductions that would depend on
//! arrival order are always performed sequentially in index order.

/// Apply `f` to each index in `0..n`, writing into the matching slot of `out`.
///
/// `out` slots must be independent; `f(i, &mut out[i])` runs once per index.
pub fn for_each_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, slot)| f(i, slot));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, slot) in out.iter_mut().enumerate() {
            f(i, slot);
        }
    }
}

/// Sequential twin of [`for_each_indexed`], kept callable regardless of
/// features so benchmarks can compare the two schedulers directly.
pub fn for_each_indexed_seq<T, F>(out: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    for (i, slot) in out.iter_mut().enumerate() {
        f(i, slot);
    }
}

/// Map `0..n` to a vector, scheduling across threads when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send + Default + Clone,
    F: Fn(usize) -> T + Sync,
{
    let mut out = vec![T::default(); n];
    for_each_indexed(&mut out, |i, slot| *slot = f(i));
    out
}

/// Chunked mutable iteration over a flat buffer: `f(chunk_start, chunk)`.
pub fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(ci, c)| f(ci * chunk, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (ci, c) in buf.chunks_mut(chunk).enumerate() {
            f(ci * chunk, c);
        }
    }
}

/// Sequential twin of [`for_each_chunk`].
pub fn for_each_chunk_seq<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (ci, c) in buf.chunks_mut(chunk).enumerate() {
        f(ci * chunk, c);
    }
}
