//! Thin switch between rayon and sequential execution. Every call site hands
//! out disjoint &mut chunks, so the parallel and sequential paths produce
//! bit-identical results and the feature flag never changes output.

#[cfg(feature = "parallel")]
pub fn for_each_mut<T: Send, F: Fn(usize, &mut T) + Sync>(items: &mut [T], f: F) {
    use rayon::prelude::*;
    items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F: Fn(usize, &mut T)>(items: &mut [T], f: F) {
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}

#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    items: &mut [T],
    chunk: usize,
    f: F,
) {
    use rayon::prelude::*;
    items.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F: Fn(usize, &mut [T])>(items: &mut [T], chunk: usize, f: F) {
    for (i, c) in items.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
