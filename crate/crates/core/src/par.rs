//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these run on the current rayon pool; without
//! it they are plain iterator loops. Every helper preserves input order, and
//! reductions use fixed-size chunks combined left to right, so results are
//! bit-identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by [`chunked_reduce`]. Fixed so the reassociation pattern
/// of floating-point sums does not depend on the machine.
pub const REDUCE_CHUNK: usize = 256;

/// `items.iter().map(f).collect()`, in parallel when enabled.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

/// Applies `f` to consecutive `chunk`-sized mutable chunks of `out` together
/// with the chunk index.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Folds `items` in chunks of [`REDUCE_CHUNK`] with `fold` starting from
/// `init()`, then combines the partial results in chunk order.
pub fn chunked_reduce<T, A, I, F, C>(items: &[T], init: I, fold: F, combine: C) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, &T) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let partial = |c: &[T]| c.iter().fold(init(), &fold);
    #[cfg(feature = "parallel")]
    let parts: Vec<A> = items.par_chunks(REDUCE_CHUNK).map(partial).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<A> = items.chunks(REDUCE_CHUNK).map(partial).collect();
    parts.into_iter().fold(init(), combine)
}

/// Number of worker threads the helpers will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Runs `f` with at most `threads` workers (0 = library default).
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {threads}-thread pool ({e}); using the default");
                f()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..1000).collect();
        assert_eq!(map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn chunked_reduce_is_thread_count_independent() {
        let v: Vec<f64> = (0..10_000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let sum = |t| with_threads(t, || chunked_reduce(&v, || 0.0, |a, x| a + x, |a, b| a + b));
        let one = sum(1);
        assert_eq!(one.to_bits(), sum(4).to_bits());
        assert_eq!(one.to_bits(), sum(0).to_bits());
    }

    #[test]
    fn chunks_cover_slice() {
        let mut out = vec![0usize; 10];
        for_each_chunk_mut(&mut out, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(out, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
