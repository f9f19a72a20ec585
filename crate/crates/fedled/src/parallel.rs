//! Row-parallel execution helpers.
//!
//! Every numeric kernel in this crate parallelizes only over independent
//! output rows: each row is produced by the same sequential arithmetic
//! regardless of thread count, so results are bit-identical to the
//! sequential build. Reductions across rows are never parallelized.
//!
//! With the `parallel` feature disabled the same entry points degrade to
//! plain sequential loops.

/// Below this output size the rayon dispatch overhead outweighs the work.
#[cfg(feature = "parallel")]
const SEQ_CUTOFF: usize = 4096;

/// Apply `f` to each `width`-sized row of `out`, possibly in parallel.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    assert!(width > 0, "dimension error: zero row width");
    if out.len() <= SEQ_CUTOFF {
        for (i, row) in out.chunks_mut(width).enumerate() {
            f(i, row);
        }
        return;
    }
    use rayon::prelude::*;
    out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    assert!(width > 0, "dimension error: zero row width");
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}
