//! Process-wide switch for intra-kernel parallelism.
//!
//! Dense kernels parallelize over independent output planes only, and every
//! reduction runs in a fixed order, so results are bit-identical whether the
//! switch is on or off.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each contiguous chunk of `chunk` elements, in parallel when enabled.
///
/// Chunks are disjoint, so the schedule cannot affect the result.
pub fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && buf.len() % chunk == 0);
    if parallel_enabled() && buf.len() / chunk > 1 {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in buf.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_match_serial() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        set_parallel(true);
        for_each_chunk(&mut a, 8, |i, c| c.iter_mut().for_each(|v| *v = i as f64));
        set_parallel(false);
        for_each_chunk(&mut b, 8, |i, c| c.iter_mut().for_each(|v| *v = i as f64));
        set_parallel(true);
        assert_eq!(a, b);
    }
}
