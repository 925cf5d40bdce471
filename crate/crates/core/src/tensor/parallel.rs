//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into disjoint output chunks and every chunk is
//! computed by the same code path, so results are bit-identical whether the
//! chunks run on the rayon pool or in a plain loop. Deterministic mode (the
//! `--deterministic` flag or `MPDIT_DETERMINISTIC=1`) pins execution to the
//! calling thread. Without the `parallel` feature everything is sequential.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const UNSET: u8 = 0;
const OFF: u8 = 1;
const ON: u8 = 2;

static DETERMINISTIC: AtomicU8 = AtomicU8::new(UNSET);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(if on { ON } else { OFF }, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    match DETERMINISTIC.load(Ordering::Relaxed) {
        ON => true,
        OFF => false,
        _ => {
            let on = std::env::var("MPDIT_DETERMINISTIC").is_ok_and(|v| v == "1");
            set_deterministic(on);
            on
        }
    }
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !is_deterministic()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel; output order is preserved.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
