//! Data-parallel helpers with a sequential fallback.
//!
//! Every batched kernel in the crate (matmul rows, per-row bisection,
//! per-sequence evaluation, sweep cells, gradient checks) goes through the
//! functions here. With the `parallel` feature they fan out over the rayon
//! pool; without it, or when [`ExecMode::Sequential`] is selected at
//! runtime, they run on the calling thread. Results are always collected in
//! index order, so both modes produce bitwise-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Selects the execution mode for subsequent batched calls.
///
/// Has no effect on the outcome when the crate is built without the
/// `parallel` feature.
pub fn set_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => 0,
            ExecMode::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Runs `f` with the given mode, restoring the previous one afterwards.
pub fn with_mode<T>(mode: ExecMode, f: impl FnOnce() -> T) -> T {
    let prev = self::mode();
    set_mode(mode);
    let out = f();
    set_mode(prev);
    out
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(usize, &'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        return items.par_iter().enumerate().map(|(i, s)| f(i, s)).collect();
    }
    items.iter().enumerate().map(|(i, s)| f(i, s)).collect()
}

/// Calls `f(row_index, row)` for each `width`-sized chunk of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
