//! Row-parallel helpers.
//!
//! Every kernel in this crate writes each output row from its inputs alone, so
//! splitting rows across threads never changes a single bit of the result.
//! `SEMDIFF_THREADS` caps the worker count; `0` forces serial execution.

use std::sync::OnceLock;

use rayon::prelude::*;

/// Below this many output elements the thread hand-off costs more than it saves.
const PARALLEL_MIN_ELEMS: usize = 1 << 14;

enum Mode {
    Serial,
    Global,
    Pool(rayon::ThreadPool),
}

fn mode() -> &'static Mode {
    static MODE: OnceLock<Mode> = OnceLock::new();
    MODE.get_or_init(|| match std::env::var("SEMDIFF_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => Mode::Serial,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Mode::Pool)
            .unwrap_or(Mode::Serial),
        None => Mode::Global,
    })
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    let parallel = out.len() >= PARALLEL_MIN_ELEMS;
    match (parallel, mode()) {
        (true, Mode::Global) => out.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row)),
        (true, Mode::Pool(pool)) => pool.install(|| {
            out.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row))
        }),
        _ => out.chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row)),
    }
}
