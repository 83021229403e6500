//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! are plain iterator loops. Results are always collected in input order so
//! both paths produce bit-identical output. The mode can also be forced at
//! runtime, which is what the benchmarks use to compare the two paths.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

const AUTO: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(AUTO);

/// Force a mode for the whole process. `Parallel` silently degrades to
/// sequential when the crate was built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => SEQ,
        Mode::Parallel => PAR,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        SEQ => Mode::Sequential,
        _ if cfg!(feature = "parallel") => Mode::Parallel,
        _ => Mode::Sequential,
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Like [`map_range`] but stops at the first error (in index order).
pub fn try_map_range<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}
