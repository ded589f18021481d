//! Row-parallel execution with a sequential fallback.
//!
//! Every kernel in the crate writes independent output rows, so the parallel
//! and sequential paths produce bitwise-identical results. The `parallel`
//! feature (on by default) enables the rayon path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How row-independent kernels distribute their work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

// Below this many output elements the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 4096;

impl Exec {
    /// Calls `f(row_index, row)` for every `width`-sized row of `out`.
    pub fn for_each_row<F>(self, out: &mut [f32], width: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Send + Sync,
    {
        if width == 0 {
            return;
        }
        match self {
            Exec::Sequential => out
                .chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                if out.len() < PAR_MIN_ELEMS {
                    out.chunks_mut(width)
                        .enumerate()
                        .for_each(|(i, row)| f(i, row));
                } else {
                    out.par_chunks_mut(width)
                        .enumerate()
                        .for_each(|(i, row)| f(i, row));
                }
            }
        }
    }

    /// Maps `f` over `0..n`, keeping the output order.
    pub fn map_indices<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Every mode compiled into this build.
    pub fn available() -> Vec<Exec> {
        vec![
            Exec::Sequential,
            #[cfg(feature = "parallel")]
            Exec::Parallel,
        ]
    }
}
