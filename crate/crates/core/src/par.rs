//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to
//! rayon; without it every call runs sequentially. Work items are always
//! independent and results are written to fixed slots, so the output is
//! identical under both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(index, chunk)` on each `chunk`-sized piece of `data`.
pub fn for_each_chunk<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && data.len() > chunk {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of threads a parallel call would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let a = map_range(Exec::Sequential, 1000, |i| (i as f64).sqrt());
        let b = map_range(Exec::Parallel, 1000, |i| (i as f64).sqrt());
        assert_eq!(a, b);

        let mut x = vec![0.0; 100];
        let mut y = vec![0.0; 100];
        for_each_chunk(Exec::Sequential, &mut x, 7, |i, c| c.iter_mut().for_each(|v| *v = i as f64));
        for_each_chunk(Exec::Parallel, &mut y, 7, |i, c| c.iter_mut().for_each(|v| *v = i as f64));
        assert_eq!(x, y);
    }
}
