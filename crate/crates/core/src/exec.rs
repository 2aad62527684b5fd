//! Data-parallel execution strategy.
//!
//! Row-parallel kernels and batch sweeps go through [`Exec`]. With the
//! `parallel` feature (on by default) `Exec::Parallel` runs on the rayon pool;
//! without it every strategy falls back to the sequential path. Results never
//! depend on the strategy: work is split by independent output rows only.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Calls `f(row_index, row)` for every `row_len`-sized chunk of `data`.
    pub fn for_each_row<T, F>(self, data: &mut [T], row_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        if row_len == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => data
                .par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            _ => data
                .chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
        }
    }

    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Send + Sync,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let mut a = vec![0u32; 12];
        let mut b = a.clone();
        let fill = |i: usize, row: &mut [u32]| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as u32;
            }
        };
        Exec::Sequential.for_each_row(&mut a, 4, fill);
        Exec::Parallel.for_each_row(&mut b, 4, fill);
        assert_eq!(a, b);
        assert_eq!(Exec::Parallel.map(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
