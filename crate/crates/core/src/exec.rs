//! Execution strategy for the data-parallel loops.
//!
//! Every parallel path computes each output element with the same arithmetic
//! in the same order as the sequential path, so results are bit-identical
//! between the two. With the `parallel` feature disabled, [`Exec::Parallel`]
//! silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    /// Whether this strategy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Picks `Sequential` when the amount of work is too small to amortize
    /// thread dispatch.
    pub fn for_work(self, work: usize) -> Exec {
        const MIN_PARALLEL_WORK: usize = 1 << 15;
        if work < MIN_PARALLEL_WORK {
            Exec::Sequential
        } else {
            self
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Calls `f(row_index, row)` for each `row_len`-sized chunk of `out`.
    pub fn for_rows<T, F>(self, out: &mut [T], row_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if row_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let seq = Exec::Sequential.map_range(1000, |i| (i as f64).sqrt());
        let par = Exec::Parallel.map_range(1000, |i| (i as f64).sqrt());
        assert_eq!(seq, par);

        let mut a = vec![0usize; 60];
        let mut b = vec![0usize; 60];
        Exec::Sequential.for_rows(&mut a, 6, |r, row| row.iter_mut().for_each(|v| *v = r));
        Exec::Parallel.for_rows(&mut b, 6, |r, row| row.iter_mut().for_each(|v| *v = r));
        assert_eq!(a, b);
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Exec::Parallel.for_work(10), Exec::Sequential);
    }
}
