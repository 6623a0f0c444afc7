//! Sequential / data-parallel execution switch.
//!
//! Every data-parallel loop in the crate goes through [`Exec`] so that the
//! same build can run either way. Without the `parallel` feature,
//! [`Exec::Parallel`] silently runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` on each mutable chunk of `data` together with the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let items: Vec<u32> = (0..1000).collect();
        let a = Exec::Sequential.map(&items, |x| x * 3);
        let b = Exec::Parallel.map(&items, |x| x * 3);
        assert_eq!(a, b);
        assert_eq!(
            Exec::Sequential.map_range(77, |i| i * i),
            Exec::Parallel.map_range(77, |i| i * i)
        );
    }

    #[test]
    fn chunked_writes_are_complete() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut v = vec![0usize; 103];
            exec.for_each_chunk_mut(&mut v, 10, |ci, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ci * 10 + j;
                }
            });
            assert!(v.iter().enumerate().all(|(i, &x)| i == x));
        }
    }
}
