//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through these functions so that
//! the `parallel` feature (rayon) can be switched off and so results are
//! identical under either schedule: folds must be commutative and
//! associative, searches return the lowest matching index.

use serde::{Deserialize, Serialize};

/// How to schedule index-space loops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    /// Uses the ambient rayon pool. Falls back to sequential when the
    /// crate is built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Fold over `0..n` and merge partial accumulators.
pub fn try_fold_range<A, E, I, F, M>(
    n: usize,
    par: Parallelism,
    init: I,
    fold: F,
    merge: M,
) -> Result<A, E>
where
    A: Send,
    E: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, usize) -> Result<A, E> + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n)
            .into_par_iter()
            .try_fold(&init, &fold)
            .try_reduce(&init, |a, b| Ok(merge(a, b)));
    }
    let _ = (&merge, par);
    let mut acc = init();
    for i in 0..n {
        acc = fold(acc, i)?;
    }
    Ok(acc)
}

/// Map each index in `0..n`, preserving order.
pub fn try_map_range<T, E, F>(n: usize, par: Parallelism, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Lowest index in `0..n` satisfying `pred`.
pub fn find_first_index<F>(n: usize, par: Parallelism, pred: F) -> Option<usize>
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().find_first(|&i| pred(i));
    }
    let _ = par;
    (0..n).find(|&i| pred(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_agree() {
        for par in [Parallelism::Sequential, Parallelism::Parallel] {
            let sum: Result<u64, ()> =
                try_fold_range(1000, par, || 0u64, |a, i| Ok(a + i as u64), |a, b| a + b);
            assert_eq!(sum, Ok(499_500));
            let v: Result<Vec<usize>, ()> = try_map_range(10, par, |i| Ok(i * i));
            assert_eq!(v.unwrap()[9], 81);
            assert_eq!(find_first_index(1000, par, |i| i % 97 == 96), Some(96));
            assert_eq!(find_first_index(10, par, |_| false), None);
        }
    }

    #[test]
    fn errors_propagate() {
        let r: Result<u64, usize> = try_fold_range(
            100,
            Parallelism::Parallel,
            || 0,
            |a, i| if i == 42 { Err(i) } else { Ok(a + 1) },
            |a, b| a + b,
        );
        assert_eq!(r, Err(42));
    }
}
