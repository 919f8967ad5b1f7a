//! Data-parallel helpers. With the `parallel` feature they fan out over rayon;
//! without it they run the same closures sequentially in index order.
//!
//! Every helper returns results in input order, so numeric outputs do not
//! depend on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Folds fixed-size chunks independently and returns one accumulator per chunk,
/// in chunk order. Chunk boundaries depend only on `chunk`, never on scheduling.
pub fn fold_chunks<T, A, I, F>(items: &[T], chunk: usize, init: I, fold: F) -> Vec<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize, &T) + Sync + Send,
{
    let chunk = chunk.max(1);
    let run = |(ci, part): (usize, &[T])| {
        let mut acc = init();
        for (k, item) in part.iter().enumerate() {
            fold(&mut acc, ci * chunk + k, item);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk).enumerate().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk).enumerate().map(run).collect()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_chunks_is_ordered_and_complete() {
        let items: Vec<usize> = (0..103).collect();
        let sums = fold_chunks(&items, 10, Vec::new, |acc: &mut Vec<usize>, idx, &x| {
            assert_eq!(idx, x);
            acc.push(x);
        });
        assert_eq!(sums.len(), 11);
        let flat: Vec<usize> = sums.into_iter().flatten().collect();
        assert_eq!(flat, items);
    }

    #[test]
    fn map_preserves_order() {
        let out = map_range(50, |i| i * 2);
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
    }
}
