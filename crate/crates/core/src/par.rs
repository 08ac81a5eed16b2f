//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they run on the calling thread. The sequential variants are
//! always available so benchmarks can compare both paths in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Whether this build fans out across threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let par = map(&xs, |x| x * x);
        let seq = map_sequential(&xs, |x| x * x);
        assert_eq!(par, seq);
        assert_eq!(map_range(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
