//! Data-parallel helpers. With the `parallel` feature (default) the heavy
//! loops fan out over rayon; without it they run sequentially. Both paths
//! produce identical results: work is partitioned by index and collected in
//! order, never reduced in a nondeterministic order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work sizes below this run sequentially even when `parallel` is enabled;
/// spawning tasks for tiny inputs costs more than it saves.
pub const PAR_THRESHOLD: usize = 1 << 12;

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn indexed_map<T, F>(n: usize, cost: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if cost >= PAR_THRESHOLD {
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    let _ = cost;
    (0..n).map(f).collect()
}

/// Sequential twin of [`indexed_map`], available regardless of features so
/// benchmarks can compare the two paths in one build.
pub fn indexed_map_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fills equal-length row chunks of `data` via `f(row_index, chunk)`.
pub fn fill_rows<T, F>(data: &mut [T], row_len: usize, cost: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if cost >= PAR_THRESHOLD {
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    let _ = cost;
    for (i, chunk) in data.chunks_mut(row_len).enumerate() {
        f(i, chunk);
    }
}

pub fn fill_rows_seq<T, F>(data: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    if row_len == 0 {
        return;
    }
    for (i, chunk) in data.chunks_mut(row_len).enumerate() {
        f(i, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree() {
        let n = 10_000;
        let a = indexed_map(n, n, |i| (i * i) as u64);
        let b = indexed_map_seq(n, |i| (i * i) as u64);
        assert_eq!(a, b);
    }

    #[test]
    fn fill_rows_matches_seq() {
        let rows = 512;
        let cols = 16;
        let mut a = vec![0.0_f64; rows * cols];
        let mut b = vec![0.0_f64; rows * cols];
        let f = |i: usize, chunk: &mut [f64]| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (i * 31 + j) as f64;
            }
        };
        fill_rows(&mut a, cols, rows * cols, f);
        fill_rows_seq(&mut b, cols, f);
        assert_eq!(a, b);
    }
}
