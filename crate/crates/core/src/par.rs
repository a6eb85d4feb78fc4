//! Deterministic parallel helpers.
//!
//! Results must be bit-identical for any thread count, so parallel maps are
//! index-ordered and reductions happen sequentially over fixed-size chunk
//! partials computed in parallel.

use rayon::prelude::*;

/// Chunk width for parallel partial sums; fixed so the floating-point
/// summation tree never depends on the thread count.
const CHUNK: usize = 1024;

/// Order-preserving parallel map over `0..n`.
pub(crate) fn ordered_par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Deterministic parallel sum of `f(i)` over `0..n`.
pub(crate) fn det_par_sum(n: usize, f: impl Fn(usize) -> f64 + Send + Sync) -> f64 {
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_sequential() {
        let n = 5000;
        let seq: f64 = (0..n).map(|i| (i as f64).sin()).sum::<f64>();
        // Same chunking sequentially and in parallel, so equality is exact.
        let par = det_par_sum(n, |i| (i as f64).sin());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let par1 = pool.install(|| det_par_sum(n, |i| (i as f64).sin()));
        assert_eq!(par, par1);
        assert!((par - seq).abs() < 1e-9);
    }
}
