//! Deterministic worker parallelism: indexed map over a thread pool with
//! results collected in index order, so the thread count never changes the
//! output.

use rayon::prelude::*;

pub fn deterministic_map<T, F>(threads: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_does_not_change_results() {
        let work = |i: usize| {
            let mut acc = i as f64;
            for k in 1..100 {
                acc += (acc * 0.1 + k as f64).sin();
            }
            acc
        };
        let one = deterministic_map(1, 64, work);
        let eight = deterministic_map(8, 64, work);
        assert_eq!(one, eight);
    }
}
