//! Deterministic fan-out: run an indexed job on a bounded thread pool and
//! reassemble results in index order. Since every job derives its own seed
//! from its index, parallel and serial execution produce identical output.

use crate::error::Result;

/// Number of worker threads from `THINICE_THREADS` (default 1, which keeps
/// runs bit-reproducible by construction).
pub fn thread_count() -> usize {
    std::env::var("THINICE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn par_map<T: Send>(
    threads: usize,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<T>>] = &mut slots;
        let mut start = 0usize;
        for w in 0..threads {
            let size = (n - start) / (threads - w);
            let (head, tail) = rest.split_at_mut(size);
            rest = tail;
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(start + j));
                }
            });
            start += size;
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect()
}
