//! Deterministic replica parallelism. Work is cut into jobs whose count and
//! contents depend only on the configuration, never on the thread count, and
//! results are reduced in job order, so `--threads` changes wall time only.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Run `jobs` closures on at most `threads` workers; returns results in job
/// order. Panics in a job propagate.
pub fn run_jobs<T, F>(jobs: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if jobs == 0 {
        return Vec::new();
    }
    let workers = threads.max(1).min(jobs);
    if workers == 1 {
        return (0..jobs).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("job slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("job slot poisoned").expect("job never ran"))
        .collect()
}

/// Split `total` replicas into at most `max_chunks` contiguous runs of near
/// equal length. Each chunk later gets its own child stream keyed by chunk
/// index, so the random layout is a function of `total` alone.
pub fn replica_chunks(total: usize, max_chunks: usize) -> Vec<(usize, usize)> {
    if total == 0 {
        return Vec::new();
    }
    let chunks = max_chunks.max(1).min(total);
    let base = total / chunks;
    let rem = total % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        out.push((start, len));
        start += len;
    }
    out
}
