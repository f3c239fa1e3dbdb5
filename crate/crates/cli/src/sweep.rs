//! Sweep execution: each point runs as an independent job, and a bounded
//! worker pool drains the queue. Results come back in job order, so merged
//! artifacts are byte-identical however many workers ran.

use qt_core::Result;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Worker cap from the `QT_THREADS` environment variable; defaults to 1 so a
/// single-core host never oversubscribes.
pub fn max_threads() -> usize {
    std::env::var("QT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `work` over every job and returns results in input order. With one
/// worker this degenerates to a plain sequential loop; errors surface as the
/// first failing job in input order.
pub fn run_jobs<J, R, F>(jobs: &[J], work: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    let workers = max_threads().min(jobs.len());
    if workers <= 1 {
        return jobs.iter().map(work).collect();
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let result = work(&jobs[i]);
                done.lock().unwrap().push((i, result));
            });
        }
    });
    let mut pairs = done.into_inner().unwrap();
    pairs.sort_by_key(|(i, _)| *i);
    pairs.into_iter().map(|(_, r)| r).collect()
}
