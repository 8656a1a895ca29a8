//! Bounded worker pool over a slice of jobs.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// Runs `work` over `jobs` on up to `workers` threads. After the first
/// failure no new jobs start. Results come back in job order; `None` marks
/// jobs that never ran.
pub(crate) fn run_jobs<J: Sync, T: Send, E: Send>(
    jobs: &[J],
    workers: usize,
    work: impl Fn(&J) -> Result<T, E> + Sync,
) -> Vec<Option<Result<T, E>>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<T, E>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = work(&jobs[i]);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock"))
        .collect()
}

/// Like [`run_jobs`] but returns all results or the first error in job order.
pub(crate) fn try_map<J: Sync, T: Send, E: Send>(
    jobs: &[J],
    workers: usize,
    work: impl Fn(&J) -> Result<T, E> + Sync,
) -> Result<Vec<T>, E> {
    let mut out = Vec::with_capacity(jobs.len());
    let mut first_err = None;
    for r in run_jobs(jobs, workers, work).into_iter().flatten() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_job_order() {
        let jobs: Vec<u32> = (0..50).collect();
        let out = try_map(&jobs, 8, |&j| Ok::<_, ()>(j * 2)).unwrap();
        assert_eq!(out, (0..50).map(|j| j * 2).collect::<Vec<_>>());
    }

    #[test]
    fn reports_first_error_in_order() {
        let jobs: Vec<u32> = (0..10).collect();
        let r = try_map(&jobs, 1, |&j| if j >= 3 { Err(j) } else { Ok(j) });
        assert_eq!(r, Err(3));
    }
}
