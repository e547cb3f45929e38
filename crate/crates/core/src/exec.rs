//! Scheduling of independent per-ciphertext work.
//!
//! Every task gets its own forked ledger; the children are merged back in
//! task order, so counts and results never depend on the schedule.

use crate::error::Result;
use crate::ledger::OpLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Sequential,
    /// Data-parallel over the ambient rayon pool. Without the `parallel`
    /// feature this runs sequentially.
    #[default]
    Parallel,
}

impl Schedule {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Schedule::Parallel
    }
}

/// Runs `f(0..count)` and merges the per-task ledgers into `ledger`.
pub fn map_with_ledger<T, F>(
    count: usize,
    schedule: Schedule,
    ledger: &mut OpLedger,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut OpLedger) -> Result<T> + Sync,
{
    let run = |i: usize| {
        let mut local = ledger.fork();
        f(i, &mut local).map(|v| (v, local))
    };
    let parts: Vec<Result<(T, OpLedger)>> = run_all(count, schedule, run);
    let mut out = Vec::with_capacity(count);
    for part in parts {
        let (v, local) = part?;
        ledger.merge(&local);
        out.push(v);
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
fn run_all<R: Send>(count: usize, schedule: Schedule, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    if schedule.is_parallel() && count > 1 {
        (0..count).into_par_iter().map(&f).collect()
    } else {
        (0..count).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all<R: Send>(count: usize, _schedule: Schedule, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    (0..count).map(f).collect()
}

/// Runs `body` inside a pool of `workers` threads (or the ambient pool when
/// `None`).
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: Option<usize>, body: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(w) if w > 0 => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(body),
            Err(_) => body(),
        },
        _ => body(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: Option<usize>, body: impl FnOnce() -> R + Send) -> R {
    body()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::ledger::OpKind;

    #[test]
    fn results_and_ledgers_in_order() {
        for schedule in [Schedule::Sequential, Schedule::Parallel] {
            let mut ledger = OpLedger::new();
            ledger.set_phase("FL1");
            let out = map_with_ledger(64, schedule, &mut ledger, |i, l| {
                l.record_n(OpKind::Add, (i % 3) as u32, i as u64);
                Ok(i * i)
            })
            .unwrap();
            assert_eq!(out, (0..64).map(|i| i * i).collect::<Vec<_>>());
            assert_eq!(ledger.count(OpKind::Add), (0..64).sum::<u64>());
            assert_eq!(ledger.phase_counts("FL1").len(), 1);
        }
    }

    #[test]
    fn first_error_in_task_order_wins() {
        let mut ledger = OpLedger::new();
        let err = map_with_ledger(8, Schedule::Parallel, &mut ledger, |i, _| {
            if i >= 3 {
                Err(Error::Validation(format!("task {i}")))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "validation failed: task 3");
    }

    #[test]
    fn worker_pool_runs_body() {
        assert_eq!(with_workers(Some(2), || 7), 7);
        assert_eq!(with_workers(None, || 8), 8);
    }
}
