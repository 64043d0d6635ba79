//! Two-stage scheduler: a producer thread builds the plan for batch `t+1`
//! while the caller's thread runs the worker on batch `t`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use serde::Serialize;

use crate::ragged::RaggedBatch;
use crate::trie::{build_plan, CompactionPlan, PlanError};

/// Capacity of the hand-off queue between the two stages.
pub const QUEUE_DEPTH: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("batch {index}: {source}")]
    Plan { index: usize, source: PlanError },
    #[error("WorkerPanic: batch {index}: {message}")]
    WorkerPanic { index: usize, message: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport<R> {
    #[serde(skip)]
    pub outputs: Vec<R>,
    pub build_us: Vec<f64>,
    pub compute_us: Vec<f64>,
    /// Time the worker spent waiting for each plan.
    pub wait_us: Vec<f64>,
    pub total_us: f64,
    /// Share of the build time of batches `1..` that was not waited on.
    pub hidden_fraction: f64,
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

fn call_worker<R, F>(worker: &mut F, index: usize, batch: &RaggedBatch, plan: &CompactionPlan) -> Result<R, PipelineError>
where
    F: FnMut(usize, &RaggedBatch, &CompactionPlan) -> R,
{
    catch_unwind(AssertUnwindSafe(|| worker(index, batch, plan)))
        .map_err(|p| PipelineError::WorkerPanic { index, message: panic_message(p) })
}

fn hidden_fraction(build_us: &[f64], wait_us: &[f64]) -> f64 {
    let overlappable: f64 = build_us.iter().skip(1).sum();
    if overlappable <= 0.0 {
        return 1.0;
    }
    let exposed: f64 = wait_us.iter().skip(1).sum();
    ((overlappable - exposed) / overlappable).clamp(0.0, 1.0)
}

pub fn pipelined_run<R, F>(batches: &[RaggedBatch], mut worker: F) -> Result<PipelineReport<R>, PipelineError>
where
    R: Send,
    F: FnMut(usize, &RaggedBatch, &CompactionPlan) -> R,
{
    let start = Instant::now();
    let n = batches.len();
    let mut report = PipelineReport {
        outputs: Vec::with_capacity(n),
        build_us: Vec::with_capacity(n),
        compute_us: Vec::with_capacity(n),
        wait_us: Vec::with_capacity(n),
        total_us: 0.0,
        hidden_fraction: 1.0,
    };
    thread::scope(|s| {
        let (tx, rx) = sync_channel(QUEUE_DEPTH);
        s.spawn(move || {
            for (index, batch) in batches.iter().enumerate() {
                let t = Instant::now();
                let plan = build_plan(batch);
                // a closed receiver means the consumer gave up
                if tx.send((index, plan, micros(t))).is_err() {
                    break;
                }
            }
        });
        for (index, batch) in batches.iter().enumerate() {
            let t = Instant::now();
            let (got, plan, build) = rx.recv().expect("producer sends one item per batch");
            report.wait_us.push(micros(t));
            debug_assert_eq!(got, index);
            report.build_us.push(build);
            let plan = plan.map_err(|source| PipelineError::Plan { index, source })?;
            let t = Instant::now();
            report.outputs.push(call_worker(&mut worker, index, batch, &plan)?);
            report.compute_us.push(micros(t));
        }
        Ok::<_, PipelineError>(())
    })?;
    report.total_us = micros(start);
    report.hidden_fraction = hidden_fraction(&report.build_us, &report.wait_us);
    Ok(report)
}

/// Same work as [`pipelined_run`] on one thread: build, then compute, per batch.
pub fn sequential_run<R, F>(batches: &[RaggedBatch], mut worker: F) -> Result<PipelineReport<R>, PipelineError>
where
    F: FnMut(usize, &RaggedBatch, &CompactionPlan) -> R,
{
    let start = Instant::now();
    let n = batches.len();
    let mut report = PipelineReport {
        outputs: Vec::with_capacity(n),
        build_us: Vec::with_capacity(n),
        compute_us: Vec::with_capacity(n),
        wait_us: Vec::with_capacity(n),
        total_us: 0.0,
        hidden_fraction: 0.0,
    };
    for (index, batch) in batches.iter().enumerate() {
        let t = Instant::now();
        let plan = build_plan(batch).map_err(|source| PipelineError::Plan { index, source })?;
        let build = micros(t);
        report.build_us.push(build);
        report.wait_us.push(build);
        let t = Instant::now();
        report.outputs.push(call_worker(&mut worker, index, batch, &plan)?);
        report.compute_us.push(micros(t));
    }
    report.total_us = micros(start);
    report.hidden_fraction = if n > 1 { 0.0 } else { 1.0 };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_synthetic_batch, SyntheticSpec};
    use std::time::Duration;

    fn stream(n: usize) -> Vec<RaggedBatch> {
        (0..n).map(|i| make_synthetic_batch(&SyntheticSpec::new(4, 8, 4, 50, i as u64)).unwrap()).collect()
    }

    #[test]
    fn same_plans_either_way() {
        let batches = stream(6);
        let f = |_: usize, _: &RaggedBatch, p: &CompactionPlan| p.clone();
        let a = pipelined_run(&batches, f).unwrap();
        let b = sequential_run(&batches, f).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.build_us.len(), 6);
    }

    #[test]
    fn single_batch_runs() {
        let r = pipelined_run(&stream(1), |i, _: &RaggedBatch, _: &CompactionPlan| i).unwrap();
        assert_eq!(r.outputs, vec![0]);
        assert_eq!(r.hidden_fraction, 1.0);
        let r = pipelined_run(&[], |i, _: &RaggedBatch, _: &CompactionPlan| i).unwrap();
        assert!(r.outputs.is_empty());
    }

    #[test]
    fn worker_panic_carries_index() {
        let err = pipelined_run(&stream(5), |i, _: &RaggedBatch, _: &CompactionPlan| {
            if i == 3 {
                panic!("boom");
            }
        })
        .unwrap_err();
        match err {
            PipelineError::WorkerPanic { index, message } => {
                assert_eq!(index, 3);
                assert_eq!(message, "boom");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_batch_reports_index() {
        let mut batches = stream(3);
        batches[1].cu_seqlens[1] = 100;
        let err = pipelined_run(&batches, |_, _: &RaggedBatch, _: &CompactionPlan| ()).unwrap_err();
        assert!(matches!(err, PipelineError::Plan { index: 1, .. }), "{err}");
    }

    #[test]
    fn build_hides_behind_compute() {
        let batches: Vec<_> = (0..5)
            .map(|i| make_synthetic_batch(&SyntheticSpec::new(16, 256, 256, 1000, i)).unwrap())
            .collect();
        let r = pipelined_run(&batches, |_, _: &RaggedBatch, _: &CompactionPlan| {
            thread::sleep(Duration::from_millis(5))
        })
        .unwrap();
        assert!(r.hidden_fraction > 0.5, "{:?}", r.hidden_fraction);
    }
}
