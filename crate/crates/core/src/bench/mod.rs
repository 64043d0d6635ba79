//! Synthetic workloads, equivalence campaigns, timing sweeps, and the
//! pipelined plan-build scheduler.

mod patterns;
mod pipeline;
mod synthetic;
mod verify;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{positionwise_fraction, predicted_speedup, to_f64};
use crate::model::{forward, CheckpointError, FlopLedger, ModelConfig, ModelError, ModelParams};
use crate::ragged::RaggedBatch;
use crate::scalar::Scalar;
use crate::trie::{build_plan, should_enable, CompactionPlan, PlanError};

pub use patterns::{make_pattern_batch, next_token_targets, Pattern, PatternSpec, PATTERN_SYMBOLS};
pub use pipeline::{pipelined_run, sequential_run, PipelineError, PipelineReport, QUEUE_DEPTH};
pub use synthetic::{make_synthetic_batch, sweep_grid, sweep_specs, SyntheticSpec};
pub use verify::{
    default_fixtures, load_fixtures, pattern_cases, run_verify, select_cases, write_fixtures, VerifyCase,
    VerifyFixtures, VerifyRow, VerifyTolerance, PATTERNS_DIR,
};

pub const MIN_REPEATS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("VocabTooSmall: {batch} sequences cannot diverge over a vocabulary of {vocab}")]
    VocabTooSmall { batch: usize, vocab: u32 },
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("InvalidRepeats: need at least {MIN_REPEATS} repeats, got {0}")]
    InvalidRepeats(usize),
    #[error("FixtureError: {0}")]
    Fixture(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl BenchError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        BenchError::Fixture(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub model: ModelConfig,
    pub repeats: usize,
    pub threshold: f64,
    /// Time the model forward in both modes. Row counts are predicted when off.
    pub forward: bool,
    pub seed: u64,
    /// Also run each spec through the pipelined scheduler.
    pub pipeline: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { model: ModelConfig::default(), repeats: 5, threshold: 0.95, forward: false, seed: 0, pipeline: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineColumns {
    pub seq_us: f64,
    pub pipe_us: f64,
    pub hidden_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_compact")]
    pub n_compact: usize,
    pub gamma: f64,
    pub enabled: bool,
    pub plan_us: f64,
    pub fwd_base_us: Option<f64>,
    pub fwd_radix_us: Option<f64>,
    pub rowops_base: u64,
    pub rowops_radix: u64,
    pub pred_speedup: f64,
    pub reduction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineColumns>,
}

pub const CSV_HEADER: &str = "spec,N,N_compact,gamma,plan_us,fwd_base_us,fwd_radix_us,rowops_base,rowops_radix,pred_speedup";
pub const CSV_PIPELINE_HEADER: &str = ",seq_us,pipe_us,hidden_frac";

impl BenchReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.1}"));
        let mut row = format!(
            "{},{},{},{:.3},{:.1},{},{},{},{},{:.3}",
            self.spec,
            self.n,
            self.n_compact,
            self.gamma,
            self.plan_us,
            opt(self.fwd_base_us),
            opt(self.fwd_radix_us),
            self.rowops_base,
            self.rowops_radix,
            self.pred_speedup
        );
        if let Some(p) = &self.pipeline {
            row.push_str(&format!(",{:.1},{:.1},{:.3}", p.seq_us, p.pipe_us, p.hidden_frac));
        }
        row
    }
}

pub fn reports_to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    if reports.iter().any(|r| r.pipeline.is_some()) {
        out.push_str(CSV_PIPELINE_HEADER);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Median of `repeats` timed calls after one discarded warm-up, in microseconds.
pub fn median_us<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    f();
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    if times.len() % 2 == 1 {
        times[m]
    } else {
        (times[m - 1] + times[m]) / 2.0
    }
}

pub fn run_bench<T: Scalar>(specs: &[SyntheticSpec], opts: &BenchOptions) -> Result<Vec<BenchReport>, BenchError> {
    if opts.repeats < MIN_REPEATS {
        return Err(BenchError::InvalidRepeats(opts.repeats));
    }
    let params: Option<ModelParams<T>> = if opts.forward || opts.pipeline {
        Some(ModelParams::init(&opts.model, opts.seed)?)
    } else {
        None
    };
    specs.iter().map(|spec| bench_one(spec, opts, params.as_ref())).collect()
}

fn bench_one<T: Scalar>(
    spec: &SyntheticSpec,
    opts: &BenchOptions,
    params: Option<&ModelParams<T>>,
) -> Result<BenchReport, BenchError> {
    let batch = make_synthetic_batch(spec)?;
    let plan = build_plan(&batch)?;
    let plan_us = median_us(opts.repeats, || {
        std::hint::black_box(build_plan(&batch).expect("built once already"));
    });
    let enabled = should_enable(&plan, opts.threshold);
    let active = enabled.then_some(&plan);
    let n = batch.len();

    let (fwd_base_us, fwd_radix_us, rowops_base, rowops_radix) = match params.filter(|_| opts.forward) {
        Some(params) => {
            let mut base = FlopLedger::new();
            let mut radix = FlopLedger::new();
            forward(&opts.model, params, &batch, None, &mut base)?;
            forward(&opts.model, params, &batch, active, &mut radix)?;
            let time = |plan: Option<&CompactionPlan>| {
                median_us(opts.repeats, || {
                    let mut l = FlopLedger::new();
                    std::hint::black_box(forward(&opts.model, params, &batch, plan, &mut l).expect("ran once"));
                })
            };
            (Some(time(None)), Some(time(active)), base.positionwise_row_ops(), radix.positionwise_row_ops())
        }
        None => (
            None,
            None,
            FlopLedger::predicted(&opts.model, n, None).positionwise_row_ops(),
            FlopLedger::predicted(&opts.model, n, active).positionwise_row_ops(),
        ),
    };

    let f_c = to_f64(positionwise_fraction(
        opts.model.hidden_size as u64,
        opts.model.intermediate_size as u64,
        (spec.prefix_len + spec.suffix_len) as u64,
    )
    .map_err(|e| BenchError::InvalidSpec(e.to_string()))?);
    let r = if enabled { n as f64 / plan.n_compact() as f64 } else { 1.0 };

    let pipeline = match params.filter(|_| opts.pipeline) {
        Some(params) => Some(pipeline_columns(spec, opts, params)?),
        None => None,
    };

    Ok(BenchReport {
        spec: spec.label(),
        n,
        n_compact: plan.n_compact(),
        gamma: plan.gamma(),
        enabled,
        plan_us,
        fwd_base_us,
        fwd_radix_us,
        rowops_base,
        rowops_radix,
        pred_speedup: predicted_speedup(f_c, r),
        reduction: rowops_base as f64 / rowops_radix.max(1) as f64,
        pipeline,
    })
}

/// Streams `repeats` reseeded copies of the spec through both schedulers with
/// the radix forward as the worker.
fn pipeline_columns<T: Scalar>(
    spec: &SyntheticSpec,
    opts: &BenchOptions,
    params: &ModelParams<T>,
) -> Result<PipelineColumns, BenchError> {
    let batches = (0..opts.repeats as u64)
        .map(|i| make_synthetic_batch(&SyntheticSpec { seed: spec.seed.wrapping_add(i), ..spec.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let worker = |_: usize, batch: &RaggedBatch, plan: &CompactionPlan| {
        let plan = should_enable(plan, opts.threshold).then_some(plan);
        forward(&opts.model, params, batch, plan, &mut FlopLedger::new()).map(|_| ())
    };
    let seq = sequential_run(&batches, worker)?;
    let pipe = pipelined_run(&batches, worker)?;
    for r in seq.outputs.into_iter().chain(pipe.outputs) {
        r?;
    }
    Ok(PipelineColumns { seq_us: seq.total_us, pipe_us: pipe.total_us, hidden_frac: pipe.hidden_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeats_below_three_rejected() {
        let opts = BenchOptions { repeats: 2, ..Default::default() };
        let err = run_bench::<f64>(&[SyntheticSpec::new(2, 2, 1, 10, 0)], &opts).unwrap_err();
        assert!(matches!(err, BenchError::InvalidRepeats(2)));
    }

    #[test]
    fn sweep_gamma_and_gating() {
        let opts = BenchOptions { repeats: 3, ..Default::default() };
        let specs = sweep_specs(32_000, 7);
        let rows = run_bench::<f64>(&specs[..8], &opts).unwrap();
        let gammas: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.gamma)).collect();
        assert_eq!(gammas, ["0.996", "0.943", "0.892", "0.677", "0.516", "0.354", "0.225", "0.139"]);
        assert!(!rows[0].enabled);
        assert_eq!(rows[0].rowops_base, rows[0].rowops_radix);
        assert_eq!(rows[0].pred_speedup, 1.0);
        assert!(rows[2].enabled);
        let last = &rows[7];
        assert_eq!((last.n, last.n_compact), (73_728, 10_240));
        assert!((last.reduction - 7.2).abs() < 1e-12);
    }

    #[test]
    fn forward_and_pipeline_columns() {
        let opts = BenchOptions {
            model: ModelConfig::tiny(1, 8, 64),
            repeats: 3,
            forward: true,
            pipeline: true,
            ..Default::default()
        };
        let rows = run_bench::<f64>(&[SyntheticSpec::new(4, 16, 4, 64, 1)], &opts).unwrap();
        let r = &rows[0];
        assert_eq!(r.rowops_radix * r.n as u64, r.rowops_base * r.n_compact as u64);
        assert!(r.fwd_base_us.is_some() && r.pipeline.is_some());
        let csv = reports_to_csv(&rows);
        assert!(csv.starts_with(&format!("{CSV_HEADER}{CSV_PIPELINE_HEADER}\n")));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 13);
    }

    #[test]
    fn non_timing_fields_deterministic() {
        let opts = BenchOptions { repeats: 3, ..Default::default() };
        let specs = [SyntheticSpec::new(8, 30, 10, 100, 3)];
        let strip = |mut r: BenchReport| {
            r.plan_us = 0.0;
            r
        };
        let a = run_bench::<f64>(&specs, &opts).unwrap().into_iter().map(strip).collect::<Vec<_>>();
        let b = run_bench::<f64>(&specs, &opts).unwrap().into_iter().map(strip).collect::<Vec<_>>();
        assert_eq!(a, b);
    }

    #[test]
    fn median_is_middle() {
        let mut calls = 0;
        median_us(3, || calls += 1);
        assert_eq!(calls, 4);
    }
}
