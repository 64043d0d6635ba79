//! Equivalence campaign: every fixture pattern is run with and without its
//! compaction plan and the logits and parameter gradients are compared.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{forward, load_checkpoint, loss_and_grads, save_checkpoint, FlopLedger, ModelConfig, ModelParams};
use crate::ragged::{BatchFile, RaggedBatch, ValidationPolicy};
use crate::scalar::Scalar;
use crate::trie::{build_plan, CompactionPlan, PlanFile};

use super::patterns::{make_pattern_batch, next_token_targets, Pattern, PatternSpec};
use super::BenchError;

pub const PATTERNS_DIR: &str = "patterns";

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyCase {
    pub name: String,
    pub batch: RaggedBatch,
    pub targets: Vec<u32>,
    /// Used instead of a freshly built plan when present.
    pub plan: Option<CompactionPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseFile {
    #[serde(flatten)]
    batch: BatchFile,
    targets: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<PlanFile>,
}

#[derive(Debug, Clone)]
pub struct VerifyFixtures<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub cases: Vec<VerifyCase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyTolerance {
    pub logit_max: f64,
    pub grad_rel: f64,
}

impl VerifyTolerance {
    /// Logits must match bit for bit; gradients may differ by summation order.
    pub fn for_dtype<T: Scalar>() -> Self {
        let grad_rel = if T::NAME == "f32" { 1e-4 } else { 1e-6 };
        Self { logit_max: 0.0, grad_rel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub pattern: String,
    pub tokens: usize,
    pub n_compact: usize,
    pub logit_max: f64,
    pub logit_mean: f64,
    pub grad_max: f64,
    pub grad_mean: f64,
    /// Largest per-tensor `max|dg| / max|g|`.
    pub grad_rel: f64,
    pub passed: bool,
}

/// The six patterns on the default model config, weights drawn from `seed`.
pub fn default_fixtures<T: Scalar>(seed: u64) -> Result<VerifyFixtures<T>, BenchError> {
    let config = ModelConfig::default();
    let params = ModelParams::init(&config, seed)?;
    let cases = pattern_cases(config.vocab_size as u32, seed)?;
    Ok(VerifyFixtures { config, params, cases })
}

pub fn pattern_cases(vocab: u32, seed: u64) -> Result<Vec<VerifyCase>, BenchError> {
    Pattern::ALL
        .iter()
        .map(|&pattern| {
            let batch = make_pattern_batch(PatternSpec { pattern, seed }, vocab)?;
            let targets = next_token_targets(&batch);
            Ok(VerifyCase { name: pattern.name().to_string(), batch, targets, plan: None })
        })
        .collect()
}

pub fn write_fixtures<T: Scalar>(dir: &Path, fixtures: &VerifyFixtures<T>) -> Result<(), BenchError> {
    save_checkpoint(dir, &fixtures.config, &fixtures.params)?;
    let pdir = dir.join(PATTERNS_DIR);
    fs::create_dir_all(&pdir).map_err(|e| BenchError::io(&pdir, e))?;
    for case in &fixtures.cases {
        let file = CaseFile {
            batch: BatchFile::from(&case.batch),
            targets: case.targets.clone(),
            plan: case.plan.as_ref().map(PlanFile::from),
        };
        let path = pdir.join(format!("{}.json", case.name));
        let text = serde_json::to_string_pretty(&file).expect("serializable");
        fs::write(&path, text).map_err(|e| BenchError::io(&path, e))?;
    }
    Ok(())
}

/// Loads a fixture directory. Known patterns come first in their canonical
/// order, any other case files follow by name.
pub fn load_fixtures<T: Scalar>(dir: &Path) -> Result<VerifyFixtures<T>, BenchError> {
    let (config, params) = load_checkpoint(dir)?;
    let pdir = dir.join(PATTERNS_DIR);
    let mut names = Vec::new();
    for entry in fs::read_dir(&pdir).map_err(|e| BenchError::io(&pdir, e))? {
        let path = entry.map_err(|e| BenchError::io(&pdir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort_by_key(|n| (Pattern::from_name(n).map_or(usize::MAX, |p| p as usize), n.clone()));
    let mut cases = Vec::with_capacity(names.len());
    for name in names {
        let path = pdir.join(format!("{name}.json"));
        let text = fs::read_to_string(&path).map_err(|e| BenchError::io(&path, e))?;
        let file: CaseFile = serde_json::from_str(&text)
            .map_err(|e| BenchError::Fixture(format!("{}: {e}", path.display())))?;
        let batch = file
            .batch
            .into_batch(ValidationPolicy::default())
            .map_err(|e| BenchError::Fixture(format!("{}: {e}", path.display())))?;
        let plan = file
            .plan
            .map(CompactionPlan::try_from)
            .transpose()
            .map_err(|e| BenchError::Fixture(format!("{}: {e}", path.display())))?;
        cases.push(VerifyCase { name, batch, targets: file.targets, plan });
    }
    if cases.is_empty() {
        return Err(BenchError::Fixture(format!("no pattern files in {}", pdir.display())));
    }
    Ok(VerifyFixtures { config, params, cases })
}

/// Keeps only the named cases, in the order given.
pub fn select_cases(cases: Vec<VerifyCase>, names: &[String]) -> Result<Vec<VerifyCase>, BenchError> {
    names
        .iter()
        .map(|n| {
            cases
                .iter()
                .find(|c| &c.name == n)
                .cloned()
                .ok_or_else(|| BenchError::Fixture(format!("unknown pattern {n}")))
        })
        .collect()
}

pub fn run_verify<T: Scalar>(fixtures: &VerifyFixtures<T>, tol: VerifyTolerance) -> Result<Vec<VerifyRow>, BenchError> {
    fixtures.cases.iter().map(|case| verify_case(fixtures, case, tol)).collect()
}

fn verify_case<T: Scalar>(
    fx: &VerifyFixtures<T>,
    case: &VerifyCase,
    tol: VerifyTolerance,
) -> Result<VerifyRow, BenchError> {
    let plan = match &case.plan {
        Some(p) => p.clone(),
        None => build_plan(&case.batch)?,
    };
    let mut ledger = FlopLedger::new();
    let base = forward(&fx.config, &fx.params, &case.batch, None, &mut ledger)?;
    let radix = forward(&fx.config, &fx.params, &case.batch, Some(&plan), &mut ledger)?;
    let (logit_max, logit_mean) = diff_stats(base.as_slice(), radix.as_slice());

    let (_, g_base) = loss_and_grads(&fx.config, &fx.params, &case.batch, None, &case.targets)?;
    let (_, g_radix) = loss_and_grads(&fx.config, &fx.params, &case.batch, Some(&plan), &case.targets)?;
    let (mut grad_max, mut grad_sum, mut grad_count, mut grad_rel) = (0.0f64, 0.0f64, 0usize, 0.0f64);
    for ((_, a), (_, b)) in g_base.named_tensors().into_iter().zip(g_radix.named_tensors()) {
        let (max, mean) = diff_stats(a.as_slice(), b.as_slice());
        grad_max = grad_max.max(max);
        grad_sum += mean * a.as_slice().len() as f64;
        grad_count += a.as_slice().len();
        let scale = a.max_abs().as_f64();
        grad_rel = grad_rel.max(if scale > 0.0 { max / scale } else { max });
    }
    let grad_mean = if grad_count > 0 { grad_sum / grad_count as f64 } else { 0.0 };
    let passed = logit_max <= tol.logit_max && grad_rel <= tol.grad_rel;
    Ok(VerifyRow {
        pattern: case.name.clone(),
        tokens: case.batch.len(),
        n_compact: plan.n_compact(),
        logit_max,
        logit_mean,
        grad_max,
        grad_mean,
        grad_rel,
        passed,
    })
}

/// Max and mean absolute difference. NaN anywhere counts as infinite.
fn diff_stats<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64) {
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let (mut max, mut sum) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let d = (x.as_f64() - y.as_f64()).abs();
        let d = if d.is_nan() { f64::INFINITY } else { d };
        max = max.max(d);
        sum += d;
    }
    (max, sum / a.len() as f64)
}
