use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::PlanError;

/// Gather/scatter index maps between the original `N`-row layout and the
/// deduplicated `N'`-row compact layout.
///
/// `gather` may be longer than `n_compact` after [`pad_plan`](super::pad_plan);
/// the extra entries repeat `gather[0]` and are never referenced by `scatter`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionPlan {
    pub(crate) gather: Vec<u32>,
    pub(crate) scatter: Vec<u32>,
    pub(crate) compact_positions: Vec<u32>,
    pub(crate) n_original: usize,
    pub(crate) n_compact: usize,
}

impl CompactionPlan {
    /// Identity plan over `positions.len()` rows.
    pub fn identity(positions: &[u32]) -> Self {
        let n = positions.len();
        let idx: Vec<u32> = (0..n as u32).collect();
        Self {
            gather: idx.clone(),
            scatter: idx,
            compact_positions: positions.to_vec(),
            n_original: n,
            n_compact: n,
        }
    }

    /// Assembles a plan from raw parts, checking lengths and index ranges only.
    ///
    /// Semantic consistency with a batch (that representatives carry the same
    /// causal history) is not checked, so deliberately corrupted plans can be
    /// loaded as negative controls.
    pub fn from_parts(
        gather: Vec<u32>,
        scatter: Vec<u32>,
        compact_positions: Vec<u32>,
        n_original: usize,
        n_compact: usize,
    ) -> Result<Self, PlanError> {
        let bad = |msg: String| Err(PlanError::Malformed(msg));
        if scatter.len() != n_original {
            return bad(format!("scatter has {} entries, expected N = {n_original}", scatter.len()));
        }
        if gather.len() < n_compact {
            return bad(format!("gather has {} entries, expected at least N' = {n_compact}", gather.len()));
        }
        if compact_positions.len() != gather.len() {
            return bad(format!(
                "compact_positions has {} entries, gather has {}",
                compact_positions.len(),
                gather.len()
            ));
        }
        if n_compact > n_original || (n_original > 0 && n_compact == 0) {
            return bad(format!("N' = {n_compact} outside [1, N = {n_original}]"));
        }
        if let Some(&g) = gather.iter().find(|&&g| g as usize >= n_original) {
            return bad(format!("gather index {g} out of range for N = {n_original}"));
        }
        if let Some(&s) = scatter.iter().find(|&&s| s as usize >= n_compact) {
            return bad(format!("scatter index {s} out of range for N' = {n_compact}"));
        }
        if gather.len() > n_compact {
            let first = gather[0];
            if gather[n_compact..].iter().any(|&g| g != first) {
                return bad("padding entries must repeat gather[0]".into());
            }
        }
        Ok(Self { gather, scatter, compact_positions, n_original, n_compact })
    }

    /// Compact → original, one representative per unique node (plus padding).
    pub fn gather_indices(&self) -> &[u32] {
        &self.gather
    }

    /// Original → compact.
    pub fn scatter_indices(&self) -> &[u32] {
        &self.scatter
    }

    /// Position ids of the compact rows, for RoPE.
    pub fn compact_positions(&self) -> &[u32] {
        &self.compact_positions
    }

    pub fn n_original(&self) -> usize {
        self.n_original
    }

    /// Unique node count `N'` (excludes padding).
    pub fn n_compact(&self) -> usize {
        self.n_compact
    }

    /// Rows the position-wise work runs on: `N'` plus any padding.
    pub fn compact_rows(&self) -> usize {
        self.gather.len()
    }

    pub fn is_padded(&self) -> bool {
        self.gather.len() > self.n_compact
    }

    pub fn is_identity(&self) -> bool {
        self.n_compact == self.n_original && !self.is_padded()
    }

    /// `N'/N` as an exact fraction; `1` for the empty plan.
    pub fn gamma_exact(&self) -> Ratio<u64> {
        if self.n_original == 0 {
            return Ratio::from_integer(1);
        }
        Ratio::new(self.n_compact as u64, self.n_original as u64)
    }

    /// Compact-token ratio `N'/N`.
    pub fn gamma(&self) -> f64 {
        if self.n_original == 0 {
            return 1.0;
        }
        self.n_compact as f64 / self.n_original as f64
    }

    /// Compression ratio `N/N'`.
    pub fn compression_ratio(&self) -> f64 {
        1.0 / self.gamma()
    }
}

/// JSON plan format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFile {
    pub gather: Vec<u32>,
    pub scatter: Vec<u32>,
    pub compact_positions: Vec<u32>,
    pub n_original: usize,
    pub n_compact: usize,
}

impl From<&CompactionPlan> for PlanFile {
    fn from(p: &CompactionPlan) -> Self {
        Self {
            gather: p.gather.clone(),
            scatter: p.scatter.clone(),
            compact_positions: p.compact_positions.clone(),
            n_original: p.n_original,
            n_compact: p.n_compact,
        }
    }
}

impl TryFrom<PlanFile> for CompactionPlan {
    type Error = PlanError;

    fn try_from(f: PlanFile) -> Result<Self, PlanError> {
        CompactionPlan::from_parts(f.gather, f.scatter, f.compact_positions, f.n_original, f.n_compact)
    }
}
