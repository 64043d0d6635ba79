//! Row counters per forward phase: the empirical counterpart of the
//! position-wise FLOP fraction.

use serde::Serialize;

use crate::trie::CompactionPlan;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Embedding,
    AttnNorm,
    QkvProj,
    QkNorm,
    Rope,
    ScatterQkv,
    Attention,
    GatherAttn,
    OProj,
    AttnResidual,
    MlpNorm,
    Mlp,
    MlpResidual,
    FinalNorm,
    LmHead,
    ScatterLogits,
}

impl Phase {
    pub fn is_positionwise(self) -> bool {
        !matches!(self, Phase::ScatterQkv | Phase::Attention | Phase::GatherAttn | Phase::ScatterLogits)
    }

    pub fn is_attention(self) -> bool {
        self == Phase::Attention
    }

    pub fn is_data_movement(self) -> bool {
        matches!(self, Phase::ScatterQkv | Phase::GatherAttn | Phase::ScatterLogits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhaseCount {
    /// `None` for the embedding and output phases.
    pub layer: Option<usize>,
    pub phase: Phase,
    pub rows: u64,
}

/// Append-only record of how many token rows each phase processed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopLedger {
    entries: Vec<PhaseCount>,
    positionwise_row_ops: u64,
    attention_row_ops: u64,
    gather_scatter_rows: u64,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: Option<usize>, phase: Phase, rows: usize) {
        let rows = rows as u64;
        if phase.is_positionwise() {
            self.positionwise_row_ops += rows;
        } else if phase.is_attention() {
            self.attention_row_ops += rows;
        } else {
            self.gather_scatter_rows += rows;
        }
        self.entries.push(PhaseCount { layer, phase, rows });
    }

    /// Token rows summed over every position-wise phase.
    pub fn positionwise_row_ops(&self) -> u64 {
        self.positionwise_row_ops
    }

    pub fn attention_row_ops(&self) -> u64 {
        self.attention_row_ops
    }

    pub fn gather_scatter_rows(&self) -> u64 {
        self.gather_scatter_rows
    }

    pub fn entries(&self) -> &[PhaseCount] {
        &self.entries
    }

    /// Row count shared by every position-wise phase of `layer`, or `None`
    /// if the layer was not run or its phases disagree.
    pub fn layer_positionwise_rows(&self, layer: usize) -> Option<u64> {
        let mut rows = self
            .entries
            .iter()
            .filter(|e| e.layer == Some(layer) && e.phase.is_positionwise())
            .map(|e| e.rows);
        let first = rows.next()?;
        rows.all(|r| r == first).then_some(first)
    }

    pub fn layer_attention_rows(&self, layer: usize) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.layer == Some(layer) && e.phase.is_attention())
            .map(|e| e.rows)
    }

    /// The ledger a forward pass over `n` tokens would produce, without running it.
    pub fn predicted(config: &ModelConfig, n: usize, plan: Option<&CompactionPlan>) -> Self {
        let rows = plan.map_or(n, CompactionPlan::compact_rows);
        let mut ledger = Self::new();
        ledger.record(None, Phase::Embedding, rows);
        for layer in 0..config.num_layers {
            ledger.record_layer(layer, rows, n, plan.is_some());
        }
        ledger.record(None, Phase::FinalNorm, rows);
        ledger.record(None, Phase::LmHead, rows);
        if plan.is_some() {
            ledger.record(None, Phase::ScatterLogits, n);
        }
        ledger
    }

    pub(crate) fn record_layer(&mut self, layer: usize, rows: usize, n: usize, compact: bool) {
        let l = Some(layer);
        for phase in [Phase::AttnNorm, Phase::QkvProj, Phase::QkNorm, Phase::Rope] {
            self.record(l, phase, rows);
        }
        if compact {
            // q, k and v each expand to N rows
            self.record(l, Phase::ScatterQkv, 3 * n);
        }
        self.record(l, Phase::Attention, n);
        if compact {
            self.record(l, Phase::GatherAttn, rows);
        }
        for phase in [Phase::OProj, Phase::AttnResidual, Phase::MlpNorm, Phase::Mlp, Phase::MlpResidual] {
            self.record(l, phase, rows);
        }
    }
}
