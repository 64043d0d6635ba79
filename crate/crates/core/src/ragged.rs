//! Ragged (padding-free) batch layout: flat token and position ids plus cumulative
//! sequence offsets.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("MismatchedLengths: {tokens} token ids but {positions} position ids")]
    MismatchedLengths { tokens: usize, positions: usize },
    #[error("NonMonotoneOffsets: cu_seqlens[{index}] = {value} is below the previous offset {previous}")]
    NonMonotoneOffsets { index: usize, value: u64, previous: u64 },
    #[error("EmptySequence: sequence {sequence} has no tokens (pass allow_empty to accept)")]
    EmptySequence { sequence: usize },
    #[error("BoundaryMismatch: {0}")]
    BoundaryMismatch(String),
    #[error("OverflowId: {field}[{index}] = {value} does not fit in 32 bits")]
    OverflowId { field: &'static str, index: usize, value: u64 },
}

impl BatchError {
    /// Stable error class name, printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            BatchError::MismatchedLengths { .. } => "MismatchedLengths",
            BatchError::NonMonotoneOffsets { .. } => "NonMonotoneOffsets",
            BatchError::EmptySequence { .. } => "EmptySequence",
            BatchError::BoundaryMismatch(_) => "BoundaryMismatch",
            BatchError::OverflowId { .. } => "OverflowId",
        }
    }
}

/// `B` sequences packed into one flat array. `cu_seqlens` has `B + 1` entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RaggedBatch {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub cu_seqlens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchStats {
    pub total_tokens: usize,
    pub num_sequences: usize,
    pub max_seq_len: usize,
    pub min_seq_len: usize,
}

/// Whether zero-length sequences are accepted. Rejected unless asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValidationPolicy {
    pub allow_empty: bool,
}

impl RaggedBatch {
    /// Builds a batch with per-sequence positions `0..L_s`.
    pub fn with_default_positions(token_ids: Vec<u32>, cu_seqlens: Vec<usize>) -> Result<Self, BatchError> {
        let position_ids = default_positions(&cu_seqlens)?;
        let batch = Self { token_ids, position_ids, cu_seqlens };
        validate_batch(&batch)?;
        Ok(batch)
    }

    /// Builds a batch from a list of sequences with default positions.
    pub fn from_sequences<S: AsRef<[u32]>>(sequences: &[S]) -> Self {
        let mut token_ids = Vec::new();
        let mut cu_seqlens = vec![0];
        for s in sequences {
            token_ids.extend_from_slice(s.as_ref());
            cu_seqlens.push(token_ids.len());
        }
        let position_ids = sequences
            .iter()
            .flat_map(|s| 0..s.as_ref().len() as u32)
            .collect();
        Self { token_ids, position_ids, cu_seqlens }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_sequences(&self) -> usize {
        self.cu_seqlens.len().saturating_sub(1)
    }

    /// Half-open token range of sequence `s`.
    pub fn sequence_range(&self, s: usize) -> std::ops::Range<usize> {
        self.cu_seqlens[s]..self.cu_seqlens[s + 1]
    }

    pub fn sequence_tokens(&self, s: usize) -> &[u32] {
        &self.token_ids[self.sequence_range(s)]
    }
}

/// Gate for every consumer of [`RaggedBatch`]; empty sequences are rejected.
pub fn validate_batch(batch: &RaggedBatch) -> Result<BatchStats, BatchError> {
    validate_batch_with(batch, ValidationPolicy::default())
}

pub fn validate_batch_with(batch: &RaggedBatch, policy: ValidationPolicy) -> Result<BatchStats, BatchError> {
    if batch.token_ids.len() != batch.position_ids.len() {
        return Err(BatchError::MismatchedLengths {
            tokens: batch.token_ids.len(),
            positions: batch.position_ids.len(),
        });
    }
    let lengths = sequence_lengths(&batch.cu_seqlens, policy)?;
    let n = *batch.cu_seqlens.last().expect("checked non-empty");
    if n != batch.token_ids.len() {
        return Err(BatchError::BoundaryMismatch(format!(
            "last offset {n} but {} tokens",
            batch.token_ids.len()
        )));
    }
    if n > u32::MAX as usize + 1 {
        return Err(BatchError::OverflowId { field: "cu_seqlens", index: lengths.len(), value: n as u64 });
    }
    Ok(BatchStats {
        total_tokens: n,
        num_sequences: lengths.len(),
        max_seq_len: lengths.iter().copied().max().unwrap_or(0),
        min_seq_len: lengths.iter().copied().min().unwrap_or(0),
    })
}

fn sequence_lengths(cu_seqlens: &[usize], policy: ValidationPolicy) -> Result<Vec<usize>, BatchError> {
    match cu_seqlens.first() {
        None => return Err(BatchError::BoundaryMismatch("cu_seqlens is empty".into())),
        Some(&first) if first != 0 => {
            return Err(BatchError::BoundaryMismatch(format!("cu_seqlens[0] = {first}, expected 0")))
        }
        Some(_) => {}
    }
    let mut lengths = Vec::with_capacity(cu_seqlens.len() - 1);
    for (i, w) in cu_seqlens.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(BatchError::NonMonotoneOffsets { index: i + 1, value: w[1] as u64, previous: w[0] as u64 });
        }
        if w[1] == w[0] && !policy.allow_empty {
            return Err(BatchError::EmptySequence { sequence: i });
        }
        lengths.push(w[1] - w[0]);
    }
    Ok(lengths)
}

/// Positions `0..L_s` for every sequence `s`, concatenated.
pub fn default_positions(cu_seqlens: &[usize]) -> Result<Vec<u32>, BatchError> {
    let lengths = sequence_lengths(cu_seqlens, ValidationPolicy { allow_empty: true })?;
    let mut out = Vec::with_capacity(cu_seqlens.last().copied().unwrap_or(0));
    for len in lengths {
        if len > u32::MAX as usize + 1 {
            return Err(BatchError::OverflowId { field: "position_ids", index: out.len(), value: len as u64 - 1 });
        }
        out.extend((0..len).map(|p| p as u32));
    }
    Ok(out)
}

/// JSON wire format. Ids are read as 64-bit so oversized values are reported, not truncated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFile {
    pub token_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_ids: Option<Vec<u64>>,
    pub cu_seqlens: Vec<u64>,
}

impl BatchFile {
    /// Narrows ids to 32 bits, fills missing positions, and validates.
    pub fn into_batch(self, policy: ValidationPolicy) -> Result<RaggedBatch, BatchError> {
        let token_ids = narrow("token_ids", &self.token_ids)?;
        let cu_seqlens: Vec<usize> = self.cu_seqlens.iter().map(|&v| v as usize).collect();
        let position_ids = match &self.position_ids {
            Some(p) => narrow("position_ids", p)?,
            None => {
                if cu_seqlens.last().copied() != Some(token_ids.len()) {
                    sequence_lengths(&cu_seqlens, policy)?;
                    return Err(BatchError::BoundaryMismatch(format!(
                        "last offset {:?} but {} tokens",
                        cu_seqlens.last(),
                        token_ids.len()
                    )));
                }
                default_positions(&cu_seqlens)?
            }
        };
        let batch = RaggedBatch { token_ids, position_ids, cu_seqlens };
        validate_batch_with(&batch, policy)?;
        Ok(batch)
    }
}

impl From<&RaggedBatch> for BatchFile {
    fn from(b: &RaggedBatch) -> Self {
        Self {
            token_ids: b.token_ids.iter().map(|&v| v as u64).collect(),
            position_ids: Some(b.position_ids.iter().map(|&v| v as u64).collect()),
            cu_seqlens: b.cu_seqlens.iter().map(|&v| v as u64).collect(),
        }
    }
}

fn narrow(field: &'static str, values: &[u64]) -> Result<Vec<u32>, BatchError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| u32::try_from(value).map_err(|_| BatchError::OverflowId { field, index, value }))
        .collect()
}
