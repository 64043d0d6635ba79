//! Prefix trie over a ragged batch and the compaction plan it induces.
//!
//! Each node is identified by its parent and the next `(token, position)` pair, so
//! two original rows share a node exactly when their causal histories are equal.

mod format;
mod plan;

use rustc_hash::FxHashMap;

use crate::ragged::{validate_batch_with, BatchError, RaggedBatch, ValidationPolicy};

pub use format::{decode_binary, encode_binary, MAGIC, VERSION};
pub use plan::{CompactionPlan, PlanFile};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("CapacityExceeded: {n} rows do not fit 32-bit compact indices")]
    CapacityExceeded { n: usize },
    #[error("EmptyPlan: cannot pad a plan with no compact rows")]
    EmptyPlan,
    #[error("InvalidBucket: bucket size must be at least 1")]
    InvalidBucket,
    #[error("MalformedPlan: {0}")]
    Malformed(String),
}

impl PlanError {
    pub fn name(&self) -> &'static str {
        match self {
            PlanError::Batch(e) => e.name(),
            PlanError::CapacityExceeded { .. } => "CapacityExceeded",
            PlanError::EmptyPlan => "EmptyPlan",
            PlanError::InvalidBucket => "InvalidBucket",
            PlanError::Malformed(_) => "MalformedPlan",
        }
    }
}

/// Exact (injective) key for a `(token, position)` pair.
#[inline]
pub fn node_key(token: u32, position: u32) -> u64 {
    (u64::from(position) << 32) ^ u64::from(token)
}

/// Fanout above which a node's children move from a scanned vector to a hash map.
const LINEAR_SCAN_FANOUT: usize = 8;

enum Children {
    Small(Vec<(u64, u32)>),
    Map(FxHashMap<u64, u32>),
}

impl Children {
    #[inline]
    fn find(&self, key: u64) -> Option<u32> {
        match self {
            Children::Small(v) => v.iter().find(|(k, _)| *k == key).map(|&(_, n)| n),
            Children::Map(m) => m.get(&key).copied(),
        }
    }

    #[inline]
    fn insert(&mut self, key: u64, node: u32) {
        match self {
            Children::Small(v) if v.len() < LINEAR_SCAN_FANOUT => v.push((key, node)),
            Children::Small(v) => {
                let mut m: FxHashMap<u64, u32> = v.drain(..).collect();
                m.insert(key, node);
                *self = Children::Map(m);
            }
            Children::Map(m) => {
                m.insert(key, node);
            }
        }
    }
}

struct Node {
    compact: u32,
    children: Children,
}

/// Node arena; index 0 is the root. Node `k > 0` has compact index `k - 1`.
struct Trie {
    nodes: Vec<Node>,
}

impl Trie {
    fn with_capacity(n: usize) -> Self {
        let mut nodes = Vec::with_capacity(n + 1);
        nodes.push(Node { compact: u32::MAX, children: Children::Small(Vec::new()) });
        Self { nodes }
    }
}

pub(crate) fn check_capacity(n: usize) -> Result<(), PlanError> {
    if n > u32::MAX as usize {
        return Err(PlanError::CapacityExceeded { n });
    }
    Ok(())
}

/// Builds the compaction plan, taking a fast path for single-sequence and
/// all-identical batches.
pub fn build_plan(batch: &RaggedBatch) -> Result<CompactionPlan, PlanError> {
    build_plan_with(batch, ValidationPolicy::default())
}

pub fn build_plan_with(batch: &RaggedBatch, policy: ValidationPolicy) -> Result<CompactionPlan, PlanError> {
    validate_batch_with(batch, policy)?;
    check_capacity(batch.len())?;
    match fast_path(batch) {
        Some(plan) => Ok(plan),
        None => Ok(build_trie_unchecked(batch)),
    }
}

/// Always walks the trie, even where a fast path applies.
pub fn build_plan_trie(batch: &RaggedBatch) -> Result<CompactionPlan, PlanError> {
    build_plan_trie_with(batch, ValidationPolicy::default())
}

pub fn build_plan_trie_with(batch: &RaggedBatch, policy: ValidationPolicy) -> Result<CompactionPlan, PlanError> {
    validate_batch_with(batch, policy)?;
    check_capacity(batch.len())?;
    Ok(build_trie_unchecked(batch))
}

/// The edge-case plans that need no trie: one sequence, or all sequences identical.
/// `None` when neither applies. The batch must already be valid.
pub fn build_plan_fast_paths(batch: &RaggedBatch) -> Option<CompactionPlan> {
    fast_path(batch)
}

fn fast_path(batch: &RaggedBatch) -> Option<CompactionPlan> {
    let b = batch.num_sequences();
    if b <= 1 {
        return Some(CompactionPlan::identity(&batch.position_ids));
    }
    let first = batch.sequence_range(0);
    let len = first.len();
    let identical = (1..b).all(|s| {
        let r = batch.sequence_range(s);
        r.len() == len
            && batch.token_ids[r.clone()] == batch.token_ids[first.clone()]
            && batch.position_ids[r] == batch.position_ids[first.clone()]
    });
    if !identical {
        return None;
    }
    let gather: Vec<u32> = (0..len as u32).collect();
    let mut scatter = Vec::with_capacity(batch.len());
    for _ in 0..b {
        scatter.extend_from_slice(&gather);
    }
    Some(CompactionPlan {
        compact_positions: batch.position_ids[first].to_vec(),
        gather,
        scatter,
        n_original: batch.len(),
        n_compact: len,
    })
}

fn build_trie_unchecked(batch: &RaggedBatch) -> CompactionPlan {
    let n = batch.len();
    let mut trie = Trie::with_capacity(n);
    let mut gather = Vec::with_capacity(n);
    let mut scatter = Vec::with_capacity(n);
    let mut compact_positions = Vec::with_capacity(n);
    let mut next_compact: u32 = 0;

    for s in 0..batch.num_sequences() {
        let mut parent = 0usize;
        for i in batch.sequence_range(s) {
            let token = batch.token_ids[i];
            let position = batch.position_ids[i];
            let key = node_key(token, position);
            let compact = match trie.nodes[parent].children.find(key) {
                Some(child) => {
                    parent = child as usize;
                    trie.nodes[parent].compact
                }
                None => {
                    let idx = trie.nodes.len();
                    let compact = next_compact;
                    next_compact += 1;
                    trie.nodes.push(Node { compact, children: Children::Small(Vec::new()) });
                    trie.nodes[parent].children.insert(key, idx as u32);
                    parent = idx;
                    gather.push(i as u32);
                    compact_positions.push(position);
                    compact
                }
            };
            scatter.push(compact);
        }
    }

    CompactionPlan { gather, scatter, compact_positions, n_original: n, n_compact: next_compact as usize }
}

/// Gating rule: compaction pays off when `N'/N <= threshold` (inclusive).
/// A threshold of 0.95 enables it when at least 5% of rows deduplicate.
pub fn should_enable(plan: &CompactionPlan, threshold: f64) -> bool {
    plan.n_original() > 0 && plan.gamma() <= threshold
}

/// Pads the compact rows to a multiple of `bucket_size` by repeating `gather[0]`.
/// Scatter indices are untouched, so padded rows are computed and then dropped.
pub fn pad_plan(plan: &CompactionPlan, bucket_size: usize) -> Result<CompactionPlan, PlanError> {
    if bucket_size == 0 {
        return Err(PlanError::InvalidBucket);
    }
    let m = plan.n_compact;
    if m == 0 {
        return Err(PlanError::EmptyPlan);
    }
    let padded = m.div_ceil(bucket_size) * bucket_size;
    let mut gather = plan.gather[..m].to_vec();
    let mut positions = plan.compact_positions[..m].to_vec();
    gather.resize(padded, plan.gather[0]);
    positions.resize(padded, plan.compact_positions[0]);
    Ok(CompactionPlan { gather, compact_positions: positions, ..plan.clone() })
}
