//! The six small sharing patterns used by the equivalence suite.
//!
//! Token counts are 5, 10, 10, 6, 10 and 20. Sequences are written over
//! abstract symbols `0..14`; the seed picks which vocabulary ids they map to.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ragged::RaggedBatch;

use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    SingleSequence,
    IdenticalSequences,
    SharedPrefix,
    NoSharing,
    MixedLengths,
    ComplexSharing,
}

/// Distinct symbols used across all patterns.
pub const PATTERN_SYMBOLS: u32 = 14;

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::SingleSequence,
        Pattern::IdenticalSequences,
        Pattern::SharedPrefix,
        Pattern::NoSharing,
        Pattern::MixedLengths,
        Pattern::ComplexSharing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::SingleSequence => "single_sequence",
            Pattern::IdenticalSequences => "identical_sequences",
            Pattern::SharedPrefix => "shared_prefix",
            Pattern::NoSharing => "no_sharing",
            Pattern::MixedLengths => "mixed_lengths",
            Pattern::ComplexSharing => "complex_sharing",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn symbols(self) -> Vec<Vec<u32>> {
        match self {
            Pattern::SingleSequence => vec![vec![0, 1, 2, 3, 4]],
            Pattern::IdenticalSequences => vec![vec![0, 1, 2, 3, 4]; 2],
            Pattern::SharedPrefix => vec![vec![0, 1, 2, 3, 4], vec![0, 1, 2, 5, 6]],
            Pattern::NoSharing => vec![vec![0, 1, 2], vec![3, 4, 5]],
            Pattern::MixedLengths => vec![vec![0, 1], vec![0, 1, 2], vec![0, 1, 3, 4, 5]],
            // branches after [0], [0, 1] and [0, 1, 2]
            Pattern::ComplexSharing => vec![
                vec![0, 1, 2, 3, 4],
                vec![0, 1, 2, 5, 6],
                vec![0, 1, 7, 8, 9],
                vec![0, 10, 11, 12, 13],
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub seed: u64,
}

pub fn make_pattern_batch(spec: PatternSpec, vocab: u32) -> Result<RaggedBatch, BenchError> {
    if vocab < PATTERN_SYMBOLS {
        return Err(BenchError::InvalidSpec(format!(
            "patterns need a vocabulary of at least {PATTERN_SYMBOLS}, got {vocab}"
        )));
    }
    let mut ids: Vec<u32> = (0..vocab).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let sequences: Vec<Vec<u32>> = spec
        .pattern
        .symbols()
        .into_iter()
        .map(|s| s.into_iter().map(|sym| ids[sym as usize]).collect())
        .collect();
    Ok(RaggedBatch::from_sequences(&sequences))
}

/// Next-token targets within each sequence; the last token predicts the sequence's first.
pub fn next_token_targets(batch: &RaggedBatch) -> Vec<u32> {
    let mut targets = Vec::with_capacity(batch.len());
    for s in 0..batch.num_sequences() {
        let tokens = batch.sequence_tokens(s);
        targets.extend(tokens.iter().skip(1));
        targets.extend(tokens.first());
    }
    targets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trie::build_plan;

    #[test]
    fn token_counts() {
        let counts: Vec<usize> = Pattern::ALL
            .iter()
            .map(|&p| make_pattern_batch(PatternSpec { pattern: p, seed: 0 }, 128).unwrap().len())
            .collect();
        assert_eq!(counts, vec![5, 10, 10, 6, 10, 20]);
    }

    #[test]
    fn sharing_structure() {
        let plan = |p| build_plan(&make_pattern_batch(PatternSpec { pattern: p, seed: 9 }, 64).unwrap()).unwrap();
        assert_eq!(plan(Pattern::SingleSequence).n_compact(), 5);
        assert_eq!(plan(Pattern::IdenticalSequences).n_compact(), 5);
        assert_eq!(plan(Pattern::SharedPrefix).n_compact(), 7);
        assert_eq!(plan(Pattern::NoSharing).n_compact(), 6);
        assert_eq!(plan(Pattern::MixedLengths).n_compact(), 6);
        assert_eq!(plan(Pattern::ComplexSharing).n_compact(), 14);
    }

    #[test]
    fn complex_sharing_branches_three_times() {
        let batch = make_pattern_batch(PatternSpec { pattern: Pattern::ComplexSharing, seed: 1 }, 128).unwrap();
        // count distinct prefixes that have more than one distinct continuation
        let mut branches = std::collections::HashMap::<Vec<u32>, std::collections::HashSet<u32>>::new();
        for s in 0..batch.num_sequences() {
            let t = batch.sequence_tokens(s);
            for i in 1..t.len() {
                branches.entry(t[..i].to_vec()).or_default().insert(t[i]);
            }
        }
        assert!(branches.values().filter(|c| c.len() > 1).count() >= 3);
    }

    #[test]
    fn first_tokens_differ_without_sharing() {
        let b = make_pattern_batch(PatternSpec { pattern: Pattern::NoSharing, seed: 2 }, 20).unwrap();
        assert_ne!(b.sequence_tokens(0)[0], b.sequence_tokens(1)[0]);
        assert!(make_pattern_batch(PatternSpec { pattern: Pattern::NoSharing, seed: 2 }, 10).is_err());
    }

    #[test]
    fn targets_follow_sequences() {
        let b = RaggedBatch::from_sequences(&[vec![4, 5, 6], vec![7, 8]]);
        assert_eq!(next_token_targets(&b), vec![5, 6, 4, 8, 7]);
        assert_eq!(Pattern::from_name("mixed_lengths"), Some(Pattern::MixedLengths));
    }
}
