use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ragged::RaggedBatch;

use super::BenchError;

/// `B` sequences sharing a `P`-token prefix followed by `S` unique tokens each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub batch: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub vocab: u32,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(batch: usize, prefix_len: usize, suffix_len: usize, vocab: u32, seed: u64) -> Self {
        Self { batch, prefix_len, suffix_len, vocab, seed }
    }

    /// Short row label, e.g. `B32_P2048_S256`.
    pub fn label(&self) -> String {
        format!("B{}_P{}_S{}", self.batch, self.prefix_len, self.suffix_len)
    }

    pub fn total_tokens(&self) -> usize {
        self.batch * (self.prefix_len + self.suffix_len)
    }

    /// `P + B*S`: the compact size the generator guarantees.
    pub fn compact_tokens(&self) -> usize {
        self.prefix_len + self.batch * self.suffix_len
    }
}

/// The fifteen `(P, S)` rows of the reference latency sweep at `B = 32`.
pub fn sweep_grid() -> Vec<(usize, usize)> {
    let short = [1, 16, 32, 128, 256, 512, 1024, 2048].map(|p| (p, 256));
    let long = [1, 32, 128, 256, 512, 1024, 2048].map(|p| (p, 1024));
    short.into_iter().chain(long).collect()
}

pub fn sweep_specs(vocab: u32, seed: u64) -> Vec<SyntheticSpec> {
    sweep_grid().into_iter().map(|(p, s)| SyntheticSpec::new(32, p, s, vocab, seed)).collect()
}

/// Draws the shared prefix once, then per sequence a suffix whose first token
/// differs from every other sequence's, so the trie branches exactly at `P`.
pub fn make_synthetic_batch(spec: &SyntheticSpec) -> Result<RaggedBatch, BenchError> {
    if spec.batch == 0 || spec.prefix_len + spec.suffix_len == 0 || spec.vocab == 0 {
        return Err(BenchError::InvalidSpec(format!("{spec:?}: need B >= 1, P + S >= 1, vocab >= 1")));
    }
    if spec.suffix_len > 0 && spec.batch > spec.vocab as usize {
        return Err(BenchError::VocabTooSmall { batch: spec.batch, vocab: spec.vocab });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prefix: Vec<u32> = (0..spec.prefix_len).map(|_| rng.random_range(0..spec.vocab)).collect();
    let mut used = vec![false; spec.vocab as usize];
    let sequences: Vec<Vec<u32>> = (0..spec.batch)
        .map(|_| {
            let mut seq = prefix.clone();
            if spec.suffix_len > 0 {
                let first = loop {
                    let t = rng.random_range(0..spec.vocab);
                    if !used[t as usize] {
                        used[t as usize] = true;
                        break t;
                    }
                };
                seq.push(first);
                seq.extend((1..spec.suffix_len).map(|_| rng.random_range(0..spec.vocab)));
            }
            seq
        })
        .collect();
    Ok(RaggedBatch::from_sequences(&sequences))
}
