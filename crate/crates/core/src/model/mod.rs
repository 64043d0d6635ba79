//! Small causal transformer (RMSNorm, QK-norm, RoPE, GQA, SwiGLU) that runs either in the original layout or
//! with position-wise work in compact space, with a hand-written backward pass.

mod checkpoint;
mod forward;
pub mod layers;
mod ledger;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compact_ops::IndexOutOfRange;
use crate::matrix::{DenseMatrix, ShapeError};
use crate::ragged::BatchError;
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, TensorEntry};
pub use forward::{forward, loss_and_grads, mean_cross_entropy};
pub use layers::{apply_rope, attention_ragged, rmsnorm, swiglu_mlp, HeadLayout, MlpWeights};
pub use ledger::{FlopLedger, Phase, PhaseCount};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Index(#[from] IndexOutOfRange),
    #[error("PlanBatchMismatch: {0}")]
    PlanBatchMismatch(String),
    #[error("OddHeadDim: rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("token {token} at row {row} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { row: usize, token: u32, vocab: usize },
    #[error("expected {expected} targets, got {got}")]
    TargetMismatch { expected: usize, got: usize },
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// Two layers, hidden 256, intermediate 512, 4 query heads over 2 kv heads.
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 256,
            intermediate_size: 512,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 64,
            vocab_size: 128,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    /// A very small model for fast tests and large-batch ledger runs.
    pub fn tiny(num_layers: usize, hidden_size: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            hidden_size,
            intermediate_size: 2 * hidden_size,
            num_heads: 1,
            num_kv_heads: 1,
            head_dim: hidden_size,
            vocab_size,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                self.hidden_size, self.num_heads, self.head_dim
            )));
        }
        if self.num_kv_heads > self.num_heads || !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads {} must be a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::OddHeadDim(self.head_dim));
        }
        Ok(())
    }

    pub fn heads(&self) -> HeadLayout {
        HeadLayout { num_heads: self.num_heads, num_kv_heads: self.num_kv_heads, head_dim: self.head_dim }
    }

    pub fn q_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

/// Per-layer weights. Norm weights are stored as `1 x n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: DenseMatrix<T>,
    pub wq: DenseMatrix<T>,
    pub wk: DenseMatrix<T>,
    pub wv: DenseMatrix<T>,
    pub wo: DenseMatrix<T>,
    pub q_norm: DenseMatrix<T>,
    pub k_norm: DenseMatrix<T>,
    pub mlp_norm: DenseMatrix<T>,
    pub w_gate: DenseMatrix<T>,
    pub w_up: DenseMatrix<T>,
    pub w_down: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: DenseMatrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: DenseMatrix<T>,
    pub lm_head: DenseMatrix<T>,
}

/// Gradients share the parameter layout.
pub type ParamGrads<T> = ModelParams<T>;

const INIT_RANGE: f64 = 0.05;

impl<T: Scalar> ModelParams<T> {
    /// Uniform `[-0.05, 0.05]` weights from `seed`; norm weights start at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            DenseMatrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-INIT_RANGE..=INIT_RANGE)))
        };
        let ones = |n: usize| DenseMatrix::from_fn(1, n, |_, _| T::one());
        let (d, di, hd) = (config.hidden_size, config.intermediate_size, config.head_dim);
        let embed = uniform(config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                attn_norm: ones(d),
                wq: uniform(config.q_width(), d),
                wk: uniform(config.kv_width(), d),
                wv: uniform(config.kv_width(), d),
                wo: uniform(d, config.q_width()),
                q_norm: ones(hd),
                k_norm: ones(hd),
                mlp_norm: ones(d),
                w_gate: uniform(di, d),
                w_up: uniform(di, d),
                w_down: uniform(d, di),
            })
            .collect();
        let lm_head = uniform(config.vocab_size, d);
        Ok(Self { embed, layers, final_norm: ones(d), lm_head })
    }

    /// All-zero tensors with the shapes of `like`.
    pub fn zeros_like(like: &Self) -> Self {
        let z = |m: &DenseMatrix<T>| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            embed: z(&like.embed),
            layers: like
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    q_norm: z(&l.q_norm),
                    k_norm: z(&l.k_norm),
                    mlp_norm: z(&l.mlp_norm),
                    w_gate: z(&l.w_gate),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&like.final_norm),
            lm_head: z(&like.lm_head),
        }
    }

    /// Tensors in a fixed order with stable names, e.g. `layers.0.w_gate`.
    pub fn named_tensors(&self) -> Vec<(String, &DenseMatrix<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("q_norm", &l.q_norm),
                ("k_norm", &l.k_norm),
                ("mlp_norm", &l.mlp_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut DenseMatrix<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("attn_norm", &mut l.attn_norm),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("q_norm", &mut l.q_norm),
                ("k_norm", &mut l.k_norm),
                ("mlp_norm", &mut l.mlp_norm),
                ("w_gate", &mut l.w_gate),
                ("w_up", &mut l.w_up),
                ("w_down", &mut l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |m: &DenseMatrix<T>| m.cast::<U>();
        ModelParams {
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    q_norm: c(&l.q_norm),
                    k_norm: c(&l.k_norm),
                    mlp_norm: c(&l.mlp_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            lm_head: c(&self.lm_head),
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        config.validate()?;
        let (d, di, hd, v) = (config.hidden_size, config.intermediate_size, config.head_dim, config.vocab_size);
        self.embed.expect_shape(v, d)?;
        self.final_norm.expect_shape(1, d)?;
        self.lm_head.expect_shape(v, d)?;
        if self.layers.len() != config.num_layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} layers in params, {} in config",
                self.layers.len(),
                config.num_layers
            )));
        }
        for l in &self.layers {
            l.attn_norm.expect_shape(1, d)?;
            l.wq.expect_shape(config.q_width(), d)?;
            l.wk.expect_shape(config.kv_width(), d)?;
            l.wv.expect_shape(config.kv_width(), d)?;
            l.wo.expect_shape(d, config.q_width())?;
            l.q_norm.expect_shape(1, hd)?;
            l.k_norm.expect_shape(1, hd)?;
            l.mlp_norm.expect_shape(1, d)?;
            l.w_gate.expect_shape(di, d)?;
            l.w_up.expect_shape(di, d)?;
            l.w_down.expect_shape(d, di)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.num_layers, c.hidden_size, c.intermediate_size), (2, 256, 512));
    }

    #[test]
    fn invalid_configs() {
        let bad_heads = ModelConfig { num_heads: 3, head_dim: 64, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_kv = ModelConfig { num_kv_heads: 3, ..ModelConfig::default() };
        assert!(bad_kv.validate().is_err());
        let odd = ModelConfig { hidden_size: 5, num_heads: 1, num_kv_heads: 1, head_dim: 5, ..ModelConfig::default() };
        assert!(matches!(odd.validate(), Err(ModelError::OddHeadDim(5))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = ModelConfig::tiny(1, 8, 16);
        let a = ModelParams::<f64>::init(&c, 7).unwrap();
        assert_eq!(a, ModelParams::<f64>::init(&c, 7).unwrap());
        assert_ne!(a, ModelParams::<f64>::init(&c, 8).unwrap());
        a.check_shapes(&c).unwrap();
        assert!(a.embed.max_abs() <= 0.05);
        assert!(a.layers[0].attn_norm.as_slice().iter().all(|&w| w == 1.0));
        let names: Vec<String> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 11 + 1);
        assert_eq!(names[9], "layers.0.w_gate");
    }
}
