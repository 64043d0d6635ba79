//! Analytical compression and Amdahl-style speedup model.
//!
//! Ratios are kept exact and rounded only when presented.

use num_rational::Ratio;
use num_traits::{Float, ToPrimitive};
use serde::{Deserialize, Serialize};

pub type Rational = Ratio<u128>;

/// Largest prefix length [`crossover_prefix`] searches.
pub const MAX_CROSSOVER_PREFIX: u64 = 1 << 20;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("DegenerateBatch: P + B*S is zero")]
    DegenerateBatch,
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

/// Model and workload shape. JSON keys are the short symbols (`d`, `d_int`, `L`, `B`, `P`, `S`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    #[serde(rename = "d")]
    pub hidden_size: u64,
    #[serde(rename = "d_int")]
    pub intermediate_size: u64,
    /// Defaults to `P + S`.
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "P")]
    pub prefix: u64,
    #[serde(rename = "S")]
    pub suffix: u64,
    /// Overrides the position-wise fraction derived from `d`, `d_int`, `L`.
    #[serde(rename = "f_c", default, skip_serializing_if = "Option::is_none")]
    pub positionwise_fraction: Option<f64>,
}

impl CostInputs {
    pub fn seq_len(&self) -> u64 {
        self.seq_len.unwrap_or(self.prefix + self.suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupPrediction {
    pub f_c: f64,
    pub r: f64,
    pub gamma: f64,
    pub predicted_speedup: f64,
}

/// `r = N/N' = B(P+S) / (P + B*S)` for `B` sequences sharing a `P`-token prefix.
pub fn compression_ratio(batch: u64, prefix: u64, suffix: u64) -> Result<Rational, CostError> {
    if batch == 0 {
        return Err(CostError::InvalidInput("batch size must be at least 1".into()));
    }
    let (b, p, s) = (u128::from(batch), u128::from(prefix), u128::from(suffix));
    let compact = p + b * s;
    if compact == 0 {
        return Err(CostError::DegenerateBatch);
    }
    Ok(Rational::new(b * (p + s), compact))
}

/// Fraction of per-token FLOPs in position-wise work:
/// `(8d^2 + 6 d d_int) / (8d^2 + 6 d d_int + 4 L d)`.
pub fn positionwise_fraction(hidden: u64, intermediate: u64, seq_len: u64) -> Result<Rational, CostError> {
    if hidden == 0 || intermediate == 0 || seq_len == 0 {
        return Err(CostError::InvalidInput("d, d_int and L must be positive".into()));
    }
    let (d, di, l) = (u128::from(hidden), u128::from(intermediate), u128::from(seq_len));
    let positionwise = 8 * d * d + 6 * d * di;
    Ok(Rational::new(positionwise, positionwise + 4 * l * d))
}

/// `1 / ((1 - f_c) + f_c / r)`.
pub fn predicted_speedup<T: Float>(f_c: T, r: T) -> T {
    T::one() / ((T::one() - f_c) + f_c / r)
}

/// [`predicted_speedup`] in exact arithmetic: `r / (r (1 - f_c) + f_c)`.
pub fn predicted_speedup_exact(f_c: Rational, r: Rational) -> Rational {
    r / (r * (Rational::from_integer(1) - f_c) + f_c)
}

pub fn to_f64(x: Rational) -> f64 {
    x.to_f64().expect("finite ratio")
}

pub fn predict(inputs: &CostInputs) -> Result<SpeedupPrediction, CostError> {
    let r = compression_ratio(inputs.batch, inputs.prefix, inputs.suffix)?;
    let (f_c, speedup) = match inputs.positionwise_fraction {
        Some(f) if (0.0..=1.0).contains(&f) => (f, predicted_speedup(f, to_f64(r))),
        Some(f) => return Err(CostError::InvalidInput(format!("f_c = {f} outside [0, 1]"))),
        None => {
            let f = positionwise_fraction(inputs.hidden_size, inputs.intermediate_size, inputs.seq_len())?;
            (to_f64(f), to_f64(predicted_speedup_exact(f, r)))
        }
    };
    Ok(SpeedupPrediction { f_c, r: to_f64(r), gamma: to_f64(r.recip()), predicted_speedup: speedup })
}

/// Smallest shared-prefix length `P` for which the position-wise time saved on
/// duplicate rows, `(N - N') * t_pw`, exceeds the gather/scatter overhead
/// `2 * t_overhead * N`. `None` when no `P <= 2^20` qualifies.
pub fn crossover_prefix(
    batch: u64,
    suffix: u64,
    overhead_per_token: f64,
    positionwise_time_per_token: f64,
) -> Option<u64> {
    if batch < 2 || !(0.0..).contains(&overhead_per_token) || positionwise_time_per_token.is_nan() || positionwise_time_per_token <= 0.0 {
        return None;
    }
    let wins = |p: u64| crossover_wins(batch, p, suffix, overhead_per_token, positionwise_time_per_token);
    // net saving is affine in P: P * ((B-1) t_pw - 2 B t_o) - 2 B S t_o
    let (b, s) = (batch as f64, suffix as f64);
    let slope = (b - 1.0) * positionwise_time_per_token - 2.0 * b * overhead_per_token;
    if slope <= 0.0 {
        return None;
    }
    let estimate = (2.0 * b * s * overhead_per_token / slope).floor().max(0.0);
    if estimate > MAX_CROSSOVER_PREFIX as f64 {
        return None;
    }
    // settle rounding in the estimate against the exact predicate
    let mut p = (estimate as u64).saturating_sub(2);
    while p <= MAX_CROSSOVER_PREFIX {
        if wins(p) {
            return Some(p);
        }
        p += 1;
    }
    None
}

/// The crossover predicate for one prefix length.
pub fn crossover_wins(batch: u64, prefix: u64, suffix: u64, overhead: f64, positionwise: f64) -> bool {
    let n = (batch * (prefix + suffix)) as f64;
    let compact = (prefix + batch * suffix) as f64;
    (n - compact) * positionwise > 2.0 * overhead * n
}
