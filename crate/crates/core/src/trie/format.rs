//! Packed little-endian binary plan format.
//!
//! ```text
//! magic "RDXP" | version u16 | N u64 | N' u64 | gather u32[N'] | scatter u32[N] | compact_positions u32[N']
//! ```
//!
//! Only the unpadded plan is stored; padding is re-applied with [`pad_plan`](super::pad_plan).

use super::{CompactionPlan, PlanError};

pub const MAGIC: &[u8; 4] = b"RDXP";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 8;

pub fn encode_binary(plan: &CompactionPlan) -> Vec<u8> {
    let n = plan.n_original;
    let m = plan.n_compact;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n + 2 * m));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for arr in [&plan.gather[..m], &plan.scatter[..], &plan.compact_positions[..m]] {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<CompactionPlan, PlanError> {
    let bad = |msg: &str| PlanError::Malformed(format!("binary plan: {msg}"));
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let n = usize::try_from(read_u64(6)).map_err(|_| bad("N overflows usize"))?;
    let m = usize::try_from(read_u64(14)).map_err(|_| bad("N' overflows usize"))?;
    let body_len = n
        .checked_add(m.checked_mul(2).ok_or_else(|| bad("size overflow"))?)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() - HEADER_LEN != body_len {
        return Err(bad(&format!("body is {} bytes, expected {body_len}", bytes.len() - HEADER_LEN)));
    }
    let mut words = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")));
    let gather: Vec<u32> = words.by_ref().take(m).collect();
    let scatter: Vec<u32> = words.by_ref().take(n).collect();
    let positions: Vec<u32> = words.collect();
    CompactionPlan::from_parts(gather, scatter, positions, n, m)
}
