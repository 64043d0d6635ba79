use crate::compact_ops::{
    gather_rows_backward_par, gather_rows_par, scatter_rows_backward_par, scatter_rows_par, threads_from_env,
};
use crate::matrix::DenseMatrix;
use crate::ragged::{validate_batch_with, RaggedBatch, ValidationPolicy};
use crate::scalar::Scalar;
use crate::trie::CompactionPlan;

use super::layers::{
    apply_rope_table, attention_backward, attention_impl, linear, linear_backward, merge_heads, rmsnorm_backward,
    rmsnorm_with_scale, rope_backward, split_heads, swiglu_backward, swiglu_with_cache, AttentionCache, MlpCache,
    MlpGrads, MlpWeights, RopeTable,
};
use super::{FlopLedger, ModelConfig, ModelError, ModelParams, ParamGrads, Phase};

/// Moves rows between the original layout and the layout position-wise work
/// runs in (identical when no plan is given).
struct Layout<'a> {
    plan: Option<&'a CompactionPlan>,
    n: usize,
    rows: usize,
    threads: usize,
}

impl Layout<'_> {
    fn expand<T: Scalar>(&self, m: DenseMatrix<T>) -> Result<DenseMatrix<T>, ModelError> {
        match self.plan {
            Some(p) => Ok(scatter_rows_par(&m, p.scatter_indices(), self.threads)?),
            None => Ok(m),
        }
    }

    fn compact<T: Scalar>(&self, m: DenseMatrix<T>) -> Result<DenseMatrix<T>, ModelError> {
        match self.plan {
            Some(p) => Ok(gather_rows_par(&m, p.gather_indices(), self.threads)?),
            None => Ok(m),
        }
    }

    /// Adjoint of [`Layout::expand`].
    fn expand_backward<T: Scalar>(&self, g: DenseMatrix<T>) -> Result<DenseMatrix<T>, ModelError> {
        match self.plan {
            Some(p) => Ok(scatter_rows_backward_par(&g, p.scatter_indices(), self.rows, self.threads)?),
            None => Ok(g),
        }
    }

    /// Adjoint of [`Layout::compact`].
    fn compact_backward<T: Scalar>(&self, g: DenseMatrix<T>) -> Result<DenseMatrix<T>, ModelError> {
        match self.plan {
            Some(p) => Ok(gather_rows_backward_par(&g, p.gather_indices(), self.n, self.threads)?),
            None => Ok(g),
        }
    }
}

struct LayerTape<T> {
    h_in: DenseMatrix<T>,
    x1: DenseMatrix<T>,
    inv1: Vec<T>,
    q_heads: DenseMatrix<T>,
    q_inv: Vec<T>,
    k_heads: DenseMatrix<T>,
    k_inv: Vec<T>,
    q_full: DenseMatrix<T>,
    k_full: DenseMatrix<T>,
    v_full: DenseMatrix<T>,
    attn: AttentionCache<T>,
    a: DenseMatrix<T>,
    h_attn: DenseMatrix<T>,
    x2: DenseMatrix<T>,
    inv2: Vec<T>,
    mlp: MlpCache<T>,
}

struct Tape<T> {
    ids: Vec<u32>,
    rope: RopeTable<T>,
    layers: Vec<LayerTape<T>>,
    h_final: DenseMatrix<T>,
    inv_final: Vec<T>,
    hf: DenseMatrix<T>,
}

fn mlp_weights<T>(l: &super::LayerParams<T>) -> MlpWeights<'_, T> {
    MlpWeights { gate: &l.w_gate, up: &l.w_up, down: &l.w_down }
}

fn run<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &RaggedBatch,
    plan: Option<&CompactionPlan>,
    ledger: &mut FlopLedger,
    keep: bool,
) -> Result<(DenseMatrix<T>, Option<Tape<T>>), ModelError> {
    params.check_shapes(config)?;
    validate_batch_with(batch, ValidationPolicy { allow_empty: true })?;
    let n = batch.len();
    let (ids, positions) = match plan {
        Some(p) => {
            if p.n_original() != n {
                return Err(ModelError::PlanBatchMismatch(format!(
                    "plan covers {} rows, batch has {n}",
                    p.n_original()
                )));
            }
            let g = p.gather_indices();
            (
                g.iter().map(|&i| batch.token_ids[i as usize]).collect::<Vec<_>>(),
                g.iter().map(|&i| batch.position_ids[i as usize]).collect::<Vec<_>>(),
            )
        }
        None => (batch.token_ids.clone(), batch.position_ids.clone()),
    };
    let layout = Layout { plan, n, rows: ids.len(), threads: threads_from_env() };
    let rows = layout.rows;
    let (hd, eps) = (config.head_dim, config.norm_eps);

    let mut h = DenseMatrix::zeros(rows, config.hidden_size);
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfVocab { row: r, token: id, vocab: config.vocab_size });
        }
        h.row_mut(r).copy_from_slice(params.embed.row(id as usize));
    }
    ledger.record(None, Phase::Embedding, rows);
    let rope = RopeTable::new(&positions, hd, config.rope_theta)?;

    let mut tapes = Vec::new();
    for (li, lp) in params.layers.iter().enumerate() {
        let l = Some(li);
        let (x1, inv1) = rmsnorm_with_scale(&h, lp.attn_norm.as_slice(), eps)?;
        ledger.record(l, Phase::AttnNorm, rows);
        let q = linear(&x1, &lp.wq)?;
        let k = linear(&x1, &lp.wk)?;
        let v = linear(&x1, &lp.wv)?;
        ledger.record(l, Phase::QkvProj, rows);
        let q_heads = split_heads(q, hd);
        let k_heads = split_heads(k, hd);
        let (qn, q_inv) = rmsnorm_with_scale(&q_heads, lp.q_norm.as_slice(), eps)?;
        let (kn, k_inv) = rmsnorm_with_scale(&k_heads, lp.k_norm.as_slice(), eps)?;
        let qn = merge_heads(qn, config.q_width());
        let kn = merge_heads(kn, config.kv_width());
        ledger.record(l, Phase::QkNorm, rows);
        let (qr, kr) = apply_rope_table(&qn, &kn, &rope, hd)?;
        ledger.record(l, Phase::Rope, rows);

        let q_full = layout.expand(qr)?;
        let k_full = layout.expand(kr)?;
        let v_full = layout.expand(v)?;
        if plan.is_some() {
            ledger.record(l, Phase::ScatterQkv, 3 * n);
        }
        let (a_full, attn) = attention_impl(&q_full, &k_full, &v_full, &batch.cu_seqlens, config.heads(), keep)?;
        ledger.record(l, Phase::Attention, n);
        let a = layout.compact(a_full)?;
        if plan.is_some() {
            ledger.record(l, Phase::GatherAttn, rows);
        }

        let o = linear(&a, &lp.wo)?;
        ledger.record(l, Phase::OProj, rows);
        let h_attn = o.add(&h)?;
        ledger.record(l, Phase::AttnResidual, rows);
        let (x2, inv2) = rmsnorm_with_scale(&h_attn, lp.mlp_norm.as_slice(), eps)?;
        ledger.record(l, Phase::MlpNorm, rows);
        let (m, mlp) = swiglu_with_cache(&x2, mlp_weights(lp))?;
        ledger.record(l, Phase::Mlp, rows);
        let h_out = m.add(&h_attn)?;
        ledger.record(l, Phase::MlpResidual, rows);

        if keep {
            tapes.push(LayerTape {
                h_in: h,
                x1,
                inv1,
                q_heads,
                q_inv,
                k_heads,
                k_inv,
                q_full,
                k_full,
                v_full,
                attn: attn.expect("kept"),
                a,
                h_attn,
                x2,
                inv2,
                mlp,
            });
        }
        h = h_out;
    }

    let (hf, inv_final) = rmsnorm_with_scale(&h, params.final_norm.as_slice(), eps)?;
    ledger.record(None, Phase::FinalNorm, rows);
    let logits_compact = linear(&hf, &params.lm_head)?;
    ledger.record(None, Phase::LmHead, rows);
    let logits = layout.expand(logits_compact)?;
    if plan.is_some() {
        ledger.record(None, Phase::ScatterLogits, n);
    }
    let tape = keep.then_some(Tape { ids, rope, layers: tapes, h_final: h, inv_final, hf });
    Ok((logits, tape))
}

/// Logits `[N x vocab]` in the original row order.
///
/// With a plan, everything except attention runs on the plan's compact rows;
/// q/k/v are scattered to the full layout for attention and its output is
/// gathered straight back. Without one, every phase runs on all `N` rows.
pub fn forward<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &RaggedBatch,
    plan: Option<&CompactionPlan>,
    ledger: &mut FlopLedger,
) -> Result<DenseMatrix<T>, ModelError> {
    Ok(run(config, params, batch, plan, ledger, false)?.0)
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn mean_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    targets: &[u32],
) -> Result<(T, DenseMatrix<T>), ModelError> {
    let n = logits.rows();
    if targets.len() != n {
        return Err(ModelError::TargetMismatch { expected: n, got: targets.len() });
    }
    let vocab = logits.cols();
    let scale = T::one() / T::from_usize(n.max(1)).expect("row count fits");
    let mut loss = T::zero();
    let mut grad = DenseMatrix::zeros(n, vocab);
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(ModelError::TokenOutOfVocab { row: r, token: t, vocab });
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t as usize];
        for (g, &v) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (v - lse).exp() * scale;
        }
        grad.row_mut(r)[t as usize] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy against `targets` and the gradient of every parameter.
///
/// The backward pass mirrors the forward layout: gradients leaving attention
/// are scatter-added back into compact rows, and gradients entering it are
/// scatter-added from the gathered rows into the full layout.
pub fn loss_and_grads<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &RaggedBatch,
    plan: Option<&CompactionPlan>,
    targets: &[u32],
) -> Result<(T, ParamGrads<T>), ModelError> {
    let mut ledger = FlopLedger::new();
    let (logits, tape) = run(config, params, batch, plan, &mut ledger, true)?;
    let tape = tape.expect("tape requested");
    let (loss, dlogits) = mean_cross_entropy(&logits, targets)?;

    let layout = Layout { plan, n: batch.len(), rows: tape.ids.len(), threads: threads_from_env() };
    let (hd, heads) = (config.head_dim, config.heads());
    let mut grads = ModelParams::zeros_like(params);

    let dlogits = layout.expand_backward(dlogits)?;
    let dhf = linear_backward(&dlogits, &tape.hf, &params.lm_head, &mut grads.lm_head);
    let mut dh = rmsnorm_backward(
        &dhf,
        &tape.h_final,
        params.final_norm.as_slice(),
        &tape.inv_final,
        grads.final_norm.as_mut_slice(),
    );

    for (li, lt) in tape.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];

        // h_out = mlp(norm(h_attn)) + h_attn
        let dx2 = swiglu_backward(
            &dh,
            &lt.x2,
            mlp_weights(lp),
            &lt.mlp,
            MlpGrads { gate: &mut lg.w_gate, up: &mut lg.w_up, down: &mut lg.w_down },
        );
        let mut dh_attn = dh;
        dh_attn.add_assign(&rmsnorm_backward(
            &dx2,
            &lt.h_attn,
            lp.mlp_norm.as_slice(),
            &lt.inv2,
            lg.mlp_norm.as_mut_slice(),
        ))?;

        // h_attn = wo(a) + h_in
        let da = linear_backward(&dh_attn, &lt.a, &lp.wo, &mut lg.wo);
        let da_full = layout.compact_backward(da)?;
        let (dq_full, dk_full, dv_full) = attention_backward(
            &da_full,
            &lt.q_full,
            &lt.k_full,
            &lt.v_full,
            &batch.cu_seqlens,
            heads,
            &lt.attn,
        );
        let dqr = layout.expand_backward(dq_full)?;
        let dkr = layout.expand_backward(dk_full)?;
        let dv = layout.expand_backward(dv_full)?;

        let dqn = split_heads(rope_backward(&dqr, &tape.rope, hd), hd);
        let dkn = split_heads(rope_backward(&dkr, &tape.rope, hd), hd);
        let dq = rmsnorm_backward(&dqn, &lt.q_heads, lp.q_norm.as_slice(), &lt.q_inv, lg.q_norm.as_mut_slice());
        let dk = rmsnorm_backward(&dkn, &lt.k_heads, lp.k_norm.as_slice(), &lt.k_inv, lg.k_norm.as_mut_slice());
        let dq = merge_heads(dq, config.q_width());
        let dk = merge_heads(dk, config.kv_width());

        let mut dx1 = linear_backward(&dq, &lt.x1, &lp.wq, &mut lg.wq);
        dx1.add_assign(&linear_backward(&dk, &lt.x1, &lp.wk, &mut lg.wk))?;
        dx1.add_assign(&linear_backward(&dv, &lt.x1, &lp.wv, &mut lg.wv))?;

        let mut dh_in = dh_attn;
        dh_in.add_assign(&rmsnorm_backward(
            &dx1,
            &lt.h_in,
            lp.attn_norm.as_slice(),
            &lt.inv1,
            lg.attn_norm.as_mut_slice(),
        ))?;
        dh = dh_in;
    }

    for (r, &id) in tape.ids.iter().enumerate() {
        for (g, &d) in grads.embed.row_mut(id as usize).iter_mut().zip(dh.row(r)) {
            *g += d;
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trie::{build_plan, pad_plan};

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            intermediate_size: 24,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 4,
            vocab_size: 32,
            ..ModelConfig::default()
        }
    }

    fn shared_batch() -> RaggedBatch {
        RaggedBatch::from_sequences(&[vec![1, 2, 3, 4], vec![1, 2, 5], vec![1, 2, 3, 6, 7]])
    }

    #[test]
    fn compact_forward_is_bit_identical() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, 1).unwrap();
        let batch = shared_batch();
        let plan = build_plan(&batch).unwrap();
        let base = forward(&config, &params, &batch, None, &mut FlopLedger::new()).unwrap();
        let radix = forward(&config, &params, &batch, Some(&plan), &mut FlopLedger::new()).unwrap();
        assert_eq!(base.as_slice(), radix.as_slice());
        let padded = pad_plan(&plan, 8).unwrap();
        let radix = forward(&config, &params, &batch, Some(&padded), &mut FlopLedger::new()).unwrap();
        assert_eq!(base.as_slice(), radix.as_slice());
    }

    #[test]
    fn identity_plan_matches_baseline() {
        let config = small_config();
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let batch = RaggedBatch::from_sequences(&[vec![3, 1, 4, 1, 5]]);
        let plan = CompactionPlan::identity(&batch.position_ids);
        let base = forward(&config, &params, &batch, None, &mut FlopLedger::new()).unwrap();
        let radix = forward(&config, &params, &batch, Some(&plan), &mut FlopLedger::new()).unwrap();
        assert_eq!(base, radix);
    }

    #[test]
    fn ledger_counts_rows_per_phase() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, 1).unwrap();
        let batch = shared_batch();
        let plan = build_plan(&batch).unwrap();
        let (n, m) = (batch.len() as u64, plan.n_compact() as u64);
        let mut with = FlopLedger::new();
        forward(&config, &params, &batch, Some(&plan), &mut with).unwrap();
        let mut without = FlopLedger::new();
        forward(&config, &params, &batch, None, &mut without).unwrap();
        for l in 0..2 {
            assert_eq!(with.layer_positionwise_rows(l), Some(m));
            assert_eq!(without.layer_positionwise_rows(l), Some(n));
            assert_eq!(with.layer_attention_rows(l), Some(n));
            assert_eq!(without.layer_attention_rows(l), Some(n));
        }
        assert_eq!(with.attention_row_ops(), without.attention_row_ops());
        assert_eq!(without.gather_scatter_rows(), 0);
        assert_eq!(with, FlopLedger::predicted(&config, batch.len(), Some(&plan)));
        assert_eq!(without, FlopLedger::predicted(&config, batch.len(), None));
    }

    #[test]
    fn plan_size_mismatch_is_rejected() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, 1).unwrap();
        let plan = build_plan(&RaggedBatch::from_sequences(&[vec![1, 2]])).unwrap();
        let err = forward(&config, &params, &shared_batch(), Some(&plan), &mut FlopLedger::new()).unwrap_err();
        assert!(matches!(err, ModelError::PlanBatchMismatch(_)));
    }

    #[test]
    fn causality_with_and_without_plan() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, 4).unwrap();
        let batch = shared_batch();
        // perturb token 2 of sequence 2 (flat row 9)
        let mut perturbed = batch.clone();
        perturbed.token_ids[9] = 30;
        for use_plan in [false, true] {
            let run = |b: &RaggedBatch| {
                let plan = build_plan(b).unwrap();
                forward(&config, &params, b, use_plan.then_some(&plan), &mut FlopLedger::new()).unwrap()
            };
            let (a, b) = (run(&batch), run(&perturbed));
            for r in 0..batch.len() {
                let changed = a.row(r) != b.row(r);
                assert_eq!(changed, r >= 9, "row {r}, plan {use_plan}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = DenseMatrix::from_rows(&[vec![1.0f64, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]);
        let (loss, g) = mean_cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(loss > 0.0);
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(mean_cross_entropy(&logits, &[1]).is_err());
    }

    fn relative_diff(a: &ParamGrads<f64>, b: &ParamGrads<f64>) -> f64 {
        let mut worst = 0.0f64;
        for ((_, x), (_, y)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            let scale = x.max_abs().max(1e-300);
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                worst = worst.max((p - q).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn compact_gradients_match_baseline() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, 5).unwrap();
        let batch = shared_batch();
        let targets: Vec<u32> = (0..batch.len() as u32).map(|i| (i * 7) % 32).collect();
        let plan = build_plan(&batch).unwrap();
        let (l0, g0) = loss_and_grads(&config, &params, &batch, None, &targets).unwrap();
        let (l1, g1) = loss_and_grads(&config, &params, &batch, Some(&plan), &targets).unwrap();
        assert_eq!(l0, l1);
        assert!(relative_diff(&g0, &g1) <= 1e-12);
        let padded = pad_plan(&plan, 16).unwrap();
        let (_, g2) = loss_and_grads(&config, &params, &batch, Some(&padded), &targets).unwrap();
        assert!(relative_diff(&g0, &g2) <= 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_everywhere() {
        let config = ModelConfig { num_layers: 1, vocab_size: 16, ..small_config() };
        let mut params = ModelParams::<f64>::init(&config, 9).unwrap();
        // larger weights give gradients well above finite-difference noise
        for (_, t) in params.named_tensors_mut() {
            for v in t.as_mut_slice() {
                *v *= 8.0;
            }
        }
        let batch = RaggedBatch::from_sequences(&[vec![1, 2, 3], vec![1, 2, 4, 5]]);
        let targets = [2, 3, 4, 2, 4, 5, 0];
        let plan = build_plan(&batch).unwrap();
        let (_, grads) = loss_and_grads(&config, &params, &batch, Some(&plan), &targets).unwrap();
        let h = 1e-5;
        let names: Vec<String> = grads.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = grads.named_tensors()[ti].1.clone();
            let len = analytic.as_slice().len();
            for k in [0, len / 2, len - 1] {
                let loss_at = |delta: f64| {
                    let mut p = params.clone();
                    p.named_tensors_mut()[ti].1.as_mut_slice()[k] += delta;
                    let logits = forward(&config, &p, &batch, None, &mut FlopLedger::new()).unwrap();
                    mean_cross_entropy(&logits, &targets).unwrap().0
                };
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let a = analytic.as_slice()[k];
                assert!((a - numeric).abs() <= 1e-6 * (1.0 + a.abs()), "{name}[{k}]: {a} vs {numeric}");
            }
        }
    }
}
