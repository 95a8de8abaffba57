//! Hand-written reverse pass of the teacher-forced loss.
//!
//! Gradients flow through the head, every MLP, every attention block and every
//! RMS norm so that the `W_k`/`W_v` gradients of each layer are exact. Only
//! those two families are materialized.

use crate::error::{bail, Result};
use crate::tensor::{Matrix, Real};

use super::forward::{forward_with_trace, softmax_in_place};
use super::{ModelWeights, RopeTable};

#[derive(Debug, Clone)]
pub struct LossGrads {
    /// Mean next-token cross-entropy over `tokens.len() - 1` predictions.
    pub loss: f64,
    pub d_wk: Vec<Matrix<f64>>,
    pub d_wv: Vec<Matrix<f64>>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Reverse of `y = g ⊙ x · inv`: `dx = inv · (dn − n · mean(dn ⊙ n))` with `dn = g ⊙ dy`.
fn rms_norm_backward<T: Real>(x: &Matrix<T>, gain: &Matrix<T>, inv: &[f64], dy: &Matrix<f64>) -> Matrix<f64> {
    let d = x.cols();
    let mut dx = Matrix::<f64>::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let r = inv[i];
        let n: Vec<f64> = x.row(i).iter().map(|v| v.f64() * r).collect();
        let dn: Vec<f64> = dy.row(i).iter().zip(gain.row(0)).map(|(a, g)| a * g.f64()).collect();
        let mean = n.iter().zip(&dn).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((o, ni), dni) in dx.row_mut(i).iter_mut().zip(&n).zip(&dn) {
            *o = r * (dni - ni * mean);
        }
    }
    dx
}

/// `a (f64) · bᵀ` where `b` is stored in `T`.
fn mul_t<T: Real>(a: &Matrix<f64>, b: &Matrix<T>) -> Matrix<f64> {
    a.matmul_t(&b.cast::<f64>())
}

pub fn loss_and_grads<T: Real>(weights: &ModelWeights<T>, tokens: &[u8]) -> Result<LossGrads> {
    let cfg = &weights.config;
    if tokens.len() < 2 {
        bail!(Input, "need at least 2 tokens for a next-token loss, got {}", tokens.len());
    }
    let (logits, trace) = forward_with_trace(weights, tokens)?;
    let n = tokens.len();
    let preds = (n - 1) as f64;
    let (dh, nq) = (cfg.d_head, cfg.n_q_heads);
    let inv_rope = RopeTable::new(dh, cfg.max_seq, cfg.rope_theta).inverse();

    // dL/dlogits = (softmax − onehot) / (n − 1); the last row predicts nothing.
    let mut loss = 0.0;
    let mut dlogits = Matrix::<f64>::zeros(n, cfg.vocab_size);
    for t in 0..n - 1 {
        let mut p: Vec<f64> = logits.row(t).iter().map(|v| v.f64()).collect();
        softmax_in_place(&mut p);
        let target = tokens[t + 1] as usize;
        loss -= p[target].ln();
        for (o, pv) in dlogits.row_mut(t).iter_mut().zip(&p) {
            *o = pv / preds;
        }
        dlogits.row_mut(t)[target] -= 1.0 / preds;
    }
    loss /= preds;

    let d_final = mul_t(&dlogits, &weights.head);
    let mut dx = rms_norm_backward(&trace.x_final, &weights.final_norm, &trace.inv_rms_final, &d_final);

    let mut d_wk = vec![Matrix::zeros(0, 0); cfg.n_layers];
    let mut d_wv = vec![Matrix::zeros(0, 0); cfg.n_layers];
    for (l, layer) in weights.layers.iter().enumerate().rev() {
        let tr = &trace.layers[l];

        // MLP half: x_out = x_mid + silu(u) · W_down.
        let dz = mul_t(&dx, &layer.w_down);
        let mut du = dz;
        for (g, &u) in du.data_mut().iter_mut().zip(tr.mlp_pre_act.data()) {
            let u = u.f64();
            let s = sigmoid(u);
            *g *= s * (1.0 + u * (1.0 - s));
        }
        let db = mul_t(&du, &layer.w_up);
        let mut d_mid = dx;
        d_mid.add_assign(&rms_norm_backward(&tr.x_mid, &layer.mlp_norm, &tr.inv_rms_mlp, &db));

        // Attention half: x_mid = x + heads · W_o.
        let d_heads = mul_t(&d_mid, &layer.wo);
        let mut dq_rope = Matrix::<f64>::zeros(n, cfg.d_hidden);
        let mut dk_rope = Matrix::<f64>::zeros(n, cfg.d_kv());
        let mut dv = Matrix::<f64>::zeros(n, cfg.d_kv());
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..nq {
            let j = cfg.kv_head_of(h);
            let (qc, kc) = (h * dh, j * dh);
            let p = &tr.probs[h];
            for i in 0..n {
                let d_out = &d_heads.row(i)[qc..qc + dh];
                // dP[i,u] = dO_i · v_u ; dS = P ⊙ (dP − Σ P dP)
                let dp: Vec<f64> = (0..=i)
                    .map(|u| d_out.iter().zip(&tr.v.row(u)[kc..kc + dh]).map(|(a, b)| a * b.f64()).sum())
                    .collect();
                let pdp: f64 = (0..=i).map(|u| p.get(i, u) * dp[u]).sum();
                for u in 0..=i {
                    let pu = p.get(i, u);
                    for (e, &g) in d_out.iter().enumerate() {
                        dv.row_mut(u)[kc + e] += pu * g;
                    }
                    let ds = pu * (dp[u] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..dh {
                        dq_rope.row_mut(i)[qc + e] += ds * tr.k_rope.get(u, kc + e).f64();
                        dk_rope.row_mut(u)[kc + e] += ds * tr.q_rope.get(i, qc + e).f64();
                    }
                }
            }
        }
        let dq = inv_rope.apply(&dq_rope, &trace.positions)?;
        let dk = inv_rope.apply(&dk_rope, &trace.positions)?;
        let normed = tr.normed.cast::<f64>();
        d_wk[l] = normed.t_matmul(&dk);
        d_wv[l] = normed.t_matmul(&dv);

        let mut d_normed = mul_t(&dq, &layer.wq);
        d_normed.add_assign(&mul_t(&dk, &layer.wk));
        d_normed.add_assign(&mul_t(&dv, &layer.wv));
        let mut d_in = d_mid;
        d_in.add_assign(&rms_norm_backward(&tr.x, &layer.attn_norm, &tr.inv_rms_attn, &d_normed));
        dx = d_in;
    }
    Ok(LossGrads { loss, d_wk, d_wv })
}

/// Token-weighted mean loss over a batch of independent sequences, with gradients of that mean.
pub fn batch_loss_and_grads<T: Real>(weights: &ModelWeights<T>, batch: &[&[u8]]) -> Result<LossGrads> {
    if batch.is_empty() {
        bail!(Input, "empty batch");
    }
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut acc: Option<LossGrads> = None;
    for seq in batch {
        let g = loss_and_grads(weights, seq)?;
        let w = (seq.len() - 1) as f64 / total as f64;
        match acc.as_mut() {
            None => {
                acc = Some(LossGrads {
                    loss: g.loss * w,
                    d_wk: g.d_wk.iter().map(|m| m.scale(w)).collect(),
                    d_wv: g.d_wv.iter().map(|m| m.scale(w)).collect(),
                })
            }
            Some(a) => {
                a.loss += g.loss * w;
                for (x, y) in a.d_wk.iter_mut().zip(&g.d_wk) {
                    x.add_assign(&y.scale(w));
                }
                for (x, y) in a.d_wv.iter_mut().zip(&g.d_wv) {
                    x.add_assign(&y.scale(w));
                }
            }
        }
    }
    Ok(acc.expect("non-empty batch"))
}
