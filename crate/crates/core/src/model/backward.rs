//! Hand-written reverse-mode gradients.
//!
//! The walk mirrors the forward pass exactly, layer by layer in reverse.
//! Layers that append the anchor layer's KV are deeper than the anchor
//! layer, so their gradient contributions to that KV are accumulated in a
//! pair of buffers and folded in once the reverse walk reaches it.

use rayon::prelude::*;

use crate::numerics::Matrix;
use crate::{Error, Result};

use super::forward::{
    forward, gained, gelu_prime, head_slice, rotate_rows, run_forward, Activations,
    ForwardOptions, NormActs,
};
use super::weights::ModelWeights;

/// Mean next-token cross-entropy over one sequence batch, without
/// gradients. Positions whose target is the anchor token are unsupervised.
pub fn batch_loss(w: &ModelWeights, batch: &[Vec<u32>]) -> Result<f64> {
    let total = total_targets(w, batch)?;
    let sums = batch
        .par_iter()
        .map(|tokens| {
            let trace = forward(w, tokens, &ForwardOptions::default())?;
            Ok(ce_sum(&trace.logits, tokens, w.config.anchor_token_id).0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / total as f64)
}

/// Loss and parameter gradients for a batch. Sequences run in parallel;
/// their per-sequence gradients are summed in batch order afterwards, so
/// the result does not depend on scheduling.
pub fn batch_loss_and_grads(
    w: &ModelWeights,
    batch: &[Vec<u32>],
) -> Result<(f64, ModelWeights)> {
    let total = total_targets(w, batch)?;
    let inv_total = 1.0 / total as f64;
    let parts = batch
        .par_iter()
        .map(|tokens| sequence_grads(w, tokens, inv_total))
        .collect::<Result<Vec<(f64, ModelWeights)>>>()?;
    let mut grads = w.zeros_like();
    let mut loss_sum = 0.0;
    for (s, g) in &parts {
        loss_sum += s;
        grads.add_assign_weights(g)?;
    }
    Ok((loss_sum * inv_total, grads))
}

pub fn loss_and_grads(w: &ModelWeights, tokens: &[u32]) -> Result<(f64, ModelWeights)> {
    batch_loss_and_grads(w, std::slice::from_ref(&tokens.to_vec()))
}

/// Indices whose next token is supervised.
pub(crate) fn target_positions(tokens: &[u32], anchor_id: u32) -> Vec<usize> {
    (0..tokens.len().saturating_sub(1))
        .filter(|&i| tokens[i + 1] != anchor_id)
        .collect()
}

fn total_targets(w: &ModelWeights, batch: &[Vec<u32>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let total: usize = batch
        .iter()
        .map(|t| target_positions(t, w.config.anchor_token_id).len())
        .sum();
    if total == 0 {
        return Err(Error::Input(
            "batch has no supervised targets; every next token is an anchor".into(),
        ));
    }
    Ok(total)
}

/// Summed cross-entropy over the supervised positions, plus their count.
pub(crate) fn ce_sum(logits: &Matrix, tokens: &[u32], anchor_id: u32) -> (f64, usize) {
    let targets = target_positions(tokens, anchor_id);
    let mut sum = 0.0;
    for &i in &targets {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        sum += lse - row[tokens[i + 1] as usize];
    }
    (sum, targets.len())
}

fn sequence_grads(
    w: &ModelWeights,
    tokens: &[u32],
    inv_total: f64,
) -> Result<(f64, ModelWeights)> {
    let acts = run_forward(w, tokens, &ForwardOptions::default())?;
    let cfg = &w.config;
    let n = acts.n;
    let d = cfg.d_model;
    let dk = cfg.head_dim();
    let heads = cfg.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grads = w.zeros_like();

    let mut d_logits = Matrix::zeros(n, cfg.vocab_size);
    let mut loss_sum = 0.0;
    for &i in &target_positions(tokens, cfg.anchor_token_id) {
        let row = acts.logits.row(i);
        let target = tokens[i + 1] as usize;
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - m).exp();
        }
        loss_sum += m + denom.ln() - row[target];
        let out = d_logits.row_mut(i);
        for (v, (&z, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            let p = (z - m).exp() / denom;
            *o = (p - if v == target { 1.0 } else { 0.0 }) * inv_total;
        }
    }

    grads
        .embedding
        .add_assign(&d_logits.transpose_matmul(&acts.final_hidden)?)?;
    let d_final = d_logits.matmul(&w.embedding)?;
    let d_xhat = gain_backward(&d_final, &acts.final_norm, &w.final_gain, &mut grads.final_gain);
    let mut dx = norm_backward(&d_xhat, &acts.final_norm);

    let anchor_layer = cfg.laa_anchor_layer;
    let mut d_anchor_k_rot = Matrix::zeros(n, d);
    let mut d_anchor_v = Matrix::zeros(n, d);

    for l in (0..cfg.n_layers).rev() {
        let a = &acts.layers[l];
        let lw = &w.layers[l];
        let lg = &mut grads.layers[l];

        let h2 = gained(&a.ln_mlp, &lw.ln_mlp_gain);
        lg.w_out.add_assign(&a.g.transpose_matmul(&dx)?)?;
        let mut du = dx.matmul_transpose_b(&lw.w_out)?;
        for (dv, &u) in du.data_mut().iter_mut().zip(a.u.data()) {
            *dv *= gelu_prime(u);
        }
        lg.w_in.add_assign(&h2.transpose_matmul(&du)?)?;
        let dh2 = du.matmul_transpose_b(&lw.w_in)?;
        let d_xhat2 = gain_backward(&dh2, &a.ln_mlp, &lw.ln_mlp_gain, &mut lg.ln_mlp_gain);
        dx.add_assign(&norm_backward(&d_xhat2, &a.ln_mlp))?;

        lg.w_o.add_assign(&a.context.transpose_matmul(&dx)?)?;
        let d_context = dx.matmul_transpose_b(&lw.w_o)?;

        let mut d_q_rot = Matrix::zeros(n, d);
        let mut d_k_rot = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        for hd in 0..heads {
            let d_out_h = head_slice(&d_context, hd, dk);
            let a_h = &a.weights[hd];
            let v_h = head_slice(&a.v, hd, dk);
            let q_h = head_slice(&a.q_rot, hd, dk);
            let k_h = head_slice(&a.k_rot, hd, dk);

            let mut d_a = Matrix::zeros(n, a_h.cols());
            set_col_block(&mut d_a, 0, &d_out_h.matmul_transpose_b(&v_h)?);
            if a.uses_anchor_kv {
                let al = &acts.layers[anchor_layer.expect("consumer without anchor layer")];
                let av_h = head_slice(&al.v, hd, dk);
                set_col_block(&mut d_a, n, &d_out_h.matmul_transpose_b(&av_h)?);
            }

            let mut d_s = softmax_rows_backward(a_h, &d_a);
            d_s.scale(scale);
            let d_s_layer = col_block(&d_s, 0, n);

            let mut d_q_h = d_s_layer.matmul(&k_h)?;
            let d_k_h = d_s_layer.transpose_matmul(&q_h)?;
            let d_v_h = col_block(a_h, 0, n).transpose_matmul(&d_out_h)?;
            if a.uses_anchor_kv {
                let al = &acts.layers[anchor_layer.expect("consumer without anchor layer")];
                let ak_h = head_slice(&al.k_rot, hd, dk);
                let d_s_anchor = col_block(&d_s, n, n);
                d_q_h.add_assign(&d_s_anchor.matmul(&ak_h)?)?;
                add_head_slice(&mut d_anchor_k_rot, hd, dk, &d_s_anchor.transpose_matmul(&q_h)?);
                add_head_slice(
                    &mut d_anchor_v,
                    hd,
                    dk,
                    &col_block(a_h, n, n).transpose_matmul(&d_out_h)?,
                );
            }
            add_head_slice(&mut d_q_rot, hd, dk, &d_q_h);
            add_head_slice(&mut d_k_rot, hd, dk, &d_k_h);
            add_head_slice(&mut d_v, hd, dk, &d_v_h);
        }

        if anchor_layer == Some(l) {
            d_k_rot.add_assign(&d_anchor_k_rot)?;
            d_v.add_assign(&d_anchor_v)?;
        }

        let d_q = rotate_rows(&d_q_rot, heads, dk, cfg.rope_base, |i, _| {
            -(acts.q_pos[i] as f64)
        });
        let d_k = rotate_rows(&d_k_rot, heads, dk, cfg.rope_base, |i, hd| {
            -(a.k_pos[hd * n + i] as f64)
        });

        let h1 = gained(&a.ln_attn, &lw.ln_attn_gain);
        lg.w_q.add_assign(&h1.transpose_matmul(&d_q)?)?;
        lg.w_k.add_assign(&h1.transpose_matmul(&d_k)?)?;
        lg.w_v.add_assign(&h1.transpose_matmul(&d_v)?)?;
        let mut dh1 = d_q.matmul_transpose_b(&lw.w_q)?;
        dh1.add_assign(&d_k.matmul_transpose_b(&lw.w_k)?)?;
        dh1.add_assign(&d_v.matmul_transpose_b(&lw.w_v)?)?;
        let d_xhat1 = gain_backward(&dh1, &a.ln_attn, &lw.ln_attn_gain, &mut lg.ln_attn_gain);
        dx.add_assign(&norm_backward(&d_xhat1, &a.ln_attn))?;
    }

    embed_backward(&mut grads.embedding, &acts, &dx);
    Ok((loss_sum, grads))
}

fn embed_backward(d_embedding: &mut Matrix, acts: &Activations, d_x0: &Matrix) {
    for (i, &t) in acts.tokens.iter().enumerate() {
        for (o, &g) in d_embedding
            .row_mut(t as usize)
            .iter_mut()
            .zip(d_x0.row(i))
        {
            *o += g;
        }
    }
}

/// `d(gain * normalized)` split: accumulates the gain gradient and returns
/// the gradient that continues into the normalized rows.
fn gain_backward(
    d_out: &Matrix,
    acts: &NormActs,
    gain: &Matrix,
    d_gain: &mut Matrix,
) -> Matrix {
    let mut d_xhat = Matrix::zeros(d_out.rows(), d_out.cols());
    for i in 0..d_out.rows() {
        let xh = acts.normalized.row(i);
        let dout = d_out.row(i);
        let dg = d_gain.row_mut(0);
        for j in 0..dout.len() {
            dg[j] += dout[j] * xh[j];
        }
        for (o, (&dv, &g)) in d_xhat.row_mut(i).iter_mut().zip(dout.iter().zip(gain.row(0))) {
            *o = dv * g;
        }
    }
    d_xhat
}

/// Backward through mean-centered normalization:
/// `dx = (d - mean(d) - xhat * mean(d * xhat)) / sigma`, row-wise.
fn norm_backward(d_xhat: &Matrix, acts: &NormActs) -> Matrix {
    let cols = d_xhat.cols() as f64;
    let mut out = Matrix::zeros(d_xhat.rows(), d_xhat.cols());
    for i in 0..d_xhat.rows() {
        let dxh = d_xhat.row(i);
        let xh = acts.normalized.row(i);
        let mean_d = dxh.iter().sum::<f64>() / cols;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<f64>() / cols;
        let s = acts.sigma[i];
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (dxh[j] - mean_d - xh[j] * mean_dx) / s;
        }
    }
    out
}

/// Row-wise softmax Jacobian product: `a * (da - sum(a * da))`.
fn softmax_rows_backward(a: &Matrix, d_a: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), d_a.rows());
    debug_assert_eq!(a.cols(), d_a.cols());
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let w = a.row(i);
        let dw = d_a.row(i);
        let inner: f64 = w.iter().zip(dw).map(|(&x, &y)| x * y).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = w[j] * (dw[j] - inner);
        }
    }
    out
}

fn col_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(m.rows(), len, |i, j| m.get(i, start + j))
}

fn set_col_block(dst: &mut Matrix, start: usize, src: &Matrix) {
    for i in 0..dst.rows() {
        dst.row_mut(i)[start..start + src.cols()].copy_from_slice(src.row(i));
    }
}

fn add_head_slice(dst: &mut Matrix, hd: usize, dk: usize, src: &Matrix) {
    for i in 0..dst.rows() {
        for (o, &v) in dst.row_mut(i)[hd * dk..(hd + 1) * dk].iter_mut().zip(src.row(i)) {
            *o += v;
        }
    }
}
