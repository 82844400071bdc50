//! Layer-wise anchor attention.
//!
//! A consuming layer appends a designated shallow layer's cached keys and
//! values behind its own: scores are taken against `[K | K']`, one softmax
//! runs across both halves, and the output mixes `[V | V']`. Column `j` of
//! the second half refers to the same sequence position as column `j` of
//! the first, so the current row's mask applies to both halves unchanged.

use super::mask::AttentionMask;
use crate::numerics::{dot, softmax_in_place, Matrix};
use crate::{Error, Result};

/// Output of [`laa_attend`]: the mixed rows and the post-softmax weights
/// over the concatenated key set (`n` columns without anchor KV, `2n` with).
#[derive(Debug, Clone)]
pub struct LaaAttention {
    pub output: Matrix,
    pub weights: Matrix,
}

/// Scaled masked attention with an optional appended anchor-layer KV block.
///
/// `q`, `k` are pre-rotated per-head projections (`n x d_k`), `v` is
/// `n x d_v`. With `anchor_kv` present, its two matrices must mirror `k`
/// and `v` row for row. Passing `None` is exactly the standard attention
/// path; the two cases share every instruction up to the optional second
/// block, so the reduction is bit-compatible.
pub fn laa_attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    anchor_kv: Option<(&Matrix, &Matrix)>,
    mask: &AttentionMask,
) -> Result<LaaAttention> {
    let (output, weights) = attend_core(q, k, v, anchor_kv, mask)?;
    Ok(LaaAttention { output, weights })
}

/// Shared attention kernel for the public op and the model forward pass.
pub(crate) fn attend_core(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    extra: Option<(&Matrix, &Matrix)>,
    mask: &AttentionMask,
) -> Result<(Matrix, Matrix)> {
    let n = k.rows();
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if v.rows() != n {
        return Err(Error::Shape(format!(
            "{} keys but {} value rows",
            n,
            v.rows()
        )));
    }
    if mask.n() != n || q.rows() != n {
        return Err(Error::Shape(format!(
            "self-attention over {} positions with {} queries and mask of {}",
            n,
            q.rows(),
            mask.n()
        )));
    }
    if let Some((ak, av)) = extra {
        if ak.rows() != n || av.rows() != n {
            return Err(Error::Shape(format!(
                "anchor KV rows {}x{} do not mirror the {} cached positions",
                ak.rows(),
                av.rows(),
                n
            )));
        }
        if ak.cols() != k.cols() || av.cols() != v.cols() {
            return Err(Error::Shape(
                "anchor KV widths do not match the layer's KV".into(),
            ));
        }
    }

    let width = if extra.is_some() { 2 * n } else { n };
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = Matrix::zeros(q.rows(), width);
    let mut output = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let q_row = q.row(i);
        let w_row = weights.row_mut(i);
        for j in 0..n {
            w_row[j] = dot(q_row, k.row(j)) * scale + mask.get(i, j);
        }
        if let Some((ak, _)) = extra {
            for j in 0..n {
                w_row[n + j] = dot(q_row, ak.row(j)) * scale + mask.get(i, j);
            }
        }
        softmax_in_place(w_row);
        let out_row = output.row_mut(i);
        for j in 0..n {
            let w = w_row[j];
            if w != 0.0 {
                for (o, &x) in out_row.iter_mut().zip(v.row(j).iter()) {
                    *o += w * x;
                }
            }
        }
        if let Some((_, av)) = extra {
            for j in 0..n {
                let w = w_row[n + j];
                if w != 0.0 {
                    for (o, &x) in out_row.iter_mut().zip(av.row(j).iter()) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    Ok((output, weights))
}
