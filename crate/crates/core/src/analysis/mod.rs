//! Attention analytics: concentration statistics, max-attention targets,
//! weight-matrix eigenstructure, and heatmap export.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::{AttentionTrace, ModelWeights};
use crate::numerics::{symmetric_eigenvalues, Matrix};
use crate::{Error, Result};

/// Gini coefficient of a non-negative distribution, 0 for uniform mass and
/// `(n-1)/n` for a single spike. Evaluates the exact pairwise sum up to 512
/// entries and the sorted identity beyond that; both routes stay public so
/// they can check each other.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.len() <= 512 {
        gini_pairwise(values)
    } else {
        gini_sorted(values)
    }
}

/// The textbook mean-absolute-difference form, `G = ΣᵢΣⱼ|wᵢ-wⱼ| / (2n²w̄)`,
/// in `O(n^2)`.
pub fn gini_pairwise(values: &[f64]) -> Result<f64> {
    let (n, sum) = check_distribution(values)?;
    let mut acc = 0.0;
    for &a in values {
        for &b in values {
            acc += (a - b).abs();
        }
    }
    Ok(acc / (2.0 * n * sum))
}

/// The `O(n log n)` identity on the ascending order statistics:
/// `G = 2·Σᵢ i·w₍ᵢ₎ / (n·Σw) − (n+1)/n`.
pub fn gini_sorted(values: &[f64]) -> Result<f64> {
    let (n, sum) = check_distribution(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1) as f64 * v)
        .sum();
    Ok(2.0 * weighted / (n * sum) - (n + 1.0) / n)
}

fn check_distribution(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("empty distribution".into()));
    }
    if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Input(
            "distribution entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Input("distribution has no mass".into()));
    }
    Ok((values.len() as f64, sum))
}

/// Sum of the two largest entries.
pub fn top2_sum(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Input(format!(
            "top-2 sum needs at least two entries, got {}",
            values.len()
        )));
    }
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first + second)
}

/// One head's post-softmax attention, `n x n`, with anchor-KV columns
/// folded onto the positions they mirror.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub weights: Matrix,
}

/// Folds a captured trace into per-position records: a `n x 2n` matrix from
/// an anchor-KV layer becomes `n x n` by adding column `n + j` onto `j`.
pub fn fold_attention(trace: &AttentionTrace) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for (layer, heads) in trace.layers.iter().enumerate() {
        for (head, m) in heads.iter().enumerate() {
            let n = m.rows();
            let weights = if m.cols() == 2 * n {
                Matrix::from_fn(n, n, |i, j| m.get(i, j) + m.get(i, n + j))
            } else {
                m.clone()
            };
            out.push(AttentionRecord { layer, head, weights });
        }
    }
    out
}

/// Where each query row's strongest attention lands, aggregated by token
/// class.
#[derive(Debug, Clone, Serialize)]
pub struct MaxAttentionDistribution {
    pub rows: usize,
    pub counts: BTreeMap<String, usize>,
    pub ratios: BTreeMap<String, f64>,
}

/// The default two-class map: the given token id is "linebreak", everything
/// else is "other".
pub fn linebreak_classes(linebreak_id: u32) -> impl Fn(u32) -> String {
    move |t| {
        if t == linebreak_id {
            "linebreak".to_string()
        } else {
            "other".to_string()
        }
    }
}

/// Scans every folded head and query row for the argmax position (ties go
/// to the earliest position) and classifies the token sitting there.
/// Columns before `exclude_sinks` are skipped; rows left without any
/// positive-weight candidate are not counted.
pub fn attention_max_distribution(
    records: &[AttentionRecord],
    tokens: &[u32],
    exclude_sinks: usize,
    class_of: impl Fn(u32) -> String,
) -> Result<MaxAttentionDistribution> {
    if records.is_empty() {
        return Err(Error::Input("no attention records".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let m = &r.weights;
        if m.rows() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} attention rows for {} tokens",
                m.rows(),
                tokens.len()
            )));
        }
        for i in 0..m.rows() {
            let mut best: Option<(usize, f64)> = None;
            for j in exclude_sinks..=i {
                let w = m.get(i, j);
                if w > 0.0 && best.map_or(true, |(_, bw)| w > bw) {
                    best = Some((j, w));
                }
            }
            if let Some((j, _)) = best {
                *counts.entry(class_of(tokens[j])).or_insert(0) += 1;
            }
        }
    }
    let rows: usize = counts.values().sum();
    let ratios = counts
        .iter()
        .map(|(k, &v)| {
            let r = if rows == 0 { 0.0 } else { v as f64 / rows as f64 };
            (k.clone(), r)
        })
        .collect();
    Ok(MaxAttentionDistribution { rows, counts, ratios })
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub gini: f64,
    pub top2: f64,
}

/// Attention concentration per layer plus the class distribution of
/// attention maxima. Gini and top-2 are means over heads and query rows;
/// row `i`'s distribution is its weights over positions `0..=i`, and row 0
/// is skipped because a single-position distribution carries no
/// concentration signal.
#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub n: usize,
    pub note: String,
    pub per_layer: Vec<LayerSparsity>,
    pub max_attention: MaxAttentionDistribution,
}

const SPARSITY_NOTE: &str = "per-layer values are means over heads and query rows 1..n; \
                             row i spans positions 0..=i";

pub fn sparsity_report(
    trace: &AttentionTrace,
    tokens: &[u32],
    linebreak_id: u32,
    exclude_sinks: usize,
) -> Result<SparsityReport> {
    let records = fold_attention(trace);
    if records.is_empty() {
        return Err(Error::Input("trace holds no attention".into()));
    }
    let n = records[0].weights.rows();
    if n < 2 {
        return Err(Error::Input(
            "sparsity statistics need at least two positions".into(),
        ));
    }
    let n_layers = trace.layers.len();
    let mut per_layer = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut g_sum = 0.0;
        let mut t_sum = 0.0;
        let mut rows = 0usize;
        for r in records.iter().filter(|r| r.layer == layer) {
            for i in 1..n {
                let row = &r.weights.row(i)[..=i];
                g_sum += gini(row)?;
                t_sum += top2_sum(row)?;
                rows += 1;
            }
        }
        per_layer.push(LayerSparsity {
            layer,
            gini: g_sum / rows as f64,
            top2: t_sum / rows as f64,
        });
    }
    let max_attention = attention_max_distribution(
        &records,
        tokens,
        exclude_sinks,
        linebreak_classes(linebreak_id),
    )?;
    Ok(SparsityReport {
        n,
        note: SPARSITY_NOTE.into(),
        per_layer,
        max_attention,
    })
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.note);
        out.push_str("layer,gini,top2\n");
        for l in &self.per_layer {
            out.push_str(&format!("{},{:.6},{:.6}\n", l.layer, l.gini, l.top2));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadEigen {
    pub layer: usize,
    pub head: usize,
    pub eigenvalues: Vec<f64>,
    pub negative: usize,
    pub positive: usize,
    pub zero: usize,
    pub negative_fraction: f64,
}

/// Eigenvalue signs of each head's value-output product.
#[derive(Debug, Clone, Serialize)]
pub struct WovReport {
    pub per_head: Vec<HeadEigen>,
    pub mean_negative_fraction: f64,
}

/// For every head, forms `W_V^h @ W_O^h` (the `d x d` map the head applies
/// to the residual stream), symmetrizes it, and lists the eigenvalue
/// spectrum. The negative fraction is taken over nonzero eigenvalues; the
/// product has rank at most `d_k`, so at least `d - d_k` of them are
/// structurally zero.
pub fn wov_eigen_report(w: &ModelWeights) -> Result<WovReport> {
    let d = w.config.d_model;
    let dk = w.config.head_dim();
    let mut per_head = Vec::new();
    for (layer, lw) in w.layers.iter().enumerate() {
        for head in 0..w.config.n_heads {
            let wv = Matrix::from_fn(d, dk, |i, j| lw.w_v.get(i, head * dk + j));
            let wo = Matrix::from_fn(dk, d, |i, j| lw.w_o.get(head * dk + i, j));
            let prod = wv.matmul(&wo)?;
            let sym = Matrix::from_fn(d, d, |i, j| 0.5 * (prod.get(i, j) + prod.get(j, i)));
            let eigenvalues = symmetric_eigenvalues(&sym)?;
            let scale = eigenvalues
                .iter()
                .fold(0.0f64, |a, &v| a.max(v.abs()))
                .max(1.0);
            let tol = 1e-9 * scale;
            let negative = eigenvalues.iter().filter(|&&v| v < -tol).count();
            let positive = eigenvalues.iter().filter(|&&v| v > tol).count();
            let zero = eigenvalues.len() - negative - positive;
            let nonzero = negative + positive;
            per_head.push(HeadEigen {
                layer,
                head,
                eigenvalues,
                negative,
                positive,
                zero,
                negative_fraction: if nonzero == 0 {
                    0.0
                } else {
                    negative as f64 / nonzero as f64
                },
            });
        }
    }
    if per_head.is_empty() {
        return Err(Error::Input("model has no attention heads".into()));
    }
    let mean = per_head.iter().map(|h| h.negative_fraction).sum::<f64>() / per_head.len() as f64;
    Ok(WovReport {
        per_head,
        mean_negative_fraction: mean,
    })
}

impl WovReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,negative,positive,zero,negative_fraction\n");
        for h in &self.per_head {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                h.layer, h.head, h.negative, h.positive, h.zero, h.negative_fraction
            ));
        }
        out
    }

    /// Full spectrum dump, one eigenvalue per row.
    pub fn eigenvalues_csv(&self) -> String {
        let mut out = String::from("layer,head,index,eigenvalue\n");
        for h in &self.per_head {
            for (i, v) in h.eigenvalues.iter().enumerate() {
                out.push_str(&format!("{},{},{},{v:.12e}\n", h.layer, h.head, i));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Head selector for heatmap export: a single head or the mean over a
/// layer's heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    Head(usize),
    Mean,
}

/// Lower-triangular CSV of one layer's folded attention. Cell `(i, j)` is
/// the weight row `i` puts on position `j`; cells above the diagonal and
/// cells with zero weight (masked or underflowed) are left empty.
pub fn export_heatmap(
    records: &[AttentionRecord],
    layer: usize,
    head: HeadSelection,
    labels: &[String],
) -> Result<String> {
    let in_layer: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == layer).collect();
    if in_layer.is_empty() {
        return Err(Error::Input(format!("no attention captured for layer {layer}")));
    }
    let weights = match head {
        HeadSelection::Head(h) => in_layer
            .iter()
            .find(|r| r.head == h)
            .map(|r| r.weights.clone())
            .ok_or_else(|| Error::Input(format!("layer {layer} has no head {h}")))?,
        HeadSelection::Mean => {
            let n = in_layer[0].weights.rows();
            let scale = 1.0 / in_layer.len() as f64;
            Matrix::from_fn(n, n, |i, j| {
                in_layer.iter().map(|r| r.weights.get(i, j)).sum::<f64>() * scale
            })
        }
    };
    let n = weights.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} positions",
            labels.len()
        )));
    }
    let mut out = String::from("query");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&labels[i]);
        for j in 0..n {
            out.push(',');
            if j <= i {
                let w = weights.get(i, j);
                if w != 0.0 {
                    out.push_str(&format!("{w:.9}"));
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}
