//! Additive attention masks, including the anchor mask.
//!
//! Masks are dense matrices over {0, -1e9}; a masked score has -1e9 added
//! before the softmax, which underflows its weight to exactly zero. The
//! anchor mask extends the causal mask: once a line has completed (its
//! trailing anchor sits strictly below the query row), the line body
//! between consecutive anchors is hidden and only the anchors remain
//! visible. Tokens before the first anchor are never anchor-masked; that
//! first segment is where attention-sink tokens live.

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Additive penalty for masked positions.
pub const MASK_NEG: f64 = -1e9;

/// How to hide a completed segment between consecutive anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    /// Mask the open interval: both bounding anchors stay visible. The
    /// default; anything else would hide anchors that later tokens must be
    /// able to read.
    OpenInterval,
    /// Mask the half-open slice `[left, right)`, hiding the left anchor.
    /// Kept as a documented alternative reading of the construction; not
    /// used by the engine.
    LiteralSlice,
}

/// Square additive mask over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    bias: Matrix,
}

impl AttentionMask {
    /// Plain autoregressive mask: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> AttentionMask {
        let bias = Matrix::from_fn(n, n, |i, j| if j > i { MASK_NEG } else { 0.0 });
        AttentionMask { n, bias }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.bias.get(i, j)
    }

    #[inline]
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.bias.get(i, j) == 0.0
    }

    pub fn visible_cols(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_visible(i, j)).collect()
    }

    /// Intersection of two masks: visible only where both are visible.
    pub fn combined(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.n != other.n {
            return Err(Error::Shape(format!(
                "combining masks of size {} and {}",
                self.n, other.n
            )));
        }
        let bias = Matrix::from_fn(self.n, self.n, |i, j| {
            if self.is_visible(i, j) && other.is_visible(i, j) {
                0.0
            } else {
                MASK_NEG
            }
        });
        Ok(AttentionMask { n: self.n, bias })
    }

    /// Additionally hides column `j` from every row. Used to compare
    /// "masked out" against "physically removed" in tests.
    pub fn with_column_hidden(&self, j: usize) -> AttentionMask {
        let mut out = self.clone();
        for i in 0..self.n {
            out.bias.set(i, j, MASK_NEG);
        }
        out
    }

    /// Mask with row/column `j` deleted, for the removed-token side of the
    /// masking-equals-exclusion comparison.
    pub fn without_position(&self, j: usize) -> AttentionMask {
        let n = self.n - 1;
        let old = |x: usize| if x < j { x } else { x + 1 };
        let bias = Matrix::from_fn(n, n, |r, c| self.bias.get(old(r), old(c)));
        AttentionMask { n, bias }
    }

    /// Debug CSV: a `n,anchors` header with their values on the next line,
    /// then the visibility grid, one row per query, 1 = visible.
    pub fn to_visibility_csv(&self, anchors: &[usize]) -> String {
        let mut out = String::new();
        out.push_str("n,anchors\n");
        let joined = anchors
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!("{},{}\n", self.n, joined));
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n)
                .map(|j| if self.is_visible(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn validate_anchors(n: usize, anchors: &[usize]) -> Result<()> {
    for (idx, &a) in anchors.iter().enumerate() {
        if a >= n {
            return Err(Error::Input(format!(
                "anchor position {a} outside sequence of length {n}"
            )));
        }
        if idx > 0 && anchors[idx - 1] >= a {
            return Err(Error::Input(format!(
                "anchor positions must be strictly increasing, got {} then {a}",
                anchors[idx - 1]
            )));
        }
    }
    Ok(())
}

/// Anchor mask with the default open-interval hiding.
pub fn build_anchor_mask(n: usize, anchors: &[usize]) -> Result<AttentionMask> {
    build_anchor_mask_with(n, anchors, MaskVariant::OpenInterval)
}

/// Anchor mask with an explicit segment-hiding variant.
///
/// Row `i` starts from the causal mask; for every consecutive anchor pair
/// `(l, r)` with `r < i`, the segment between them is hidden per `variant`.
/// The completed-pair set only grows as `i` increases, so the row template
/// is extended incrementally.
pub fn build_anchor_mask_with(
    n: usize,
    anchors: &[usize],
    variant: MaskVariant,
) -> Result<AttentionMask> {
    validate_anchors(n, anchors)?;
    let mut bias = Matrix::zeros(n, n);
    let mut template = vec![0.0f64; n];
    let mut pair = 0usize;
    for i in 0..n {
        while pair + 1 < anchors.len() && anchors[pair + 1] < i {
            let (l, r) = (anchors[pair], anchors[pair + 1]);
            let from = match variant {
                MaskVariant::OpenInterval => l + 1,
                MaskVariant::LiteralSlice => l,
            };
            for t in template.iter_mut().take(r).skip(from) {
                *t = MASK_NEG;
            }
            pair += 1;
        }
        let row = bias.row_mut(i);
        row[..=i].copy_from_slice(&template[..=i]);
        for v in row.iter_mut().skip(i + 1) {
            *v = MASK_NEG;
        }
    }
    Ok(AttentionMask { n, bias })
}

/// Direct per-row transcription of the mask construction, kept slow and
/// obvious as the oracle for `build_anchor_mask_with`.
pub fn reference_anchor_mask(
    n: usize,
    anchors: &[usize],
    variant: MaskVariant,
) -> Result<AttentionMask> {
    validate_anchors(n, anchors)?;
    let mut bias = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            bias.set(i, j, MASK_NEG);
        }
        for w in anchors.windows(2) {
            let (l, r) = (w[0], w[1]);
            if r < i {
                let from = match variant {
                    MaskVariant::OpenInterval => l + 1,
                    MaskVariant::LiteralSlice => l,
                };
                for j in from..r {
                    bias.set(i, j, MASK_NEG);
                }
            } else {
                break;
            }
        }
    }
    Ok(AttentionMask { n, bias })
}

/// Point query used by the decode path: is column `j` hidden from row `i`
/// by the anchor rule (open-interval variant)? Causality is the caller's
/// concern.
pub(crate) fn anchor_masked(j: usize, i: usize, anchors: &[usize]) -> bool {
    let r = anchors.partition_point(|&a| a <= j);
    if r > 0 && anchors[r - 1] == j {
        return false; // j is itself an anchor
    }
    if r == 0 || r == anchors.len() {
        return false; // first segment or current segment
    }
    anchors[r] < i
}
