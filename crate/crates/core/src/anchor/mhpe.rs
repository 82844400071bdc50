//! Multi-head position encoding for anchors.
//!
//! An anchor stands in for a whole span of evicted tokens, so it cannot
//! carry a single rotary position honestly. Instead each attention head
//! rotates the anchor's key at a different position drawn from the span:
//! short spans are covered cyclically, long spans by even spacing across
//! the heads. Ordinary tokens carry their own index in every head.

use super::AnchoredSequence;
use crate::model::rope::rotate_pairs;
use crate::{Error, Result};

/// Per-token, per-head rotation positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MhpePositions {
    n: usize,
    n_heads: usize,
    pos: Vec<usize>,
}

impl MhpePositions {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Rotation positions of token `i`, one entry per head.
    pub fn head_positions(&self, i: usize) -> &[usize] {
        &self.pos[i * self.n_heads..(i + 1) * self.n_heads]
    }
}

/// Computes the per-head position of every token in an anchored sequence.
pub fn assign_mhpe_positions(seq: &AnchoredSequence, n_heads: usize) -> MhpePositions {
    assert!(n_heads > 0, "a model without heads has no positions to assign");
    let n = seq.tokens.len();
    let mut pos = vec![0usize; n * n_heads];
    for i in 0..n {
        for h in 0..n_heads {
            pos[i * n_heads + h] = i;
        }
    }
    for (&a, span) in seq.anchors.iter().zip(seq.spans.iter()) {
        let slots = &mut pos[a * n_heads..(a + 1) * n_heads];
        let m = span.len();
        let first = (span.start + 1) as usize;
        for (h, slot) in slots.iter_mut().enumerate() {
            *slot = anchor_head_position(first, m, a, n_heads, h);
        }
    }
    MhpePositions { n, n_heads, pos }
}

/// Rotation position of head `h` for an anchor at index `anchor` whose span
/// compressed `m` positions starting at `first`. An empty span keeps the
/// anchor's own index; short spans are walked cyclically; long spans are
/// sampled evenly with both endpoints included.
pub(crate) fn anchor_head_position(
    first: usize,
    m: usize,
    anchor: usize,
    n_heads: usize,
    h: usize,
) -> usize {
    if m == 0 {
        anchor
    } else if m <= n_heads {
        first + (h % m)
    } else if n_heads == 1 {
        first
    } else {
        let frac = h as f64 * (m - 1) as f64 / (n_heads - 1) as f64;
        (first as f64 + frac).round() as usize
    }
}

/// Rotates one token's per-head keys at the given per-head positions and
/// concatenates the result.
pub fn mhpe_rotate_keys(
    k_heads: &[Vec<f64>],
    positions: &[usize],
    base: f64,
) -> Result<Vec<f64>> {
    if k_heads.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} key heads but {} positions",
            k_heads.len(),
            positions.len()
        )));
    }
    let mut out = Vec::new();
    for (k, &p) in k_heads.iter().zip(positions.iter()) {
        if k.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "per-head key length {} is odd",
                k.len()
            )));
        }
        out.extend(rotate_pairs(k, p as f64, base));
    }
    Ok(out)
}
