//! Anchor planting and the anchor attention machinery.
//!
//! An anchor is a reserved token inserted after every linebreak. Deeper
//! attention layers are then restricted so that completed lines are visible
//! only through their anchors: the anchor aggregates its line, and the line
//! body is dropped from the KV cache once the anchor's KV exists.

mod laa;
mod mask;
mod mhpe;

pub use laa::{laa_attend, LaaAttention};
pub use mask::{
    build_anchor_mask, build_anchor_mask_with, reference_anchor_mask, AttentionMask, MaskVariant,
    MASK_NEG,
};
pub(crate) use laa::attend_core;
pub(crate) use mask::anchor_masked;
pub(crate) use mhpe::anchor_head_position;
pub use mhpe::{assign_mhpe_positions, mhpe_rotate_keys, MhpePositions};

use crate::{Error, Result};

/// Half-open record of the tokens an anchor compresses: the positions
/// strictly between `start` and `end`. `start` is the previous anchor
/// position, or -1 when there is none; `end` is the anchor itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorSpan {
    pub start: isize,
    pub end: usize,
}

impl AnchorSpan {
    /// Number of compressed positions.
    pub fn len(&self) -> usize {
        (self.end as isize - self.start - 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A token sequence with its anchor bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredSequence {
    pub tokens: Vec<u32>,
    /// Anchor positions, strictly increasing.
    pub anchors: Vec<usize>,
    /// One span per anchor, `spans[j].end == anchors[j]`.
    pub spans: Vec<AnchorSpan>,
}

impl AnchoredSequence {
    /// Rebuilds the bookkeeping from a sequence that already contains
    /// anchor tokens.
    pub fn scan(tokens: &[u32], anchor_id: u32) -> AnchoredSequence {
        let mut anchors = Vec::new();
        let mut spans = Vec::new();
        let mut prev: isize = -1;
        for (i, &t) in tokens.iter().enumerate() {
            if t == anchor_id {
                anchors.push(i);
                spans.push(AnchorSpan { start: prev, end: i });
                prev = i as isize;
            }
        }
        AnchoredSequence { tokens: tokens.to_vec(), anchors, spans }
    }
}

/// Inserts an anchor token after every linebreak.
///
/// The input must not already contain `anchor_id`; planting twice (or
/// planting over a sequence that uses the reserved id for real content) is
/// rejected rather than silently doubling anchors.
pub fn plant_anchors(
    tokens: &[u32],
    linebreak_id: u32,
    anchor_id: u32,
) -> Result<AnchoredSequence> {
    if let Some(at) = tokens.iter().position(|&t| t == anchor_id) {
        return Err(Error::Input(format!(
            "sequence already contains the anchor token {anchor_id} at position {at}"
        )));
    }
    let mut out = Vec::with_capacity(tokens.len() + tokens.len() / 4);
    let mut anchors = Vec::new();
    let mut spans = Vec::new();
    let mut prev: isize = -1;
    for &t in tokens {
        out.push(t);
        if t == linebreak_id {
            let pos = out.len();
            out.push(anchor_id);
            anchors.push(pos);
            spans.push(AnchorSpan { start: prev, end: pos });
            prev = pos as isize;
        }
    }
    Ok(AnchoredSequence { tokens: out, anchors, spans })
}

/// Removes anchor tokens, recovering the raw sequence.
pub fn strip_anchors(tokens: &[u32], anchor_id: u32) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != anchor_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LB: u32 = 10;
    const ANC: u32 = 0;

    #[test]
    fn plants_after_every_linebreak() {
        // "ab\ncd"
        let tokens = [97, 98, LB, 99, 100];
        let seq = plant_anchors(&tokens, LB, ANC).unwrap();
        assert_eq!(seq.tokens, vec![97, 98, LB, ANC, 99, 100]);
        assert_eq!(seq.anchors, vec![3]);
        assert_eq!(seq.spans, vec![AnchorSpan { start: -1, end: 3 }]);
    }

    #[test]
    fn consecutive_linebreaks_get_consecutive_spans() {
        let tokens = [LB, LB];
        let seq = plant_anchors(&tokens, LB, ANC).unwrap();
        assert_eq!(seq.tokens, vec![LB, ANC, LB, ANC]);
        assert_eq!(seq.anchors, vec![1, 3]);
        assert_eq!(
            seq.spans,
            vec![AnchorSpan { start: -1, end: 1 }, AnchorSpan { start: 1, end: 3 }]
        );
        assert_eq!(seq.spans[0].len(), 1);
        assert_eq!(seq.spans[1].len(), 1);
    }

    #[test]
    fn no_linebreaks_means_no_anchors() {
        let tokens = [1, 2, 3];
        let seq = plant_anchors(&tokens, LB, ANC).unwrap();
        assert_eq!(seq.tokens, vec![1, 2, 3]);
        assert!(seq.anchors.is_empty());
    }

    #[test]
    fn replanting_is_rejected() {
        let seq = plant_anchors(&[97, LB, 98], LB, ANC).unwrap();
        let err = plant_anchors(&seq.tokens, LB, ANC).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn scan_matches_plant() {
        let tokens = [97, LB, 98, 99, LB, 100];
        let planted = plant_anchors(&tokens, LB, ANC).unwrap();
        let scanned = AnchoredSequence::scan(&planted.tokens, ANC);
        assert_eq!(planted, scanned);
    }

    #[test]
    fn strip_inverts_plant() {
        let tokens = [97, LB, 98, 99, LB, 100];
        let planted = plant_anchors(&tokens, LB, ANC).unwrap();
        assert_eq!(strip_anchors(&planted.tokens, ANC), tokens.to_vec());
    }
}
