//! KV-cache retention policies.
//!
//! A policy answers one question per decode step: which previously seen
//! positions must still be resident to compute this step? Eviction in the
//! engine is logical (hidden positions are skipped, their buffers kept), so
//! the retained-set sizes reported here are the memory story, independent
//! of whether a physical compaction has happened.

mod budget;

pub use budget::{
    budget_of, estimate_cache_bytes, ratio_gb_per_token, BudgetReport, CacheGeometry,
};

use crate::{Error, Result};

/// Retention rule, with per-kind parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    /// Keep everything.
    Dense,
    /// Keep the last `window` positions.
    Window { window: usize },
    /// Keep the first `sinks` positions plus the last `window`.
    Streaming { sinks: usize, window: usize },
    /// Keep a recent window plus the positions with the highest accumulated
    /// attention, `ceil(budget_fraction * step)` positions in total. Needs
    /// the previous step's attention row as feedback.
    HeavyHitter { budget_fraction: f64 },
    /// Keep sink positions, every anchor, and the current line. Plants an
    /// anchor token after each generated linebreak; a completed line is
    /// dropped once its anchor's KV exists.
    Anchor { sinks: usize, linebreak_id: u32 },
}

/// Default sink count for the anchor policy.
pub const DEFAULT_ANCHOR_SINKS: usize = 4;
/// Default linebreak token for byte-mapped text.
pub const DEFAULT_LINEBREAK_ID: u32 = 10;

impl PolicyKind {
    /// Parses the CLI grammar:
    /// `dense | window:w | streaming:s,w | h2o:f | anchor`.
    pub fn parse(s: &str) -> Result<PolicyKind> {
        let bad = |msg: String| Err(Error::Input(msg));
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, args) {
            ("dense", None) => Ok(PolicyKind::Dense),
            ("anchor", None) => Ok(PolicyKind::Anchor {
                sinks: DEFAULT_ANCHOR_SINKS,
                linebreak_id: DEFAULT_LINEBREAK_ID,
            }),
            ("window", Some(a)) => {
                let window: usize = a
                    .parse()
                    .map_err(|_| Error::Input(format!("bad window size {a:?}")))?;
                if window == 0 {
                    return bad("window size must be positive".into());
                }
                Ok(PolicyKind::Window { window })
            }
            ("streaming", Some(a)) => {
                let (s1, s2) = a
                    .split_once(',')
                    .ok_or_else(|| Error::Input(format!("streaming needs sinks,window, got {a:?}")))?;
                let sinks: usize = s1
                    .parse()
                    .map_err(|_| Error::Input(format!("bad sink count {s1:?}")))?;
                let window: usize = s2
                    .parse()
                    .map_err(|_| Error::Input(format!("bad window size {s2:?}")))?;
                if window == 0 {
                    return bad("streaming window must be positive".into());
                }
                Ok(PolicyKind::Streaming { sinks, window })
            }
            ("h2o", Some(a)) => {
                let f: f64 = a
                    .parse()
                    .map_err(|_| Error::Input(format!("bad budget fraction {a:?}")))?;
                if !(f > 0.0 && f <= 1.0) {
                    return bad(format!("budget fraction must be in (0, 1], got {f}"));
                }
                Ok(PolicyKind::HeavyHitter { budget_fraction: f })
            }
            _ => bad(format!(
                "unknown policy {s:?}; expected dense, window:w, streaming:s,w, h2o:f or anchor"
            )),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyKind::Dense => write!(f, "dense"),
            PolicyKind::Window { window } => write!(f, "window:{window}"),
            PolicyKind::Streaming { sinks, window } => write!(f, "streaming:{sinks},{window}"),
            PolicyKind::HeavyHitter { budget_fraction } => write!(f, "h2o:{budget_fraction}"),
            PolicyKind::Anchor { .. } => write!(f, "anchor"),
        }
    }
}

/// Stateful policy instance driving one generation or evaluation pass.
#[derive(Debug, Clone)]
pub struct KVCachePolicy {
    kind: PolicyKind,
    seen: usize,
    anchors: Vec<usize>,
    accumulated: Vec<f64>,
}

impl KVCachePolicy {
    pub fn new(kind: PolicyKind) -> KVCachePolicy {
        KVCachePolicy { kind, seen: 0, anchors: Vec::new(), accumulated: Vec::new() }
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    /// Whether this policy manages anchor tokens (plants them during decode,
    /// expects them planted in prompts).
    pub fn plants_anchors(&self) -> bool {
        matches!(self.kind, PolicyKind::Anchor { .. })
    }

    /// True when a just-emitted token should be followed by a mechanically
    /// inserted anchor.
    pub fn wants_anchor_after(&self, token: u32) -> bool {
        matches!(self.kind, PolicyKind::Anchor { linebreak_id, .. } if token == linebreak_id)
    }

    /// Records the token at `pos`. Positions must be fed in order.
    pub fn observe_token(&mut self, pos: usize, token: u32, anchor_id: u32) {
        debug_assert_eq!(pos, self.seen, "positions must be observed in order");
        if self.plants_anchors() && token == anchor_id {
            self.anchors.push(pos);
        }
        self.seen = self.seen.max(pos + 1);
    }

    /// Retained positions for `step`, sorted ascending. The set always
    /// contains `step` itself and only positions `<= step`.
    ///
    /// The heavy-hitter policy folds `attention_feedback` (the previous
    /// step's attention mass per position) into its running scores and
    /// fails with a protocol error when the feedback is missing past step 0.
    /// The anchor policy requires the token stream to have been observed
    /// through `step`.
    pub fn visible(
        &mut self,
        step: usize,
        attention_feedback: Option<&[f64]>,
    ) -> Result<Vec<usize>> {
        match self.kind {
            PolicyKind::Dense => Ok((0..=step).collect()),
            PolicyKind::Window { window } => {
                let from = (step + 1).saturating_sub(window);
                Ok((from..=step).collect())
            }
            PolicyKind::Streaming { sinks, window } => {
                let from = (step + 1).saturating_sub(window);
                let mut out: Vec<usize> = (0..sinks.min(from)).collect();
                out.extend(from..=step);
                Ok(out)
            }
            PolicyKind::HeavyHitter { budget_fraction } => {
                if let Some(row) = attention_feedback {
                    if self.accumulated.len() < row.len() {
                        self.accumulated.resize(row.len(), 0.0);
                    }
                    for (acc, &w) in self.accumulated.iter_mut().zip(row.iter()) {
                        *acc += w;
                    }
                } else if step > 0 {
                    return Err(Error::Protocol(
                        "heavy-hitter policy needs attention feedback from the previous step"
                            .into(),
                    ));
                }
                let budget = ((budget_fraction * step as f64).ceil() as usize).max(1);
                let recent = budget.div_ceil(2).min(step + 1);
                let from = step + 1 - recent;
                let mut keep: Vec<usize> = (from..=step).collect();
                let slots = budget - keep.len();
                if slots > 0 && from > 0 {
                    let mut older: Vec<usize> = (0..from).collect();
                    older.sort_by(|&a, &b| {
                        let sa = self.accumulated.get(a).copied().unwrap_or(0.0);
                        let sb = self.accumulated.get(b).copied().unwrap_or(0.0);
                        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
                    });
                    older.truncate(slots);
                    keep.extend(older);
                }
                keep.sort_unstable();
                Ok(keep)
            }
            PolicyKind::Anchor { sinks, .. } => {
                if step >= self.seen {
                    return Err(Error::Protocol(format!(
                        "anchor policy asked for step {step} but has only observed {} tokens",
                        self.seen
                    )));
                }
                let mut keep: Vec<usize> = (0..sinks.min(step + 1)).collect();
                let upto = self.anchors.partition_point(|&a| a <= step);
                keep.extend(&self.anchors[..upto]);
                let is_anchor = upto > 0 && self.anchors[upto - 1] == step;
                if is_anchor {
                    // The anchor's own step still sees the line it compresses.
                    let start = if upto >= 2 { self.anchors[upto - 2] + 1 } else { 0 };
                    keep.extend(start..step);
                    keep.push(step);
                } else {
                    let seg_start = if upto > 0 { self.anchors[upto - 1] + 1 } else { 0 };
                    keep.extend(seg_start..=step);
                }
                keep.sort_unstable();
                keep.dedup();
                Ok(keep)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ANC: u32 = 0;
    const LB: u32 = 10;

    fn observe_all(policy: &mut KVCachePolicy, tokens: &[u32]) {
        for (i, &t) in tokens.iter().enumerate() {
            policy.observe_token(i, t, ANC);
        }
    }

    #[test]
    fn dense_keeps_everything() {
        let mut p = KVCachePolicy::new(PolicyKind::Dense);
        assert_eq!(p.visible(10, None).unwrap(), (0..=10).collect::<Vec<_>>());
    }

    #[test]
    fn streaming_keeps_sinks_plus_recent_window() {
        let mut p = KVCachePolicy::new(PolicyKind::Streaming { sinks: 4, window: 8 });
        let mut expect: Vec<usize> = vec![0, 1, 2, 3];
        expect.extend(93..=100);
        assert_eq!(p.visible(100, None).unwrap(), expect);
    }

    #[test]
    fn streaming_early_steps_do_not_duplicate() {
        let mut p = KVCachePolicy::new(PolicyKind::Streaming { sinks: 4, window: 8 });
        assert_eq!(p.visible(5, None).unwrap(), (0..=5).collect::<Vec<_>>());
    }

    #[test]
    fn window_size_is_exactly_min_of_step_and_window() {
        let mut p = KVCachePolicy::new(PolicyKind::Window { window: 16 });
        for step in 0..200 {
            let vis = p.visible(step, None).unwrap();
            assert_eq!(vis.len(), (step + 1).min(16));
            assert_eq!(*vis.last().unwrap(), step);
        }
    }

    #[test]
    fn heavy_hitter_demands_feedback() {
        let mut p = KVCachePolicy::new(PolicyKind::HeavyHitter { budget_fraction: 0.5 });
        assert!(p.visible(0, None).is_ok());
        let err = p.visible(1, None).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn heavy_hitter_keeps_hot_positions() {
        let mut p = KVCachePolicy::new(PolicyKind::HeavyHitter { budget_fraction: 0.25 });
        // Position 2 gets all the attention mass.
        for step in 1..40 {
            let mut row = vec![0.01; step];
            if step > 2 {
                row[2] = 3.0;
            }
            let vis = p.visible(step, Some(&row)).unwrap();
            let budget = ((0.25 * step as f64).ceil() as usize).max(1);
            assert!(vis.len() <= budget, "step {step}: {} > {budget}", vis.len());
            assert!(vis.contains(&step));
            if step > 16 {
                assert!(vis.contains(&2), "hot position dropped at step {step}");
            }
        }
    }

    #[test]
    fn anchor_policy_walkthrough() {
        // "ab\n<A>cd\n<A>e" with zero sinks.
        let tokens = [97, 98, LB, ANC, 99, 100, LB, ANC, 101];
        let mut p = KVCachePolicy::new(PolicyKind::Anchor { sinks: 0, linebreak_id: LB });
        observe_all(&mut p, &tokens);
        assert_eq!(p.visible(8, None).unwrap(), vec![3, 7, 8]);
        // The anchor's own step still sees its whole line.
        assert_eq!(p.visible(7, None).unwrap(), vec![3, 4, 5, 6, 7]);
        // Mid-line: prior line is gone, anchor and current segment remain.
        assert_eq!(p.visible(5, None).unwrap(), vec![3, 4, 5]);
    }

    #[test]
    fn anchor_policy_cache_after_line_is_sinks_plus_anchors_plus_current() {
        let tokens = [97, 98, LB, ANC, 99, 100, LB, ANC, 101];
        let mut p = KVCachePolicy::new(PolicyKind::Anchor { sinks: 2, linebreak_id: LB });
        observe_all(&mut p, &tokens);
        // Right after the second line's anchor, the next step retains the
        // two sinks, both anchors, and itself.
        assert_eq!(p.visible(8, None).unwrap(), vec![0, 1, 3, 7, 8]);
    }

    #[test]
    fn anchor_policy_requires_observation() {
        let mut p = KVCachePolicy::new(PolicyKind::Anchor { sinks: 0, linebreak_id: LB });
        assert!(matches!(p.visible(3, None), Err(Error::Protocol(_))));
    }

    #[test]
    fn parse_round_trips() {
        for s in ["dense", "window:8", "streaming:4,8", "h2o:0.2", "anchor"] {
            let kind = PolicyKind::parse(s).unwrap();
            assert_eq!(kind.to_string(), s);
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        for s in ["", "window", "window:0", "window:x", "streaming:4", "h2o:1.5", "h2o:0", "dense:1", "lru:4"] {
            assert!(PolicyKind::parse(s).is_err(), "accepted {s:?}");
        }
    }

    proptest! {
        #[test]
        fn retained_sets_are_valid(
            step in 0usize..300,
            window in 1usize..64,
            sinks in 0usize..8,
        ) {
            let kinds = vec![
                PolicyKind::Dense,
                PolicyKind::Window { window },
                PolicyKind::Streaming { sinks, window },
            ];
            for kind in kinds {
                let mut p = KVCachePolicy::new(kind);
                let vis = p.visible(step, None).unwrap();
                prop_assert!(vis.contains(&step));
                prop_assert!(vis.iter().all(|&j| j <= step));
                prop_assert!(vis.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
