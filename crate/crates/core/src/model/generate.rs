//! Incremental decoding under a KV retention policy.
//!
//! The decoder recomputes exactly what the full forward pass would: per
//! step it reads only the positions the policy retains (minus anchor-masked
//! ones in anchor-attention layers), and every reduction runs in the same
//! ascending order as the matrix kernels. Under the dense policy the
//! emitted logits are bit-identical to the full forward pass.

use std::time::Instant;

use crate::anchor::{anchor_head_position, anchor_masked, plant_anchors, strip_anchors};
use crate::cache::{KVCachePolicy, PolicyKind};
use crate::model::rope::rotate_pairs;
use crate::numerics::{dot, row_matmul, softmax_in_place};
use crate::{Error, Result};

use super::forward::{gelu, norm_row};
use super::weights::ModelWeights;

pub struct Decoder<'a> {
    w: &'a ModelWeights,
    policy: KVCachePolicy,
    tokens: Vec<u32>,
    anchors: Vec<usize>,
    consumers: Vec<usize>,
    k_cache: Vec<Vec<Vec<f64>>>,
    v_cache: Vec<Vec<Vec<f64>>>,
    last_attention: Option<Vec<f64>>,
    mass_total: Vec<f64>,
    retained: Vec<usize>,
}

impl<'a> Decoder<'a> {
    pub fn new(w: &'a ModelWeights, kind: PolicyKind) -> Result<Decoder<'a>> {
        w.config.validate()?;
        if let PolicyKind::Anchor { linebreak_id, .. } = kind {
            if linebreak_id == w.config.anchor_token_id {
                return Err(Error::Input(
                    "anchor policy linebreak token collides with the anchor token".into(),
                ));
            }
            if linebreak_id as usize >= w.config.vocab_size {
                return Err(Error::Input(format!(
                    "linebreak token {linebreak_id} outside vocabulary of {}",
                    w.config.vocab_size
                )));
            }
        }
        let layers = w.config.n_layers;
        Ok(Decoder {
            w,
            policy: KVCachePolicy::new(kind),
            tokens: Vec::new(),
            anchors: Vec::new(),
            consumers: w.config.laa_consumers(),
            k_cache: vec![Vec::new(); layers],
            v_cache: vec![Vec::new(); layers],
            last_attention: None,
            mass_total: Vec::new(),
            retained: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Retained-set size the policy reported at each pushed step.
    pub fn retained_trace(&self) -> &[usize] {
        &self.retained
    }

    /// Attention mass each position has received so far, summed over steps,
    /// layers and heads, with anchor-KV halves folded onto their position.
    pub fn attention_mass(&self) -> &[f64] {
        &self.mass_total
    }

    pub fn policy_kind(&self) -> &PolicyKind {
        self.policy.kind()
    }

    /// Appends one token and returns the next-token logits.
    pub fn push(&mut self, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.w.config;
        let i = self.tokens.len();
        if i >= cfg.max_seq {
            return Err(Error::Input(format!(
                "decoder is full at max_seq {}",
                cfg.max_seq
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        self.policy.observe_token(i, token, cfg.anchor_token_id);
        let span_start = if token == cfg.anchor_token_id {
            let s = self.anchors.last().map_or(-1isize, |&a| a as isize);
            self.anchors.push(i);
            Some(s)
        } else {
            None
        };
        self.tokens.push(token);

        let visible = self.policy.visible(i, self.last_attention.as_deref())?;
        debug_assert!(visible.last() == Some(&i));

        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let heads = cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut mass = vec![0.0; i + 1];
        let mut x: Vec<f64> = self.w.embedding.row(token as usize).to_vec();

        for (l, lw) in self.w.layers.iter().enumerate() {
            let is_taa = cfg.is_taa_layer(l);
            let h = norm_row(&x, lw.ln_attn_gain.row(0));
            let q = row_matmul(&h, &lw.w_q);
            let k = row_matmul(&h, &lw.w_k);
            let v = row_matmul(&h, &lw.w_v);

            let mut q_rot = vec![0.0; d];
            let mut k_rot = vec![0.0; d];
            for hd in 0..heads {
                let lo = hd * dk;
                let hi = lo + dk;
                q_rot[lo..hi].copy_from_slice(&rotate_pairs(&q[lo..hi], i as f64, cfg.rope_base));
                let k_pos = if is_taa && cfg.use_mhpe {
                    match span_start {
                        Some(s) => {
                            let first = (s + 1) as usize;
                            let m = (i as isize - s - 1) as usize;
                            anchor_head_position(first, m, i, heads, hd)
                        }
                        None => i,
                    }
                } else {
                    i
                };
                k_rot[lo..hi]
                    .copy_from_slice(&rotate_pairs(&k[lo..hi], k_pos as f64, cfg.rope_base));
            }
            self.k_cache[l].push(k_rot);
            self.v_cache[l].push(v);

            let cols: Vec<usize> = if is_taa {
                visible
                    .iter()
                    .copied()
                    .filter(|&j| !anchor_masked(j, i, &self.anchors))
                    .collect()
            } else {
                visible.clone()
            };
            let anchor_layer = self
                .consumers
                .contains(&l)
                .then(|| cfg.laa_anchor_layer.expect("consumer without anchor layer"));

            let mut context = vec![0.0; d];
            for hd in 0..heads {
                let lo = hd * dk;
                let hi = lo + dk;
                let qh = &q_rot[lo..hi];
                let mut scores: Vec<f64> = Vec::with_capacity(cols.len() * 2);
                for &j in &cols {
                    scores.push(dot(qh, &self.k_cache[l][j][lo..hi]) * scale + 0.0);
                }
                if let Some(al) = anchor_layer {
                    for &j in &cols {
                        scores.push(dot(qh, &self.k_cache[al][j][lo..hi]) * scale + 0.0);
                    }
                }
                softmax_in_place(&mut scores);
                let out = &mut context[lo..hi];
                for (idx, &j) in cols.iter().enumerate() {
                    let wgt = scores[idx];
                    if wgt != 0.0 {
                        for (o, &vv) in out.iter_mut().zip(&self.v_cache[l][j][lo..hi]) {
                            *o += wgt * vv;
                        }
                    }
                    mass[j] += wgt;
                }
                if let Some(al) = anchor_layer {
                    for (idx, &j) in cols.iter().enumerate() {
                        let wgt = scores[cols.len() + idx];
                        if wgt != 0.0 {
                            for (o, &vv) in out.iter_mut().zip(&self.v_cache[al][j][lo..hi]) {
                                *o += wgt * vv;
                            }
                        }
                        mass[j] += wgt;
                    }
                }
            }

            let attn_out = row_matmul(&context, &lw.w_o);
            for (xv, a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }
            let h2 = norm_row(&x, lw.ln_mlp_gain.row(0));
            let u = row_matmul(&h2, &lw.w_in);
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mlp = row_matmul(&g, &lw.w_out);
            for (xv, a) in x.iter_mut().zip(&mlp) {
                *xv += a;
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {l} produced non-finite activations at step {i}"
                )));
            }
        }

        let f = norm_row(&x, self.w.final_gain.row(0));
        let logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|v| dot(&f, self.w.embedding.row(v)))
            .collect();

        self.mass_total.resize(i + 1, 0.0);
        for (acc, &m) in self.mass_total.iter_mut().zip(&mass) {
            *acc += m;
        }
        self.last_attention = Some(mass);
        self.retained.push(visible.len());
        Ok(logits)
    }
}

/// Greedy next token: the highest logit, ties to the lowest id, with the
/// anchor token never eligible.
pub(crate) fn greedy_pick(logits: &[f64], anchor_id: u32) -> u32 {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (v, &z) in logits.iter().enumerate() {
        if v as u32 == anchor_id {
            continue;
        }
        if z > best_v {
            best_v = z;
            best = v;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    /// Prompt plus generated tokens, with anchor tokens stripped.
    pub output: Vec<u32>,
    /// The exact token sequence the decoder ran, planted anchors included.
    pub internal: Vec<u32>,
    /// Retained-set size at every internal step.
    pub retained_per_step: Vec<usize>,
    /// Count of generated tokens, planted anchors excluded.
    pub generated: usize,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
}

/// Greedy generation. Under the anchor policy, anchors are planted after
/// every linebreak in the prompt, and one is inserted mechanically after
/// each generated linebreak; planted anchors are never sampled, do not
/// count toward `max_new`, and are stripped from the returned output.
pub fn generate(
    w: &ModelWeights,
    kind: PolicyKind,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    Ok(generate_traced(w, kind, prompt, max_new)?.output)
}

pub fn generate_traced(
    w: &ModelWeights,
    kind: PolicyKind,
    prompt: &[u32],
    max_new: usize,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        return Err(Error::Input("cannot generate from an empty prompt".into()));
    }
    let planted;
    let internal_prompt: &[u32] = if let PolicyKind::Anchor { linebreak_id, .. } = kind {
        planted = plant_anchors(prompt, linebreak_id, w.config.anchor_token_id)?;
        &planted.tokens
    } else {
        prompt
    };
    if internal_prompt.len() > w.config.max_seq {
        return Err(Error::Input(format!(
            "prompt of {} tokens (anchors included) exceeds max_seq {}",
            internal_prompt.len(),
            w.config.max_seq
        )));
    }

    let mut dec = Decoder::new(w, kind)?;
    let prefill_start = Instant::now();
    let mut logits = Vec::new();
    for &t in internal_prompt {
        logits = dec.push(t)?;
    }
    let prefill_seconds = prefill_start.elapsed().as_secs_f64();

    let decode_start = Instant::now();
    let mut generated = 0usize;
    while generated < max_new && dec.len() < w.config.max_seq {
        let next = greedy_pick(&logits, w.config.anchor_token_id);
        logits = dec.push(next)?;
        generated += 1;
        if dec.policy.wants_anchor_after(next) && dec.len() < w.config.max_seq {
            logits = dec.push(w.config.anchor_token_id)?;
        }
    }
    let decode_seconds = decode_start.elapsed().as_secs_f64();

    Ok(GenerationTrace {
        output: strip_anchors(dec.tokens(), w.config.anchor_token_id),
        internal: dec.tokens().to_vec(),
        retained_per_step: dec.retained_trace().to_vec(),
        generated,
        prefill_seconds,
        decode_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::forward::{forward, ForwardOptions};

    fn dense_model(seed: u64) -> ModelWeights {
        ModelWeights::init(ModelConfig::dense(32, 16, 2, 2, 64, seed)).unwrap()
    }

    fn anchored_model(seed: u64) -> ModelWeights {
        let mut cfg = ModelConfig::dense(32, 16, 2, 3, 64, seed);
        cfg.taa_layers = [1, 2].into_iter().collect();
        cfg.laa_anchor_layer = Some(0);
        ModelWeights::init(cfg).unwrap()
    }

    fn push_all(dec: &mut Decoder, tokens: &[u32]) -> Vec<Vec<f64>> {
        tokens.iter().map(|&t| dec.push(t).unwrap()).collect()
    }

    #[test]
    fn dense_decode_is_bit_identical_to_forward() {
        for w in [dense_model(1), anchored_model(2)] {
            let tokens = vec![3u32, 1, 0, 4, 1, 0, 5, 9];
            let trace = forward(&w, &tokens, &ForwardOptions::default()).unwrap();
            let mut dec = Decoder::new(&w, PolicyKind::Dense).unwrap();
            let rows = push_all(&mut dec, &tokens);
            for (i, row) in rows.iter().enumerate() {
                for (a, b) in row.iter().zip(trace.logits.row(i)) {
                    assert_eq!(a.to_bits(), b.to_bits(), "row {i} diverged");
                }
            }
        }
    }

    #[test]
    fn window_policy_restricts_what_the_model_sees() {
        let w = dense_model(3);
        let tokens: Vec<u32> = (1..=20).collect();
        let mut dense = Decoder::new(&w, PolicyKind::Dense).unwrap();
        let dense_rows = push_all(&mut dense, &tokens);
        let mut windowed = Decoder::new(&w, PolicyKind::Window { window: 4 }).unwrap();
        let window_rows = push_all(&mut windowed, &tokens);
        for (i, r) in windowed.retained_trace().iter().enumerate() {
            assert_eq!(*r, (i + 1).min(4));
        }
        assert_eq!(dense_rows[2], window_rows[2]);
        assert_ne!(dense_rows[10], window_rows[10]);
    }

    #[test]
    fn heavy_hitter_gets_feedback_automatically() {
        let w = dense_model(4);
        let tokens: Vec<u32> = (1..=12).collect();
        let mut dec = Decoder::new(&w, PolicyKind::HeavyHitter { budget_fraction: 0.5 }).unwrap();
        push_all(&mut dec, &tokens);
        for (i, &r) in dec.retained_trace().iter().enumerate() {
            let budget = ((0.5 * i as f64).ceil() as usize).max(1);
            assert_eq!(r, budget.min(i + 1), "step {i}");
        }
        assert!(dec.attention_mass().iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn greedy_pick_prefers_lowest_id_on_ties() {
        assert_eq!(greedy_pick(&[0.0, 1.0, 1.0, 0.5], 99), 1);
        assert_eq!(greedy_pick(&[2.0, 2.0, 2.0], 0), 1);
        assert_eq!(greedy_pick(&[5.0, 1.0, 1.0], 0), 1);
    }

    fn linebreak_rig() -> ModelWeights {
        // All layer weights zero: the residual stream stays at the input
        // embedding and the logits reduce to dot(norm(emb[t]), emb[v]).
        // Token 10's embedding dominates every input's logits, so greedy
        // generation emits an endless run of linebreaks.
        let mut cfg = ModelConfig::dense(16, 4, 2, 1, 32, 0);
        cfg.anchor_token_id = 0;
        let mut w = ModelWeights::init(cfg).unwrap();
        for (name, t) in w.named_tensors_mut() {
            if !name.ends_with("gain") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        for (v, row) in [(0usize, 1.0), (5, 1.0), (10, 100.0)] {
            w.embedding.row_mut(v)[0] = row;
            w.embedding.row_mut(v)[3] = -row;
        }
        w
    }

    #[test]
    fn anchor_policy_plants_after_generated_linebreaks() {
        let w = linebreak_rig();
        let kind = PolicyKind::Anchor { sinks: 2, linebreak_id: 10 };
        let trace = generate_traced(&w, kind, &[5], 3).unwrap();
        assert_eq!(trace.internal, vec![5, 10, 0, 10, 0, 10, 0]);
        assert_eq!(trace.output, vec![5, 10, 10, 10]);
        assert_eq!(trace.generated, 3);
        assert_eq!(trace.retained_per_step.len(), trace.internal.len());
    }

    #[test]
    fn zero_max_new_returns_the_prompt() {
        let w = linebreak_rig();
        let kind = PolicyKind::Anchor { sinks: 2, linebreak_id: 10 };
        let prompt = vec![5u32, 10, 5, 5];
        let trace = generate_traced(&w, kind, &prompt, 0).unwrap();
        assert_eq!(trace.output, prompt);
        assert_eq!(trace.internal, vec![5, 10, 0, 5, 5]);
        assert_eq!(trace.generated, 0);
        assert!(trace.prefill_seconds >= 0.0);
    }

    #[test]
    fn generation_stops_at_max_seq() {
        let mut w = linebreak_rig();
        w.config.max_seq = 6;
        let out = generate_traced(&w, PolicyKind::Dense, &[5, 5], 100).unwrap();
        assert_eq!(out.internal.len(), 6);
        assert_eq!(out.generated, 4);
    }

    #[test]
    fn anchor_policy_rejects_contaminated_prompts() {
        let w = linebreak_rig();
        let kind = PolicyKind::Anchor { sinks: 2, linebreak_id: 10 };
        let err = generate(&w, kind, &[5, 0, 5], 1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn decoder_rejects_bad_tokens_and_overflow() {
        let w = dense_model(5);
        let mut dec = Decoder::new(&w, PolicyKind::Dense).unwrap();
        assert!(matches!(dec.push(99), Err(Error::Input(_))));
        let mut w2 = dense_model(6);
        w2.config.max_seq = 2;
        let mut dec2 = Decoder::new(&w2, PolicyKind::Dense).unwrap();
        dec2.push(1).unwrap();
        dec2.push(2).unwrap();
        assert!(matches!(dec2.push(3), Err(Error::Input(_))));
    }

    #[test]
    fn anchor_policy_trace_reports_compressed_budget() {
        // Two full lines then a trailing segment: after each anchor exists,
        // the closed line is dropped from the retained set.
        let w = linebreak_rig();
        let kind = PolicyKind::Anchor { sinks: 0, linebreak_id: 10 };
        let prompt = vec![5u32, 5, 10, 5, 5, 10, 5];
        let trace = generate_traced(&w, kind, &prompt, 0).unwrap();
        assert_eq!(trace.internal, vec![5, 5, 10, 0, 5, 5, 10, 0, 5]);
        // Step 8 (the trailing 5) retains the two anchors plus itself.
        assert_eq!(*trace.retained_per_step.last().unwrap(), 3);
    }
}
