//! Full-sequence forward pass with an activation stash for the backward
//! pass and optional attention capture for analysis.

use crate::anchor::{
    assign_mhpe_positions, attend_core, build_anchor_mask, AnchoredSequence, AttentionMask,
};
use crate::model::rope::rotate_pairs;
use crate::numerics::{layer_norm_stats, Matrix};
use crate::{Error, Result};

use super::weights::ModelWeights;

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Attention mask shared by every layer; defaults to plain causal.
    pub mask: Option<&'a AttentionMask>,
    /// Rotary position of each row, overriding the row index. Lets a caller
    /// run a sequence with positions that do not start at zero or that skip
    /// indices (for example after physically deleting tokens).
    pub positions: Option<&'a [usize]>,
    /// Keep the post-softmax attention weights in the returned trace.
    pub capture_attention: bool,
}

/// Post-softmax attention weights, `layers[layer][head]`. A matrix is
/// `n x n`, or `n x 2n` in layers that append the anchor layer's KV
/// (columns `n + j` refer to position `j` again).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Matrix>>,
}

#[derive(Debug)]
pub struct ForwardTrace {
    pub n: usize,
    /// `n x vocab_size` next-token logits.
    pub logits: Matrix,
    pub attention: Option<AttentionTrace>,
}

pub(crate) struct NormActs {
    pub(crate) sigma: Vec<f64>,
    pub(crate) normalized: Matrix,
}

pub(crate) struct LayerActs {
    pub(crate) ln_attn: NormActs,
    pub(crate) v: Matrix,
    pub(crate) q_rot: Matrix,
    pub(crate) k_rot: Matrix,
    /// Key rotation position per head and row, head-major: `k_pos[h * n + i]`.
    pub(crate) k_pos: Vec<usize>,
    pub(crate) weights: Vec<Matrix>,
    pub(crate) context: Matrix,
    pub(crate) ln_mlp: NormActs,
    pub(crate) u: Matrix,
    pub(crate) g: Matrix,
    pub(crate) uses_anchor_kv: bool,
}

pub(crate) struct Activations {
    pub(crate) n: usize,
    pub(crate) tokens: Vec<u32>,
    pub(crate) q_pos: Vec<usize>,
    pub(crate) layers: Vec<LayerActs>,
    pub(crate) final_norm: NormActs,
    pub(crate) final_hidden: Matrix,
    pub(crate) logits: Matrix,
}

pub fn forward(w: &ModelWeights, tokens: &[u32], opts: &ForwardOptions) -> Result<ForwardTrace> {
    let capture = opts.capture_attention;
    let acts = run_forward(w, tokens, opts)?;
    let attention = if capture {
        Some(AttentionTrace {
            layers: acts.layers.iter().map(|l| l.weights.clone()).collect(),
        })
    } else {
        None
    };
    Ok(ForwardTrace {
        n: acts.n,
        logits: acts.logits,
        attention,
    })
}

pub(crate) fn run_forward(
    w: &ModelWeights,
    tokens: &[u32],
    opts: &ForwardOptions,
) -> Result<Activations> {
    let cfg = &w.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Input("cannot run an empty sequence".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence of {n} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if let Some(p) = opts.positions {
        if p.len() != n {
            return Err(Error::Shape(format!(
                "{} position overrides for {n} tokens",
                p.len()
            )));
        }
    }
    let logical = |i: usize| opts.positions.map_or(i, |p| p[i]);

    let causal;
    let base_mask: &AttentionMask = match opts.mask {
        Some(m) => {
            if m.n() != n {
                return Err(Error::Shape(format!(
                    "mask over {} positions for {n} tokens",
                    m.n()
                )));
            }
            m
        }
        None => {
            causal = AttentionMask::causal(n);
            &causal
        }
    };

    let seq = AnchoredSequence::scan(tokens, cfg.anchor_token_id);
    let taa_mask = if cfg.taa_layers.is_empty() {
        None
    } else {
        Some(base_mask.combined(&build_anchor_mask(n, &seq.anchors)?)?)
    };
    let mhpe = if cfg.use_mhpe && !cfg.taa_layers.is_empty() {
        Some(assign_mhpe_positions(&seq, cfg.n_heads))
    } else {
        None
    };

    let d = cfg.d_model;
    let dk = cfg.head_dim();
    let heads = cfg.n_heads;
    let consumers = cfg.laa_consumers();
    let mut anchor_stash: Option<(Matrix, Matrix)> = None;

    let mut x = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(w.embedding.row(t as usize));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let is_taa = cfg.is_taa_layer(l);
        let mask = if is_taa {
            taa_mask.as_ref().unwrap_or(base_mask)
        } else {
            base_mask
        };

        let ln_attn = norm_forward(&x, &lw.ln_attn_gain);
        let h = gained(&ln_attn, &lw.ln_attn_gain);
        let q = h.matmul(&lw.w_q).map_err(|e| at_layer(l, e))?;
        let k = h.matmul(&lw.w_k).map_err(|e| at_layer(l, e))?;
        let v = h.matmul(&lw.w_v).map_err(|e| at_layer(l, e))?;

        let mut k_pos = vec![0usize; heads * n];
        for hd in 0..heads {
            for i in 0..n {
                let array_pos = match (&mhpe, is_taa) {
                    (Some(m), true) => m.head_positions(i)[hd],
                    _ => i,
                };
                k_pos[hd * n + i] = logical(array_pos);
            }
        }
        let q_rot = rotate_rows(&q, heads, dk, cfg.rope_base, |i, _| logical(i) as f64);
        let k_rot = rotate_rows(&k, heads, dk, cfg.rope_base, |i, hd| k_pos[hd * n + i] as f64);

        let uses_anchor_kv = consumers.contains(&l);
        let mut weights = Vec::with_capacity(heads);
        let mut context = Matrix::zeros(n, d);
        for hd in 0..heads {
            let qh = head_slice(&q_rot, hd, dk);
            let kh = head_slice(&k_rot, hd, dk);
            let vh = head_slice(&v, hd, dk);
            let extra_owned = if uses_anchor_kv {
                let (ak, av) = anchor_stash.as_ref().ok_or_else(|| {
                    Error::Config(format!("layer {l} consumes anchor KV before it exists"))
                })?;
                Some((head_slice(ak, hd, dk), head_slice(av, hd, dk)))
            } else {
                None
            };
            let extra = extra_owned.as_ref().map(|(a, b)| (a, b));
            let (out, w_h) = attend_core(&qh, &kh, &vh, extra, mask).map_err(|e| at_layer(l, e))?;
            set_head_slice(&mut context, hd, dk, &out);
            weights.push(w_h);
        }

        let attn_out = context.matmul(&lw.w_o).map_err(|e| at_layer(l, e))?;
        let mut x_mid = x.clone();
        x_mid.add_assign(&attn_out)?;

        let ln_mlp = norm_forward(&x_mid, &lw.ln_mlp_gain);
        let h2 = gained(&ln_mlp, &lw.ln_mlp_gain);
        let u = h2.matmul(&lw.w_in).map_err(|e| at_layer(l, e))?;
        let g = map_matrix(&u, gelu);
        let mlp_out = g.matmul(&lw.w_out).map_err(|e| at_layer(l, e))?;
        let mut x_out = x_mid.clone();
        x_out.add_assign(&mlp_out)?;
        if x_out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "layer {l} produced non-finite activations"
            )));
        }

        if cfg.laa_anchor_layer == Some(l) {
            anchor_stash = Some((k_rot.clone(), v.clone()));
        }
        layers.push(LayerActs {
            ln_attn,
            v,
            q_rot,
            k_rot,
            k_pos,
            weights,
            context,
            ln_mlp,
            u,
            g,
            uses_anchor_kv,
        });
        x = x_out;
    }

    let final_norm = norm_forward(&x, &w.final_gain);
    let final_hidden = gained(&final_norm, &w.final_gain);
    let logits = final_hidden.matmul_transpose_b(&w.embedding)?;
    Ok(Activations {
        n,
        tokens: tokens.to_vec(),
        q_pos: (0..n).map(logical).collect(),
        layers,
        final_norm,
        final_hidden,
        logits,
    })
}

fn at_layer(l: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("layer {l}: {m}")),
        other => other,
    }
}

/// Row-wise normalization stats plus the pre-gain normalized rows.
pub(crate) fn norm_forward(x: &Matrix, gain: &Matrix) -> NormActs {
    debug_assert_eq!(gain.cols(), x.cols());
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut sigma = vec![0.0; x.rows()];
    for i in 0..x.rows() {
        let (mu, s) = layer_norm_stats(x.row(i), LN_EPS);
        sigma[i] = s;
        for (o, &v) in normalized.row_mut(i).iter_mut().zip(x.row(i)) {
            *o = (v - mu) / s;
        }
    }
    NormActs { sigma, normalized }
}

/// One-row normalization plus gain, bit-identical to the matrix path.
pub(crate) fn norm_row(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let (mu, s) = layer_norm_stats(x, LN_EPS);
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v - mu) / s * g)
        .collect()
}

/// Applies the gain to normalized rows.
pub(crate) fn gained(acts: &NormActs, gain: &Matrix) -> Matrix {
    let mut out = acts.normalized.clone();
    for i in 0..out.rows() {
        for (o, &g) in out.row_mut(i).iter_mut().zip(gain.row(0)) {
            *o *= g;
        }
    }
    out
}

/// Rotates each row's per-head slice by a position chosen per (row, head).
/// Negative positions run the rotation backwards, which inverts it.
pub(crate) fn rotate_rows(
    m: &Matrix,
    heads: usize,
    dk: usize,
    base: f64,
    pos: impl Fn(usize, usize) -> f64,
) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for hd in 0..heads {
            let src = &m.row(i)[hd * dk..(hd + 1) * dk];
            let rotated = rotate_pairs(src, pos(i, hd), base);
            out.row_mut(i)[hd * dk..(hd + 1) * dk].copy_from_slice(&rotated);
        }
    }
    out
}

/// Copies head `h`'s column block out of an `n x d_model` matrix.
pub(crate) fn head_slice(m: &Matrix, h: usize, dk: usize) -> Matrix {
    Matrix::from_fn(m.rows(), dk, |i, j| m.get(i, h * dk + j))
}

/// Writes head `h`'s column block back into an `n x d_model` matrix.
pub(crate) fn set_head_slice(dst: &mut Matrix, h: usize, dk: usize, src: &Matrix) {
    debug_assert_eq!(src.cols(), dk);
    for i in 0..dst.rows() {
        dst.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(src.row(i));
    }
}

pub(crate) fn map_matrix(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let t = GELU_C * (x + GELU_A * x * x * x);
    let th = t.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::numerics::layer_norm;

    fn dense_model(n_layers: usize, seed: u64) -> ModelWeights {
        ModelWeights::init(ModelConfig::dense(32, 16, 2, n_layers, 64, seed)).unwrap()
    }

    fn taa_model(n_layers: usize, taa: &[usize], seed: u64) -> ModelWeights {
        let mut cfg = ModelConfig::dense(32, 16, 2, n_layers, 64, seed);
        cfg.taa_layers = taa.iter().copied().collect();
        ModelWeights::init(cfg).unwrap()
    }

    #[test]
    fn logits_have_one_row_per_token() {
        let w = dense_model(2, 1);
        let t = forward(&w, &[1, 2, 3, 4, 5], &ForwardOptions::default()).unwrap();
        assert_eq!(t.logits.rows(), 5);
        assert_eq!(t.logits.cols(), 32);
        assert!(t.logits.data().iter().all(|v| v.is_finite()));
        assert!(t.attention.is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let w = dense_model(2, 2);
        let a = forward(&w, &[3, 1, 4, 1, 5], &ForwardOptions::default()).unwrap();
        let b = forward(&w, &[3, 1, 4, 1, 5], &ForwardOptions::default()).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn future_tokens_cannot_reach_earlier_rows() {
        let w = dense_model(2, 3);
        let a = forward(&w, &[1, 2, 3, 4, 5], &ForwardOptions::default()).unwrap();
        let b = forward(&w, &[1, 2, 3, 4, 9], &ForwardOptions::default()).unwrap();
        for i in 0..4 {
            assert_eq!(a.logits.row(i), b.logits.row(i), "row {i} saw the future");
        }
        assert_ne!(a.logits.row(4), b.logits.row(4));
    }

    #[test]
    fn anchor_layers_hide_closed_segments() {
        // One layer, anchors at 3 and 6. Row 7 must ignore position 4
        // entirely: zero attention weight, and logits invariant to the
        // token planted there.
        let w = taa_model(1, &[0], 4);
        let base = vec![5, 6, 7, 0, 8, 9, 0, 11];
        let mut changed = base.clone();
        changed[4] = 21;
        let opts = ForwardOptions {
            capture_attention: true,
            ..ForwardOptions::default()
        };
        let a = forward(&w, &base, &opts).unwrap();
        let b = forward(&w, &changed, &opts).unwrap();
        let att = a.attention.as_ref().unwrap();
        for h in 0..2 {
            assert_eq!(att.layers[0][h].get(7, 4), 0.0);
            assert_eq!(att.layers[0][h].get(7, 5), 0.0);
            assert!(att.layers[0][h].get(7, 3) > 0.0);
            assert!(att.layers[0][h].get(7, 6) > 0.0);
        }
        assert_eq!(a.logits.row(7), b.logits.row(7));
        assert_ne!(a.logits.row(5), b.logits.row(5));
    }

    #[test]
    fn mhpe_changes_anchor_key_rotations() {
        let w = taa_model(2, &[0, 1], 5);
        let mut w_plain = w.clone();
        w_plain.config.use_mhpe = false;
        let tokens = vec![5, 6, 7, 0, 8, 9];
        let a = forward(&w, &tokens, &ForwardOptions::default()).unwrap();
        let b = forward(&w_plain, &tokens, &ForwardOptions::default()).unwrap();
        assert_ne!(a.logits.row(5), b.logits.row(5));
    }

    #[test]
    fn mhpe_without_anchors_matches_plain_rotation() {
        let w = taa_model(2, &[0, 1], 6);
        let mut w_plain = w.clone();
        w_plain.config.use_mhpe = false;
        let tokens = vec![5, 6, 7, 8];
        let a = forward(&w, &tokens, &ForwardOptions::default()).unwrap();
        let b = forward(&w_plain, &tokens, &ForwardOptions::default()).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn position_override_defaults_match_row_indices() {
        let w = dense_model(2, 7);
        let tokens = vec![1, 2, 3, 4];
        let plain = forward(&w, &tokens, &ForwardOptions::default()).unwrap();
        let own: Vec<usize> = (0..4).collect();
        let with = forward(
            &w,
            &tokens,
            &ForwardOptions {
                positions: Some(&own),
                ..ForwardOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain.logits.data(), with.logits.data());

        let shifted = vec![0usize, 5, 6, 7];
        let other = forward(
            &w,
            &tokens,
            &ForwardOptions {
                positions: Some(&shifted),
                ..ForwardOptions::default()
            },
        )
        .unwrap();
        assert_ne!(plain.logits.data(), other.logits.data());
    }

    #[test]
    fn anchor_layer_kv_feeds_deeper_layers() {
        let mut cfg = ModelConfig::dense(32, 16, 2, 3, 64, 8);
        cfg.taa_layers = [1, 2].into_iter().collect();
        cfg.laa_anchor_layer = Some(0);
        let w = ModelWeights::init(cfg).unwrap();
        let mut w_off = w.clone();
        w_off.config.laa_anchor_layer = None;
        let tokens = vec![5, 6, 0, 7, 8];
        let opts = ForwardOptions {
            capture_attention: true,
            ..ForwardOptions::default()
        };
        let a = forward(&w, &tokens, &opts).unwrap();
        let b = forward(&w_off, &tokens, &opts).unwrap();
        assert_ne!(a.logits.data(), b.logits.data());
        let att = a.attention.as_ref().unwrap();
        assert_eq!(att.layers[0][0].cols(), 5);
        assert_eq!(att.layers[1][0].cols(), 10);
        assert_eq!(att.layers[2][0].cols(), 10);
        assert_eq!(b.attention.as_ref().unwrap().layers[1][0].cols(), 5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = dense_model(1, 9);
        assert!(matches!(
            forward(&w, &[], &ForwardOptions::default()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward(&w, &[99], &ForwardOptions::default()),
            Err(Error::Input(_))
        ));
        let long = vec![1u32; 65];
        assert!(matches!(
            forward(&w, &long, &ForwardOptions::default()),
            Err(Error::Input(_))
        ));
        let short_mask = AttentionMask::causal(3);
        assert!(matches!(
            forward(
                &w,
                &[1, 2],
                &ForwardOptions {
                    mask: Some(&short_mask),
                    ..ForwardOptions::default()
                }
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn norm_forward_matches_layer_norm() {
        let x = Matrix::from_vec(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let gain = Matrix::from_vec(1, 4, vec![1.0, 0.5, 2.0, 1.5]).unwrap();
        let acts = norm_forward(&x, &gain);
        let y = gained(&acts, &gain);
        for i in 0..2 {
            let expect = layer_norm(x.row(i), gain.row(0), LN_EPS);
            for (a, b) in y.row(i).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_matches_reference_values() {
        assert!(gelu(0.0).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158808).abs() < 1e-5);
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - numeric).abs() < 1e-6, "gelu' at {x}");
        }
    }
}
