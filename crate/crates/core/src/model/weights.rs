//! Parameter tensors, initialization, and binary checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//! magic `AKV1`, u32 config JSON length, the JSON, u32 tensor count, then
//! per tensor: u32 name length, name bytes, u32 rank, u64 dims, f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

use super::config::ModelConfig;

const MAGIC: &[u8; 4] = b"AKV1";
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerTensors {
    pub ln_attn_gain: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_mlp_gain: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerTensors>,
    pub final_gain: Matrix,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal() * std;
    }
    m
}

impl ModelWeights {
    /// Gaussian init with std 0.02; the two residual-writing projections of
    /// each block are shrunk by 1/sqrt(2 * n_layers) so the residual stream
    /// variance stays flat with depth. Draws happen in canonical tensor
    /// order, so equal seeds give bit-identical models.
    pub fn init(config: ModelConfig) -> Result<ModelWeights> {
        config.validate()?;
        let d = config.d_model;
        let ffn = config.ffn_dim();
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut rng = Rng::new(config.seed);
        let embedding = normal_matrix(&mut rng, config.vocab_size, d, INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerTensors {
                ln_attn_gain: Matrix::from_fn(1, d, |_, _| 1.0),
                w_q: normal_matrix(&mut rng, d, d, INIT_STD),
                w_k: normal_matrix(&mut rng, d, d, INIT_STD),
                w_v: normal_matrix(&mut rng, d, d, INIT_STD),
                w_o: normal_matrix(&mut rng, d, d, residual_std),
                ln_mlp_gain: Matrix::from_fn(1, d, |_, _| 1.0),
                w_in: normal_matrix(&mut rng, d, ffn, INIT_STD),
                w_out: normal_matrix(&mut rng, ffn, d, residual_std),
            });
        }
        let final_gain = Matrix::from_fn(1, d, |_, _| 1.0);
        Ok(ModelWeights {
            config,
            embedding,
            layers,
            final_gain,
        })
    }

    /// Same shapes as `self`, all values zero. Used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> ModelWeights {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModelWeights {
            config: self.config.clone(),
            embedding: zero(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensors {
                    ln_attn_gain: zero(&l.ln_attn_gain),
                    w_q: zero(&l.w_q),
                    w_k: zero(&l.w_k),
                    w_v: zero(&l.w_v),
                    w_o: zero(&l.w_o),
                    ln_mlp_gain: zero(&l.ln_mlp_gain),
                    w_in: zero(&l.w_in),
                    w_out: zero(&l.w_out),
                })
                .collect(),
            final_gain: zero(&self.final_gain),
        }
    }

    /// Tensors in canonical order: embedding, each layer's tensors in
    /// execution order, final gain.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("embedding".into(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln_attn_gain"), &layer.ln_attn_gain));
            out.push((format!("layers.{l}.w_q"), &layer.w_q));
            out.push((format!("layers.{l}.w_k"), &layer.w_k));
            out.push((format!("layers.{l}.w_v"), &layer.w_v));
            out.push((format!("layers.{l}.w_o"), &layer.w_o));
            out.push((format!("layers.{l}.ln_mlp_gain"), &layer.ln_mlp_gain));
            out.push((format!("layers.{l}.w_in"), &layer.w_in));
            out.push((format!("layers.{l}.w_out"), &layer.w_out));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> =
            vec![("embedding".into(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln_attn_gain"), &mut layer.ln_attn_gain));
            out.push((format!("layers.{l}.w_q"), &mut layer.w_q));
            out.push((format!("layers.{l}.w_k"), &mut layer.w_k));
            out.push((format!("layers.{l}.w_v"), &mut layer.w_v));
            out.push((format!("layers.{l}.w_o"), &mut layer.w_o));
            out.push((format!("layers.{l}.ln_mlp_gain"), &mut layer.ln_mlp_gain));
            out.push((format!("layers.{l}.w_in"), &mut layer.w_in));
            out.push((format!("layers.{l}.w_out"), &mut layer.w_out));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out
    }

    /// Element-wise `self += other`, tensor by tensor. Shapes must match.
    pub fn add_assign_weights(&mut self, other: &ModelWeights) -> Result<()> {
        let theirs = other.named_tensors();
        for ((name, mine), (other_name, m)) in self.named_tensors_mut().into_iter().zip(theirs) {
            debug_assert_eq!(name, other_name);
            mine.add_assign(m).map_err(|_| {
                Error::Shape(format!("tensor {name} shape mismatch in accumulation"))
            })?;
        }
        Ok(())
    }

    pub fn scale_all(&mut self, s: f64) {
        for (_, m) in self.named_tensors_mut() {
            m.scale(s);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelWeights> {
        let mut r = BufReader::new(File::open(path)?);
        ModelWeights::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let tensors = self.named_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, m) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for &v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ModelWeights> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Input(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let json_len = read_u32(r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        config.validate()?;
        let count = read_u32(r)? as usize;

        let mut model = ModelWeights::init(config)?;
        let expected = model.named_tensors().len();
        if count != expected {
            return Err(Error::Input(format!(
                "checkpoint holds {count} tensors, model needs {expected}"
            )));
        }
        let mut loaded: Vec<(String, Matrix)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Input("tensor name is not utf-8".into()))?;
            let rank = read_u32(r)?;
            if rank != 2 {
                return Err(Error::Shape(format!("tensor {name} has rank {rank}, expected 2")));
            }
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = vec![0.0f64; rows.checked_mul(cols).ok_or_else(|| {
                Error::Shape(format!("tensor {name} dims {rows}x{cols} overflow"))
            })?];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            loaded.push((name, Matrix::from_vec(rows, cols, data)?));
        }

        for (name, slot) in model.named_tensors_mut() {
            let found = loaded
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing tensor {name}")))?;
            let (_, m) = loaded.swap_remove(found);
            if m.rows() != slot.rows() || m.cols() != slot.cols() {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = m;
        }
        if let Some((name, _)) = loaded.first() {
            return Err(Error::Input(format!("checkpoint holds unknown tensor {name}")));
        }
        Ok(model)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Whether a tensor is a layer-norm gain; gains are exempt from weight decay.
pub(crate) fn is_gain(name: &str) -> bool {
    name.ends_with("gain")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::dense(32, 16, 2, 3, 64, 7)
    }

    fn std_of(m: &Matrix) -> f64 {
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        (m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn embedding_std_is_near_two_hundredths() {
        let cfg = ModelConfig::dense(256, 64, 4, 2, 64, 11);
        let model = ModelWeights::init(cfg).unwrap();
        let s = std_of(&model.embedding);
        assert!(s > 0.015 && s < 0.025, "embedding std {s}");
    }

    #[test]
    fn residual_projections_are_depth_scaled() {
        let cfg = ModelConfig::dense(256, 64, 4, 8, 64, 13);
        let model = ModelWeights::init(cfg).unwrap();
        let expected = 0.02 / (16.0f64).sqrt();
        let s = std_of(&model.layers[0].w_o);
        assert!((s - expected).abs() < expected * 0.2, "w_o std {s} vs {expected}");
        let s = std_of(&model.layers[7].w_out);
        assert!((s - expected).abs() < expected * 0.2, "w_out std {s} vs {expected}");
    }

    #[test]
    fn gains_start_at_one() {
        let model = ModelWeights::init(small_config()).unwrap();
        assert!(model.final_gain.data().iter().all(|&v| v == 1.0));
        assert!(model.layers[1].ln_attn_gain.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = ModelWeights::init(small_config()).unwrap();
        let b = ModelWeights::init(small_config()).unwrap();
        for ((_, ma), (_, mb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(ma.data(), mb.data());
        }
    }

    #[test]
    fn tensor_names_follow_layer_layout() {
        let model = ModelWeights::init(small_config()).unwrap();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 8 * 3);
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "layers.0.ln_attn_gain");
        assert_eq!(names[2], "layers.0.w_q");
        assert!(names.contains(&"layers.2.w_out".to_string()));
        assert_eq!(names.last().unwrap(), "final_gain");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = ModelWeights::init(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.akv");
        model.save(&path).unwrap();
        let back = ModelWeights::load(&path).unwrap();
        assert_eq!(model.config, back.config);
        for ((name, ma), (_, mb)) in model.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(ma.data(), mb.data(), "tensor {name} changed across save/load");
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let model = ModelWeights::init(small_config()).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        bytes[0] = b'Z';
        let err = ModelWeights::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn load_rejects_truncation() {
        let model = ModelWeights::init(small_config()).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(ModelWeights::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn load_rejects_missing_tensors() {
        let model = ModelWeights::init(small_config()).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        let json = serde_json::to_vec(&model.config).unwrap();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = ModelWeights::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn gain_detection_matches_names() {
        assert!(is_gain("final_gain"));
        assert!(is_gain("layers.3.ln_mlp_gain"));
        assert!(!is_gain("layers.3.w_q"));
        assert!(!is_gain("embedding"));
    }
}
