//! From-scratch training driver: seeds the weights from the config, plants
//! anchors when the architecture calls for them, and runs shuffled
//! mini-batches through the optimizer.

use crate::anchor::plant_anchors;
use crate::model::{train_step, AdamConfig, AdamState, ModelConfig, ModelWeights};
use crate::numerics::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed for the per-epoch shuffle of sequence order; independent of the
    /// weight-init seed in the model config.
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch_size: 8,
            adam: AdamConfig::default(),
            shuffle_seed: 1,
        }
    }
}

#[derive(Debug)]
pub struct TrainedModel {
    pub weights: ModelWeights,
    /// Batch loss before each update, one entry per step.
    pub losses: Vec<f64>,
}

/// Trains a fresh model on the given raw corpus. Architectures with
/// token-wise anchor layers get anchors planted after every linebreak
/// before training; plain models train on the corpus as-is. Deterministic
/// in (config, corpus, options).
pub fn train_model(
    config: &ModelConfig,
    corpus: &[Vec<u32>],
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot train on an empty corpus".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::Input("training needs at least one step and a nonzero batch".into()));
    }
    let anchored = !config.taa_layers.is_empty();
    let mut seqs = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        let planted = if anchored {
            plant_anchors(seq, crate::harness::text::LINEBREAK_TOKEN, config.anchor_token_id)?.tokens
        } else {
            seq.clone()
        };
        if planted.len() > config.max_seq {
            return Err(Error::Input(format!(
                "sequence {i} holds {} tokens after planting, over max_seq {}",
                planted.len(),
                config.max_seq
            )));
        }
        seqs.push(planted);
    }

    let mut weights = ModelWeights::init(config.clone())?;
    let mut state = AdamState::new(&weights);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = Rng::new(opts.shuffle_seed);
    let mut cursor = order.len();
    while losses.len() < opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(seqs[order[cursor]].clone());
            cursor += 1;
        }
        losses.push(train_step(&mut weights, &mut state, &opts.adam, &batch)?);
    }
    Ok(TrainedModel { weights, losses })
}
