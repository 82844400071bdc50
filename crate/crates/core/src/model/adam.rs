//! AdamW with decoupled weight decay.
//!
//! Layer-norm gains are exempt from decay; everything else, the embedding
//! included, shrinks by `lr * weight_decay` per step on top of the moment
//! update.

use crate::numerics::Matrix;
use crate::Result;

use super::backward::batch_loss_and_grads;
use super::weights::{is_gain, ModelWeights};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct AdamState {
    m: ModelWeights,
    v: ModelWeights,
    t: u64,
}

impl AdamState {
    pub fn new(w: &ModelWeights) -> AdamState {
        AdamState {
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        w: &mut ModelWeights,
        grads: &ModelWeights,
        opt: &AdamConfig,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(self.t as i32);
        let m_tensors = self.m.named_tensors_mut();
        let v_tensors = self.v.named_tensors_mut();
        let g_tensors = grads.named_tensors();
        for (((name, wt), (_, mt)), ((_, vt), (_, gt))) in w
            .named_tensors_mut()
            .into_iter()
            .zip(m_tensors)
            .zip(v_tensors.into_iter().zip(g_tensors))
        {
            update_tensor(wt, mt, vt, gt, opt, bc1, bc2, !is_gain(&name));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    w: &mut Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    g: &Matrix,
    opt: &AdamConfig,
    bc1: f64,
    bc2: f64,
    decay: bool,
) {
    let wd = if decay { opt.weight_decay } else { 0.0 };
    for (((wv, mv), vv), &gv) in w
        .data_mut()
        .iter_mut()
        .zip(m.data_mut())
        .zip(v.data_mut())
        .zip(g.data())
    {
        *mv = opt.beta1 * *mv + (1.0 - opt.beta1) * gv;
        *vv = opt.beta2 * *vv + (1.0 - opt.beta2) * gv * gv;
        let m_hat = *mv / bc1;
        let v_hat = *vv / bc2;
        *wv -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + wd * *wv);
    }
}

/// One optimization step over a token batch; returns the batch loss
/// measured before the update.
pub fn train_step(
    w: &mut ModelWeights,
    state: &mut AdamState,
    opt: &AdamConfig,
    batch: &[Vec<u32>],
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(w, batch)?;
    state.step(w, &grads, opt)?;
    Ok(loss)
}
