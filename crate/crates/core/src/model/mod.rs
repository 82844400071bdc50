//! The toy decoder-only transformer: configuration, parameters, forward and
//! backward passes, the optimizer, and the incremental decoder.

mod adam;
mod backward;
mod config;
mod forward;
mod generate;
pub mod rope;
mod weights;

pub use adam::{train_step, AdamConfig, AdamState};
pub use backward::{batch_loss, batch_loss_and_grads, loss_and_grads};
pub use config::ModelConfig;
pub use forward::{forward, AttentionTrace, ForwardOptions, ForwardTrace};
pub use generate::{generate, generate_traced, Decoder, GenerationTrace};
pub(crate) use generate::greedy_pick;
pub use rope::apply_rope;
pub use weights::{LayerTensors, ModelWeights};
