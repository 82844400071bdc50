//! Desk-scale decoder-only transformer engine with pluggable KV-cache
//! compression policies.
//!
//! The crate is organized around six modules:
//!
//! * [`numerics`]: dense `f64` matrices, a deterministic RNG, softmax,
//!   layer norm and a Jacobi eigenvalue solver.
//! * [`model`]: the toy transformer itself (init, forward, hand-written
//!   reverse-mode gradients, Adam, greedy decoding, checkpoints).
//! * [`anchor`]: anchor planting, the anchor attention mask, multi-head
//!   position encoding for anchors, and layer-wise anchor attention.
//! * [`cache`]: KV-cache retention policies and budget accounting.
//! * [`analysis`]: attention sparsity metrics and weight-space probes.
//! * [`harness`]: synthetic corpora, needle-in-a-haystack evaluation,
//!   perplexity/accuracy scoring and runtime benchmarks.

pub mod analysis;
pub mod anchor;
pub mod cache;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
