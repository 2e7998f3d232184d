//! Desk-scale adversarial-transferability laboratory for tiny vision
//! transformers.
//!
//! The crate builds everything needed to study black-box transfer attacks on
//! a laptop: a deterministic reverse-mode autodiff engine with gradient
//! hooks, three trainable ViT variants, a spectral (DCT) input-enhancement
//! pipeline, redundancy-based gradient suppression, the COGO and MIM attack
//! loops, and an evaluation harness that produces transfer matrices,
//! ablation sweeps, dispersion profiles and sensitivity maps.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the `cogo`
//! binary (`gen-data`, `train`, `attack`, `ablate`, `analyze`).

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod freq;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod report;
pub mod rng;
pub mod suppress;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{CogoError, Result};
pub use graph::{Graph, HookFn, HookHandle, NodeId};
pub use rng::CogoRng;
pub use tensor::Tensor;
