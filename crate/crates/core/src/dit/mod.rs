//! Sparse-MoE diffusion transformer: patchified latent tokens, dual-stream
//! blocks with modality-specific projections and joint attention, then
//! single-stream blocks on the concatenated sequence, with adaLN modulation
//! throughout and sparse SwiGLU expert feed-forwards.

pub mod block;
pub mod config;
pub mod embed;
pub mod model;
pub mod moe;

pub use config::DiTConfig;
pub use model::{ForwardOut, Mode, SparseDiT};
pub use moe::{MoeLayer, RouterDecision};
