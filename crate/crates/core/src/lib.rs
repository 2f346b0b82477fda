//! Desk-scale sparse-MoE diffusion transformer with flow-matching training,
//! few-step distillation, in-context image editing, and a data curation
//! pipeline. Everything runs on CPU with hand-rolled numerics so each piece
//! stays checkable against analytic oracles and finite differences.

pub mod checkpoint;
pub mod conditioning;
pub mod datapipe;
pub mod distill;
pub mod dit;
pub mod edit;
pub mod error;
pub mod fdcheck;
pub mod flow;
pub mod graph;
pub mod imageio;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::{shared, SharedTensor, Tensor};
