//! Flow-matching training on the linear noise→data path, classifier-free
//! guidance, Euler ODE sampling, toy datasets, and the progressive
//! resolution training loop.

pub mod codec;
pub mod euler;
pub mod sample;
pub mod toy;
pub mod train;

pub use codec::{IdentityCodec, LatentCodec};
pub use euler::{cfg_velocity, euler_integrate, euler_sample, ModelField, VelocityField};
pub use sample::{fm_loss, make_flow_sample, FlowSample, TSampler};
pub use toy::{read_cache, write_cache, CachedDataset, ToyDataset, ToySample};
pub use train::{train_loop, MetricsRow, StageConfig, TrainOptions, TrainOutcome, TrainSchedule};
