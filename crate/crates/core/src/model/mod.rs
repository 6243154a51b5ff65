//! Network definition, parameters, and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod fusion;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::{BackboneScale, BlockSpec, CbnGranularity, ModelConfig, CBN_BLOCKS, DISTRIBUTION_BUCKETS};
pub use network::{BatchStat, Forward, Gradients, Mode, Network, ATTENTION_TAP};
pub use optim::Adam;
pub use params::{ParamStore, Weights};
