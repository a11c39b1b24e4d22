//! AugShuffleNet and ShuffleNetV2 for 32x32 inputs: executable blocks and
//! networks, exact multiply-add and parameter accounting, and a small
//! training harness with gradient verification.

pub mod analytics;
pub mod blocks;
pub mod channel_ops;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod network;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use channel_ops::{
    channel_crossover, channel_shuffle, channel_split, ChannelPermutation, CrossoverPlan,
    SplitRatio,
};
pub use error::{Error, Result};
pub use network::{ArchConfig, Family, Model, Width};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ConvParams, LinearParams, NormParams, Scalar, Tensor};
