//! Desk-scale convolutional network trained from scratch on synthetic data.
//!
//! Produces real activation dumps for scoring and runs the score, prune and
//! fine-tune loop against random and ℓ1-norm baselines.

mod compare;
mod data;
mod layers;
mod net;

pub use compare::{
    prune_compare, select_masks, CompareConfig, ComparisonReport, ComparisonRow, Criterion,
};
pub use data::{Dataset, SyntheticTask, TaskData};
pub use layers::{Batch, Conv, Fc};
pub use net::{gradient_check, Grads, Layer, LayerDef, MicroNet, TrainConfig, TrainReport};
