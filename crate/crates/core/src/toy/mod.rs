//! Desk-scale dual-encoder contrastive trainer used to produce reference
//! snapshots and to consume curriculum plans.

pub mod data;
pub mod model;
pub mod train;

pub use data::{generate_synthetic, read_dataset, write_dataset, GroupSpec, ToyDataset, ToyDims};
pub use model::{contrastive_loss, encode, loss_and_grads, DualEncoder, LossGrads};
pub use train::{
    checkpoint_schedule, read_loss_log, train_reference, train_selective, write_loss_log, EpochLog, TrainConfig,
    TrainOutcome,
};
