//! Recovery after pruning: low-rank adapters, partial-layer freezing and the
//! training loop shared by both.

mod adapters;
mod freeze;
mod pretrain;
mod train;

pub use adapters::{
    adapter_trainable_count, attach_adapters, merge_adapters, AdaptedModel, AdapterPair, AdapterSet,
    ADAPTER_INIT_STD, DEFAULT_ALPHA, DEFAULT_TARGETS,
};
pub use freeze::{apply_freeze, FreezePolicy};
pub use pretrain::{pretrain, BaseTrainConfig};
pub use train::{curve_csv, train, LossPoint, TrainConfig, TrainOutcome, Trainable, Trainer};
