//! MLP policies, BPTT training and recovery-policy training.

pub mod mlp;
pub mod recovery;
pub mod train;

pub use mlp::MlpPolicy;
pub use recovery::{
    recoverable_fraction, sample_recovery_states, train_recovery, RecoveryConfig, RecoverySample, RewardMode,
};
pub use train::{initial_sampler, train_bptt, Episode, TrainConfig, TrainResult};
