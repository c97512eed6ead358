//! Global policy: MLP mean distilled from the local controllers, plus the
//! harmonic-mean action covariance.

mod global;
mod kl;
mod mlp;
mod net;
mod train;

pub use global::{global_covariance, theorem1_check, CovarianceMode, Theorem1Report};
pub use kl::{
    build_training_set, gaussian_kl, kl_sample_loss, ConditionRollouts, KlLoss, TrainingSample,
};
pub use mlp::{Layer, Mlp, MlpGradient};
pub use net::{
    mlp_backward, mlp_forward, Adam, AdamConfig, GlobalPolicy, PolicyNet, POLICY_SCHEMA_VERSION,
};
pub use train::{
    mean_squared_error, read_loss_csv, train_supervised, write_loss_csv, TrainConfig, TrainOutcome,
};
