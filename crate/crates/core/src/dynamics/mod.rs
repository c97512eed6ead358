//! Per-step linear-Gaussian dynamics and cost-observation model, fitted from
//! rollouts under a GMM-derived normal-inverse-Wishart prior.

mod model;
mod niw;
mod vbgmm;

pub use model::{
    condition_gaussian, dataset_slice, fit_model, fit_model_with_prior, is_controllable, FitConfig,
    FitDiagnostics, StepModel, TimeVaryingLinearModel, MAX_INPUT_CONDITION, MODEL_SCHEMA_VERSION,
};
pub use niw::{
    bayes_update, build_niw_prior, empirical_moments, EmpiricalMoments, JointGaussian, NiwPrior,
};
pub use vbgmm::{fit_gmm_vb, GmmComponent, GmmConfig, GmmModel};
