//! Local controller optimization by expectation-maximization: the closed-loop
//! state-space model, Kalman/RTS E-step, guarded M-step, information matrix
//! and covariance contraction.

mod closed_loop;
mod controller;
mod em;
mod information;
mod kalman;
mod lqr;
mod mstep;
mod qfunc;

pub use closed_loop::{closed_loop, closed_loop_step, ClosedLoopModel, ClosedLoopStep};
pub use controller::{
    theta_len, ControllerParams, ControllerStep, ThetaBounds, CONTROLLER_SCHEMA_VERSION,
    COVARIANCE_FLOOR,
};
pub use em::{
    em_iteration, em_optimize, observation_sequence, read_em_csv, surrogate_cost, write_em_csv,
    EmConfig, EmIterationRecord, ObservationPolicy, EM_CSV_HEADER,
};
pub use information::{
    complete_fisher_sigma, covariance_update, fd_hessian, information_from_hessians,
    information_matrix, minor, rotation_directions, HessianSource, InformationConfig,
    InformationForm, StepInformation,
};
pub use kalman::{
    kalman_filter, log_likelihood_from, rts_smoother, smooth, FilterResult, SmootherResult,
};
pub use lqr::{init_controller_lqr, riccati_gains, AffineStep};
pub use mstep::{bounded_ascent, central_gradient, m_step, MStepConfig, MStepOutcome, StepAscent};
pub use qfunc::{q_function, q_initial, q_step, q_term, q_terms, q_value_clm};
