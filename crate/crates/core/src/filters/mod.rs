//! SoC estimators: Coulomb counting plus the EKF family, including adaptive EKFs with
//! maximum-likelihood (MLE) or covariance-matching (CM) noise adaptation.

mod ekf;
mod estimator;
mod window;

pub use ekf::{
    check_psd, cm_adapt, coulomb_count_step, default_process_noise, default_state_covariance, ekf_correct,
    ekf_predict, mle_adapt, FilterState, LinearizedModel, StepRecord, DEFAULT_MEAS_VAR,
};
pub use estimator::{
    estimator_run, Estimator, EstimatorConfig, EstimatorKind, DEFAULT_SIGMA2_FLOOR, DEFAULT_WINDOW,
};
pub use window::{WindowStats, RESYNC_INTERVAL};
