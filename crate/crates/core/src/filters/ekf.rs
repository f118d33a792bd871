use nalgebra::{Matrix3, RowVector3, SymmetricEigen, Vector3};

use crate::ecm::{CellState, EcmParams, OcvTable};
use crate::error::{Error, Result};

use super::WindowStats;

/// Default process-noise covariance, `diag(1e-10, 1e-8, 1e-8)`.
pub fn default_process_noise() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1e-10, 1e-8, 1e-8))
}

/// Default measurement-noise variance in V^2.
pub const DEFAULT_MEAS_VAR: f64 = 1e-4;

/// Default initial state covariance, `diag(1e-2, 1e-4, 1e-4)`.
pub fn default_state_covariance() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1e-2, 1e-4, 1e-4))
}

/// Cell model linearised around the current estimate for one step of
/// length `dt`. The state transition is already linear; only the output
/// map needs the OCV slope.
#[derive(Debug, Clone)]
pub struct LinearizedModel<'a> {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    /// Feedthrough, equal to `r0`.
    pub d: f64,
    ocv: &'a OcvTable,
}

impl<'a> LinearizedModel<'a> {
    pub fn new(params: &'a EcmParams, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        let a2 = (-dt / params.tau1()).exp();
        let a3 = (-dt / params.tau2()).exp();
        Ok(Self {
            a: Matrix3::from_diagonal(&Vector3::new(1.0, a2, a3)),
            b: Vector3::new(dt / params.q_max, params.r1 * (1.0 - a2), params.r2 * (1.0 - a3)),
            d: params.r0,
            ocv: &params.ocv,
        })
    }

    /// Output Jacobian `[OCV'(z), 1, 1]`.
    pub fn c_row(&self, x: &Vector3<f64>) -> RowVector3<f64> {
        RowVector3::new(self.ocv.derivative_clamped(x[0]), 1.0, 1.0)
    }

    /// Nonlinear output map without the feedthrough term.
    pub fn h(&self, x: &Vector3<f64>) -> f64 {
        self.ocv.lookup_clamped(x[0]) + x[1] + x[2]
    }

    pub fn output(&self, x: &Vector3<f64>, i: f64) -> f64 {
        self.h(x) + self.d * i
    }
}

pub(crate) fn to_vector(s: &CellState) -> Vector3<f64> {
    Vector3::new(s.z, s.v_r1, s.v_r2)
}

pub(crate) fn to_state(x: &Vector3<f64>) -> CellState {
    CellState {
        z: x[0],
        v_r1: x[1],
        v_r2: x[2],
        saturated: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: CellState,
    pub p: Matrix3<f64>,
    /// Process-noise covariance.
    pub sigma: Matrix3<f64>,
    /// Measurement-noise variance, V^2.
    pub sigma2_meas: f64,
}

impl FilterState {
    pub fn new(x_hat: CellState, p: Matrix3<f64>, sigma: Matrix3<f64>, sigma2_meas: f64) -> Result<Self> {
        let fs = Self {
            x_hat,
            p,
            sigma,
            sigma2_meas,
        };
        check_psd(&fs.p, 1e-12).map_err(|r| Error::validation("p", r))?;
        check_psd(&fs.sigma, 1e-12).map_err(|r| Error::validation("sigma", r))?;
        if !(sigma2_meas >= 0.0 && sigma2_meas.is_finite()) {
            return Err(Error::validation("sigma2_meas", format!("must be >= 0, got {sigma2_meas}")));
        }
        Ok(fs)
    }

    /// Estimate at rest with SoC `z` and the default covariances.
    pub fn with_defaults(z: f64) -> Self {
        Self {
            x_hat: CellState::at_rest(z),
            p: default_state_covariance(),
            sigma: default_process_noise(),
            sigma2_meas: DEFAULT_MEAS_VAR,
        }
    }

    /// Symmetry and eigenvalue floor `-floor_rel * trace(P)` on `P`.
    pub fn check_covariance(&self, floor_rel: f64) -> Result<()> {
        check_psd(&self.p, floor_rel).map_err(Error::NumericalFault)
    }
}

/// Symmetric to 1e-12 (relative to the largest entry) with eigenvalues no
/// lower than `-floor_rel * trace`.
pub fn check_psd(m: &Matrix3<f64>, floor_rel: f64) -> std::result::Result<(), String> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err("matrix has non-finite entries".into());
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(format!("asymmetry {asym:e} exceeds tolerance"));
    }
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let floor = -floor_rel * m.trace().abs();
    let min = eig.min();
    if min < floor {
        return Err(format!("eigenvalue {min:e} below floor {floor:e}"));
    }
    Ok(())
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Quantities from one correction that drive the covariance adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Pre-fit residual (innovation), volts.
    pub e_minus: f64,
    /// Post-fit residual, volts.
    pub e_plus: f64,
    pub k_gain: Vector3<f64>,
    /// `C P+ C^T`, V^2.
    pub cpc_term: f64,
    /// `C P- C^T`, V^2. Used by covariance matching.
    pub cpc_prior: f64,
}

/// Coulomb counting, clamped to `[0, 1]`.
pub fn coulomb_count_step(z: f64, i: f64, dt: f64, q_max: f64) -> f64 {
    (z + dt * i / q_max).clamp(0.0, 1.0)
}

/// Time update. Returns the propagated filter state and the predicted
/// cell state.
pub fn ekf_predict(fs: &FilterState, model: &LinearizedModel<'_>, i: f64) -> (FilterState, CellState) {
    let x = model.a * to_vector(&fs.x_hat) + model.b * i;
    let p = symmetrize(&(model.a * fs.p * model.a.transpose() + fs.sigma));
    let predicted = to_state(&x);
    (
        FilterState {
            x_hat: predicted,
            p,
            ..fs.clone()
        },
        predicted,
    )
}

/// Measurement update with the Joseph-form covariance. Residuals use the
/// full OCV curve; the linearisation only enters the gain and covariance.
pub fn ekf_correct(
    fs: &FilterState,
    model: &LinearizedModel<'_>,
    i: f64,
    v_measured: f64,
) -> Result<(FilterState, StepRecord)> {
    let x_prior = to_vector(&fs.x_hat);
    let c = model.c_row(&x_prior);
    let pct = fs.p * c.transpose();
    let cpc_prior = (c * pct)[0];
    let s = cpc_prior + fs.sigma2_meas;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NumericalFault(format!(
            "innovation variance {s:e} is not positive"
        )));
    }
    let k = pct / s;
    let e_minus = v_measured - model.output(&x_prior, i);

    let mut x = x_prior + k * e_minus;
    x[0] = x[0].clamp(0.0, 1.0);

    let ikc = Matrix3::identity() - k * c;
    let p = ikc * fs.p * ikc.transpose() + k * k.transpose() * fs.sigma2_meas;
    let p = symmetrize(&p);

    let e_plus = v_measured - model.output(&x, i);
    let cpc_term = (c * p * c.transpose())[0].max(0.0);

    Ok((
        FilterState {
            x_hat: to_state(&x),
            p,
            ..fs.clone()
        },
        StepRecord {
            e_minus,
            e_plus,
            k_gain: k,
            cpc_term,
            cpc_prior,
        },
    ))
}

/// Maximum-likelihood noise adaptation over the window: the process noise
/// is the current gain sandwiching the mean squared innovation, the
/// measurement noise the mean of `e_plus^2 + C P+ C^T`.
///
/// `ws` must already contain `last`.
pub fn mle_adapt(ws: &WindowStats, last: &StepRecord, fs: &FilterState) -> FilterState {
    let innovation = ws.mean_prior_sq();
    FilterState {
        sigma: last.k_gain * last.k_gain.transpose() * innovation,
        sigma2_meas: ws.mean_posterior(),
        ..fs.clone()
    }
}

/// Innovation-based covariance matching. The measurement variance is the
/// windowed innovation variance minus `C P- C^T`, floored at
/// `sigma2_floor`.
pub fn cm_adapt(ws: &WindowStats, last: &StepRecord, fs: &FilterState, sigma2_floor: f64) -> FilterState {
    let innovation = ws.mean_prior_sq();
    FilterState {
        sigma: last.k_gain * last.k_gain.transpose() * innovation,
        sigma2_meas: (innovation - last.cpc_prior).max(sigma2_floor),
        ..fs.clone()
    }
}
