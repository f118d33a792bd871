use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ecm::{EcmParams, Profile};
use crate::error::{Error, Result};

use super::ekf::{cm_adapt, coulomb_count_step, ekf_correct, ekf_predict, mle_adapt, LinearizedModel};
use super::{FilterState, StepRecord, WindowStats};

/// Floor on the covariance-matching measurement variance, V^2.
pub const DEFAULT_SIGMA2_FLOOR: f64 = 1e-8;

/// Default sliding-window length.
pub const DEFAULT_WINDOW: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[serde(rename = "cc")]
    CoulombCounting,
    Ekf,
    AekfMle,
    AekfCm,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::CoulombCounting,
        EstimatorKind::Ekf,
        EstimatorKind::AekfMle,
        EstimatorKind::AekfCm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::CoulombCounting => "cc",
            EstimatorKind::Ekf => "ekf",
            EstimatorKind::AekfMle => "aekf-mle",
            EstimatorKind::AekfCm => "aekf-cm",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, EstimatorKind::AekfMle | EstimatorKind::AekfCm)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator kind `{s}` (expected cc, ekf, aekf-mle or aekf-cm)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Sliding-window capacity N.
    pub window: usize,
    /// Steps before adaptation starts; `None` means `window`.
    pub warmup: Option<usize>,
    /// Keep pushing residuals but never touch the noise covariances.
    pub freeze_adaptation: bool,
    /// Lower bound on the adapted measurement variance, V^2, for both
    /// adaptive kinds. Noiseless input otherwise drives the MLE estimate
    /// to zero and the innovation variance below zero by roundoff.
    pub sigma2_floor: f64,
    /// Check symmetry/PSD of P after every step (eigenvalue floor
    /// `-1e-10 * trace`).
    pub validate_covariance: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            warmup: None,
            freeze_adaptation: false,
            sigma2_floor: DEFAULT_SIGMA2_FLOOR,
            validate_covariance: false,
        }
    }
}

impl EstimatorConfig {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or(self.window)
    }
}

/// Online SoC estimator. Feed one `(dt, i, v)` sample at a time; the first
/// sample only corrects, later ones predict with the previous current
/// over `dt` and then correct.
///
/// Adaptive kinds run predict, correct, window push, adapt; the adapted
/// covariances take effect on the next sample.
#[derive(Debug, Clone)]
pub struct Estimator<'a> {
    kind: EstimatorKind,
    params: &'a EcmParams,
    fs: FilterState,
    config: EstimatorConfig,
    window: Option<WindowStats>,
    last_current: Option<f64>,
    steps: usize,
    model: Option<(f64, LinearizedModel<'a>)>,
    last_record: Option<StepRecord>,
}

impl<'a> Estimator<'a> {
    pub fn new(kind: EstimatorKind, params: &'a EcmParams, init: FilterState, config: EstimatorConfig) -> Result<Self> {
        let window = if kind.is_adaptive() {
            Some(WindowStats::new(config.window).ok_or_else(|| Error::validation("window", "must be at least 1"))?)
        } else {
            None
        };
        Ok(Self {
            kind,
            params,
            fs: init,
            config,
            window,
            last_current: None,
            steps: 0,
            model: None,
            last_record: None,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn state(&self) -> &FilterState {
        &self.fs
    }

    pub fn last_record(&self) -> Option<&StepRecord> {
        self.last_record.as_ref()
    }

    pub fn soc(&self) -> f64 {
        self.fs.x_hat.z
    }

    fn model(&mut self, dt: f64) -> Result<LinearizedModel<'a>> {
        match &self.model {
            Some((cached_dt, m)) if *cached_dt == dt => Ok(m.clone()),
            _ => {
                let m = LinearizedModel::new(self.params, dt)?;
                self.model = Some((dt, m.clone()));
                Ok(m)
            }
        }
    }

    /// Processes one sample and returns the SoC estimate at it. `dt` is
    /// the time since the previous sample and is ignored on the first.
    pub fn observe(&mut self, dt: f64, i: f64, v: f64) -> Result<f64> {
        let step = self.steps;
        self.steps += 1;
        let prev = self.last_current.replace(i);

        if self.kind == EstimatorKind::CoulombCounting {
            if let Some(i_prev) = prev {
                if !(dt > 0.0) {
                    return Err(Error::Domain(format!("dt must be positive, got {dt}")));
                }
                self.fs.x_hat.z = coulomb_count_step(self.fs.x_hat.z, i_prev, dt, self.params.q_max);
            }
            return Ok(self.fs.x_hat.z);
        }

        let model = self.model(if prev.is_some() { dt } else { crate::ecm::DEFAULT_DT })?;
        if let Some(i_prev) = prev {
            self.fs = ekf_predict(&self.fs, &model, i_prev).0;
        }
        let (fs, record) =
            ekf_correct(&self.fs, &model, i, v).map_err(|e| Error::NumericalFault(format!("step {step}: {e}")))?;
        self.fs = fs;

        if let Some(window) = self.window.as_mut() {
            window.push(&record);
            if !self.config.freeze_adaptation && self.steps >= self.config.warmup_steps() {
                self.fs = match self.kind {
                    EstimatorKind::AekfMle => {
                        let mut fs = mle_adapt(window, &record, &self.fs);
                        fs.sigma2_meas = fs.sigma2_meas.max(self.config.sigma2_floor);
                        fs
                    }
                    EstimatorKind::AekfCm => cm_adapt(window, &record, &self.fs, self.config.sigma2_floor),
                    _ => unreachable!("window exists only for adaptive kinds"),
                };
            }
        }
        self.last_record = Some(record);

        if self.config.validate_covariance {
            self.fs
                .check_covariance(1e-10)
                .map_err(|e| Error::NumericalFault(format!("step {step}: {e}")))?;
        }
        Ok(self.fs.x_hat.z)
    }
}

/// Runs `kind` over a whole profile. Coulomb counting ignores the voltage
/// column; every other kind requires it.
pub fn estimator_run(
    kind: EstimatorKind,
    params: &EcmParams,
    profile: &Profile,
    init: &FilterState,
    config: &EstimatorConfig,
) -> Result<Vec<f64>> {
    let voltage = match (profile.voltage(), kind) {
        (Some(v), _) => Some(v),
        (None, EstimatorKind::CoulombCounting) => None,
        (None, _) => return Err(Error::validation("voltage", format!("{kind} needs a voltage column"))),
    };
    let mut est = Estimator::new(kind, params, init.clone(), config.clone())?;
    let current = profile.current();
    (0..profile.len())
        .map(|k| {
            let v = voltage.map_or(f64::NAN, |v| v[k]);
            est.observe(profile.dt_before(k), current[k], v)
        })
        .collect()
}
