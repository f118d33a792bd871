//! Monte Carlo evaluation of the estimators on synthetic drive cycles.
//!
//! Ground truth comes from the cell model run with the true parameters.
//! The estimators see AWGN-corrupted current and voltage, a wrong initial
//! SoC, and (optionally) perturbed model parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{simulate, CellState, EcmParams, Profile};
use crate::error::{Error, Result};
use crate::filters::{
    default_process_noise, estimator_run, EstimatorConfig, EstimatorKind, FilterState, DEFAULT_MEAS_VAR,
    DEFAULT_WINDOW,
};

/// Mean absolute SoC error in percent over the samples selected by `mask`
/// (all samples when `None`).
pub fn mae(estimate: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::validation(
            "estimate",
            format!("length {} != truth length {}", estimate.len(), truth.len()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != truth.len() {
            return Err(Error::validation("mask", "length differs from truth"));
        }
    }
    let (sum, n) = estimate
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(k, _)| mask.is_none_or(|m| m[*k]))
        .fold((0.0, 0usize), |(s, n), (_, (e, t))| (s + (e - t).abs(), n + 1));
    if n == 0 {
        return Err(Error::validation("mask", "selects no samples"));
    }
    Ok(100.0 * sum / n as f64)
}

/// Shape of the synthetic drive cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveProfileOptions {
    /// Largest segment current as a multiple of the capacity in Ah.
    pub max_c_rate: f64,
    pub capacity_ah: f64,
    pub min_segment: f64,
    pub max_segment: f64,
    /// Probability that a non-rest segment discharges.
    pub discharge_probability: f64,
    pub rest_probability: f64,
}

impl Default for DriveProfileOptions {
    fn default() -> Self {
        Self {
            max_c_rate: 1.0,
            capacity_ah: 5.0,
            min_segment: 10.0,
            max_segment: 120.0,
            discharge_probability: 0.7,
            rest_probability: 0.15,
        }
    }
}

/// Piecewise-constant pseudo-random current with mixed charge and
/// discharge segments, net discharging on average. Deterministic per seed.
pub fn make_drive_profile(duration: f64, dt: f64, seed: u64, opts: &DriveProfileOptions) -> Result<Profile> {
    if !(dt > 0.0 && duration > dt) {
        return Err(Error::validation("duration", format!("need duration > dt > 0, got {duration}, {dt}")));
    }
    if !(opts.max_c_rate >= 0.0 && opts.capacity_ah > 0.0) {
        return Err(Error::validation("max_c_rate", "must be non-negative with positive capacity"));
    }
    if !(opts.min_segment > 0.0 && opts.max_segment >= opts.min_segment) {
        return Err(Error::validation("min_segment", "segment bounds must be positive and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration / dt).floor() as usize + 1;
    let i_max = opts.max_c_rate * opts.capacity_ah;
    let mut current = Vec::with_capacity(n);
    while current.len() < n {
        let length = rng.gen_range(opts.min_segment..=opts.max_segment);
        let samples = ((length / dt).round() as usize).max(1);
        let u: f64 = rng.gen();
        let magnitude = if i_max > 0.0 { rng.gen_range(0.2 * i_max..=i_max) } else { 0.0 };
        let i = if u < opts.rest_probability {
            0.0
        } else if rng.gen_bool(opts.discharge_probability.clamp(0.0, 1.0)) {
            -magnitude
        } else {
            0.6 * magnitude
        };
        current.extend(std::iter::repeat_n(i, samples.min(n - current.len())));
    }
    Profile::uniform(dt, current, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// A^2
    pub current_noise_var: f64,
    /// V^2
    pub voltage_noise_var: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.current_noise_var >= 0.0 && self.voltage_noise_var >= 0.0) {
            return Err(Error::validation("noise", "variances must be non-negative"));
        }
        Ok(())
    }

    /// Both variances multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            current_noise_var: self.current_noise_var * factor,
            voltage_noise_var: self.voltage_noise_var * factor,
            ..*self
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            current_noise_var: 1e-3,
            voltage_noise_var: 1e-5,
            seed: 0,
        }
    }
}

/// Filter-side initialisation shared by every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSetup {
    /// Magnitude of the initial SoC error. The sign is drawn per trial in a
    /// sweep; `initial_state` adds it as a positive offset.
    pub init_soc_error: f64,
    /// Diagonal of the initial state covariance.
    pub p0_diag: [f64; 3],
    pub sigma0_diag: [f64; 3],
    pub sigma2_meas0: f64,
    pub window: usize,
    /// Check that P stays symmetric PSD after every filter step.
    pub validate_covariance: bool,
}

impl Default for FilterSetup {
    fn default() -> Self {
        let s = default_process_noise();
        Self {
            init_soc_error: 0.02,
            p0_diag: [1e-6, 1e-4, 1e-4],
            sigma0_diag: [s[(0, 0)], s[(1, 1)], s[(2, 2)]],
            sigma2_meas0: DEFAULT_MEAS_VAR,
            window: DEFAULT_WINDOW,
            validate_covariance: false,
        }
    }
}

impl FilterSetup {
    pub fn initial_state(&self, true_soc: f64) -> FilterState {
        self.initial_state_at(true_soc + self.init_soc_error)
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            validate_covariance: self.validate_covariance,
            ..EstimatorConfig::with_window(self.window)
        }
    }

    /// Initial filter state with the SoC estimate `z0`.
    pub fn initial_state_at(&self, z0: f64) -> FilterState {
        FilterState {
            x_hat: CellState::at_rest(z0.clamp(0.0, 1.0)),
            p: Matrix3::from_diagonal(&Vector3::from(self.p0_diag)),
            sigma: Matrix3::from_diagonal(&Vector3::from(self.sigma0_diag)),
            sigma2_meas: self.sigma2_meas0,
        }
    }
}

/// Clean truth of one trial plus the unit-variance noise draws that are
/// scaled into measurement noise.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub profile: Profile,
    pub truth_soc: Vec<f64>,
    pub truth_voltage: Vec<f64>,
    pub current_draws: Vec<f64>,
    pub voltage_draws: Vec<f64>,
}

impl TrialData {
    pub fn generate(params_true: &EcmParams, profile: Profile, initial_soc: f64, noise_seed: u64) -> Result<Self> {
        let traj = simulate(params_true, CellState::at_rest(initial_soc), &profile)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let n = profile.len();
        let current_draws = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let voltage_draws = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            truth_soc: traj.iter().map(|s| s.state.z).collect(),
            truth_voltage: traj.iter().map(|s| s.voltage).collect(),
            profile,
            current_draws,
            voltage_draws,
        })
    }

    /// Measured current and voltage under the given noise variances.
    pub fn measured(&self, current_var: f64, voltage_var: f64) -> Result<Profile> {
        let (si, sv) = (current_var.sqrt(), voltage_var.sqrt());
        let i = self.profile.current().iter().zip(&self.current_draws).map(|(i, n)| i + si * n).collect();
        let v = self.truth_voltage.iter().zip(&self.voltage_draws).map(|(v, n)| v + sv * n).collect();
        Profile::new(self.profile.timestamps().to_vec(), i, Some(v))
    }
}

/// One estimator run against a simulated truth. Returns the MAE in percent.
pub fn run_trial(
    params_true: &EcmParams,
    params_filter: &EcmParams,
    profile: &Profile,
    initial_soc: f64,
    noise: &NoiseSpec,
    setup: &FilterSetup,
    kind: EstimatorKind,
) -> Result<f64> {
    noise.validate()?;
    let data = TrialData::generate(params_true, profile.clone(), initial_soc, noise.seed)?;
    let measured = data.measured(noise.current_noise_var, noise.voltage_noise_var)?;
    let est = estimator_run(
        kind,
        params_filter,
        &measured,
        &setup.initial_state(initial_soc),
        &setup.estimator_config(),
    )?;
    mae(&est, &data.truth_soc, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Values are window sizes N.
    WindowSize,
    /// Values are log10 of a common factor applied to both base noise
    /// variances.
    NoisePower,
    /// Values are percent relative error applied to every passive
    /// component of the filter's model.
    ParameterError,
}

impl SweepAxis {
    fn stream_id(self) -> u64 {
        match self {
            SweepAxis::WindowSize => 1,
            SweepAxis::NoisePower => 2,
            SweepAxis::ParameterError => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WindowSize => "window",
            SweepAxis::NoisePower => "noise",
            SweepAxis::ParameterError => "param-error",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(SweepAxis::WindowSize),
            "noise" => Ok(SweepAxis::NoisePower),
            "param-error" => Ok(SweepAxis::ParameterError),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected window, noise or param-error)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub axis_values: Vec<f64>,
    pub n_trials: usize,
    pub base_noise: NoiseSpec,
    pub estimators: Vec<EstimatorKind>,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, axis_values: Vec<f64>, n_trials: usize) -> Self {
        Self {
            axis,
            axis_values,
            n_trials,
            base_noise: NoiseSpec::default(),
            estimators: EstimatorKind::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::validation("n_trials", "must be at least 1"));
        }
        if self.axis_values.is_empty() {
            return Err(Error::validation("axis_values", "must not be empty"));
        }
        if self.estimators.is_empty() {
            return Err(Error::validation("estimators", "must not be empty"));
        }
        if self.axis_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("axis_values", "must be finite"));
        }
        if self.axis == SweepAxis::WindowSize
            && self.axis_values.iter().any(|v| *v < 1.0 || v.fract() != 0.0)
        {
            return Err(Error::validation("axis_values", "window sizes must be positive integers"));
        }
        if self.axis == SweepAxis::ParameterError && self.axis_values.iter().any(|v| *v <= -100.0) {
            return Err(Error::validation("axis_values", "parameter error must exceed -100 %"));
        }
        self.base_noise.validate()
    }
}

/// Everything about the simulated world that a sweep does not vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub params_true: EcmParams,
    pub duration: f64,
    pub dt: f64,
    pub drive: DriveProfileOptions,
    pub initial_soc: f64,
    pub filter: FilterSetup,
    /// Standard deviation of the independent per-trial relative error on
    /// each passive component of the filter's model; keeps a model
    /// mismatch present even at zero swept parameter error.
    pub passive_jitter: f64,
    /// Standard deviation of the per-trial relative error on the filter's
    /// capacity.
    pub capacity_jitter: f64,
    pub master_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            params_true: EcmParams::reference_cell(),
            duration: 7200.0,
            dt: 1.0,
            drive: DriveProfileOptions::default(),
            initial_soc: 0.9,
            filter: FilterSetup::default(),
            passive_jitter: 0.05,
            capacity_jitter: 0.05,
            master_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub axis_value: f64,
    pub estimator: EstimatorKind,
    pub mae_mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Per-trial MAEs in trial order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub axis: SweepAxis,
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    pub fn row(&self, axis_value: f64, estimator: EstimatorKind) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis_value && r.estimator == estimator)
    }

    /// Mean MAE of `estimator` along the axis, in axis-value order.
    pub fn curve(&self, estimator: EstimatorKind) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.estimator == estimator)
            .map(|r| (r.axis_value, r.mae_mean))
            .collect()
    }
}

/// Mean and normal-approximation 95 % interval.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, mean, mean);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// RNG for trial `trial` of `axis`, derived from the master seed and the
/// `(axis, trial)` pair only, so results do not depend on axis-value order.
pub fn trial_rng(master_seed: u64, axis: SweepAxis, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((axis.stream_id() << 48) ^ trial as u64);
    rng
}

struct TrialWorld {
    data: TrialData,
    params_filter: EcmParams,
    soc_estimate0: f64,
}

fn prepare_trial(config: &BenchConfig, axis: SweepAxis, trial: usize) -> Result<TrialWorld> {
    let mut rng = trial_rng(config.master_seed, axis, trial);
    let profile_seed: u64 = rng.gen();
    let noise_seed: u64 = rng.gen();
    let jitter: [f64; 5] = std::array::from_fn(|_| {
        let n: f64 = rng.sample(StandardNormal);
        (1.0 + config.passive_jitter * n).max(0.05)
    });
    let capacity_scale = {
        let n: f64 = rng.sample(StandardNormal);
        (1.0 + config.capacity_jitter * n).max(0.05)
    };
    let init_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let profile = make_drive_profile(config.duration, config.dt, profile_seed, &config.drive)?;
    let data = TrialData::generate(&config.params_true, profile, config.initial_soc, noise_seed)?;
    let mut passive = config.params_true.passive();
    for (p, j) in passive.iter_mut().zip(jitter) {
        *p *= j;
    }
    let mut params_filter = config.params_true.with_passive(passive);
    params_filter.q_max *= capacity_scale;
    let soc_estimate0 = config.initial_soc + init_sign * config.filter.init_soc_error;
    Ok(TrialWorld {
        data,
        params_filter,
        soc_estimate0,
    })
}

fn evaluate(world: &TrialWorld, spec: &SweepSpec, config: &BenchConfig, axis_value: f64) -> Result<Vec<f64>> {
    let mut noise = spec.base_noise;
    let mut params = world.params_filter.clone();
    let mut setup = config.filter.clone();
    match spec.axis {
        SweepAxis::WindowSize => setup.window = axis_value as usize,
        SweepAxis::NoisePower => noise = noise.scaled(10f64.powf(axis_value)),
        SweepAxis::ParameterError => params = params.scaled_passive(axis_value / 100.0),
    }
    params.validate()?;
    let measured = world.data.measured(noise.current_noise_var, noise.voltage_noise_var)?;
    let init = setup.initial_state_at(world.soc_estimate0);
    let est_config = setup.estimator_config();
    spec.estimators
        .iter()
        .map(|&kind| {
            let est = estimator_run(kind, &params, &measured, &init, &est_config)?;
            mae(&est, &world.data.truth_soc, None)
        })
        .collect()
}

/// Runs every (axis value, estimator) cell over `n_trials` trials in
/// parallel and reduces in trial order.
pub fn run_sweep(spec: &SweepSpec, config: &BenchConfig) -> Result<BenchResult> {
    spec.validate()?;
    config.params_true.validate()?;
    // per trial: [axis value][estimator]
    let per_trial: Vec<Vec<Vec<f64>>> = (0..spec.n_trials)
        .into_par_iter()
        .map(|trial| {
            let world = prepare_trial(config, spec.axis, trial)?;
            spec.axis_values
                .iter()
                .map(|&v| evaluate(&world, spec, config, v))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Config(format!("trial {trial}: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(spec.axis_values.len() * spec.estimators.len());
    for (a, &axis_value) in spec.axis_values.iter().enumerate() {
        for (e, &estimator) in spec.estimators.iter().enumerate() {
            let samples: Vec<f64> = per_trial.iter().map(|t| t[a][e]).collect();
            let (mae_mean, ci_lo, ci_hi) = mean_ci95(&samples);
            rows.push(BenchRow {
                axis_value,
                estimator,
                mae_mean,
                ci_lo,
                ci_hi,
                samples,
            });
        }
    }
    Ok(BenchResult { axis: spec.axis, rows })
}
