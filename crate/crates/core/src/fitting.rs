//! Cell characterisation: OCV table from slow charge/discharge sweeps and
//! Levenberg-Marquardt fitting of the passive components against an
//! incremental-current test.

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::ecm::{simulate, uniform_grid, CellState, EcmParams, OcvTable, Profile};
use crate::error::{Error, Result};

/// Voltage-vs-SoC curves recorded during low-current discharge and charge.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvSweep {
    pub charge_curve: Vec<(f64, f64)>,
    pub discharge_curve: Vec<(f64, f64)>,
}

impl OcvSweep {
    /// Builds the two curves from measured low-current profiles. SoC is the
    /// cumulative charge normalised by the total moved, so the charge curve
    /// runs 0 -> 1 and the discharge curve 1 -> 0. Also returns the mean
    /// total charge moved (an estimate of `q_max`, coulombs).
    pub fn from_profiles(charge: &Profile, discharge: &Profile) -> Result<(Self, f64)> {
        let (charge_curve, q_charge) = normalised_curve(charge, "charge")?;
        let (discharge_curve, q_discharge) = normalised_curve(discharge, "discharge")?;
        if q_charge <= 0.0 {
            return Err(Error::Fitting("charge sweep moves no net positive charge".into()));
        }
        if q_discharge >= 0.0 {
            return Err(Error::Fitting("discharge sweep moves no net negative charge".into()));
        }
        Ok((
            Self {
                charge_curve,
                discharge_curve,
            },
            0.5 * (q_charge - q_discharge),
        ))
    }
}

fn normalised_curve(profile: &Profile, name: &str) -> Result<(Vec<(f64, f64)>, f64)> {
    let v = profile
        .voltage()
        .ok_or_else(|| Error::validation("voltage", format!("{name} sweep needs a voltage column")))?;
    let i = profile.current();
    let mut q = Vec::with_capacity(profile.len());
    let mut acc = 0.0;
    q.push(0.0);
    for k in 1..profile.len() {
        acc += i[k - 1] * profile.dt_before(k);
        q.push(acc);
    }
    let total = acc;
    if total == 0.0 {
        return Ok((Vec::new(), 0.0));
    }
    let start = if total > 0.0 { 0.0 } else { 1.0 };
    let curve = q
        .iter()
        .zip(v)
        .map(|(&qk, &vk)| ((start + qk / total.abs()).clamp(0.0, 1.0), vk))
        .collect();
    Ok((curve, total))
}

// Linear interpolation of a (z, v) curve onto `grid`; the curve must be
// monotone in z and span [0, 1].
fn resample(curve: &[(f64, f64)], grid: &[f64], name: &str) -> Result<Vec<f64>> {
    if curve.len() < 2 {
        return Err(Error::Fitting(format!("{name} curve needs at least two points")));
    }
    let mut pts = curve.to_vec();
    if pts[0].0 > pts[pts.len() - 1].0 {
        pts.reverse();
    }
    if let Some(k) = pts.windows(2).position(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Fitting(format!(
            "{name} curve SoC is not strictly monotone at point {}",
            k + 1
        )));
    }
    const EDGE: f64 = 1e-9;
    if pts[0].0 > EDGE || pts[pts.len() - 1].0 < 1.0 - EDGE {
        return Err(Error::Fitting(format!(
            "{name} curve covers [{}, {}], not [0, 1]",
            pts[0].0,
            pts[pts.len() - 1].0
        )));
    }
    Ok(grid
        .iter()
        .map(|&z| {
            let upper = pts.partition_point(|p| p.0 <= z).clamp(1, pts.len() - 1);
            let (a, b) = (pts[upper - 1], pts[upper]);
            let w = ((z - a.0) / (b.0 - a.0)).clamp(0.0, 1.0);
            a.1 + (b.1 - a.1) * w
        })
        .collect())
}

/// Resamples both curves onto `{0, spacing, ..., 1}` and averages them.
pub fn build_ocv_table(sweep: &OcvSweep, spacing: f64) -> Result<OcvTable> {
    let grid = uniform_grid(spacing)?;
    let charge = resample(&sweep.charge_curve, &grid, "charge")?;
    let discharge = resample(&sweep.discharge_curve, &grid, "discharge")?;
    let values: Vec<f64> = charge.iter().zip(&discharge).map(|(c, d)| 0.5 * (c + d)).collect();
    if let Some(k) = values.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Fitting(format!(
            "averaged OCV not increasing at node {} (SoC {})",
            k + 1,
            grid[k + 1]
        )));
    }
    OcvTable::new(grid, values)
}

/// The five fitted components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassiveComponents {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl PassiveComponents {
    pub fn to_array(self) -> [f64; 5] {
        [self.r0, self.r1, self.r2, self.c1, self.c2]
    }

    pub fn from_array(p: [f64; 5]) -> Self {
        Self {
            r0: p[0],
            r1: p[1],
            r2: p[2],
            c1: p[3],
            c2: p[4],
        }
    }

    pub fn of(params: &EcmParams) -> Self {
        Self::from_array(params.passive())
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self::from_array(self.to_array().map(|p| p * factor))
    }

    /// Orders the RC branches so that `r1 c1 <= r2 c2`.
    pub fn canonical(self) -> Self {
        if self.r1 * self.c1 > self.r2 * self.c2 {
            Self {
                r1: self.r2,
                c1: self.c2,
                r2: self.r1,
                c2: self.c1,
                ..self
            }
        } else {
            self
        }
    }

    pub fn into_params(self, ocv: OcvTable, q_max: f64) -> EcmParams {
        EcmParams {
            r0: self.r0,
            r1: self.r1,
            c1: self.c1,
            r2: self.r2,
            c2: self.c2,
            q_max,
            ocv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iterations: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step is this small relative to the parameters
    /// (both in log space).
    pub step_tolerance: f64,
    /// Forward-difference step, relative, in log-parameter space.
    pub fd_step: f64,
    /// Floors on `(r0, r1, r2, c1, c2)`.
    pub parameter_lower_bounds: [f64; 5],
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            fd_step: 1e-6,
            parameter_lower_bounds: [1e-9; 5],
        }
    }
}

impl LmOptions {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("initial_damping", self.initial_damping),
            ("damping_up", self.damping_up),
            ("damping_down", self.damping_down),
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("fd_step", self.fd_step),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be at least 1"));
        }
        if self.parameter_lower_bounds.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::validation("parameter_lower_bounds", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    DampingOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: PassiveComponents,
    /// Sum of squared voltage residuals, V^2.
    pub final_rss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Infinity norm of the log-space gradient at the returned parameters.
    pub gradient_norm: f64,
    /// Objective after the initial evaluation and after every accepted step.
    pub trace: Vec<f64>,
}

/// Voltages the model predicts for `profile` under `params`.
pub fn predict_voltage(params: &EcmParams, profile: &Profile, initial: CellState) -> Result<Vec<f64>> {
    Ok(simulate(params, initial, profile)?.into_iter().map(|s| s.voltage).collect())
}

/// Constant-current pulses alternating with rests, `n_pulses` of each,
/// starting with a pulse. Each segment has `round(duration / dt)` samples.
pub fn make_incremental_current_profile(
    pulse_current: f64,
    pulse_duration: f64,
    rest_duration: f64,
    n_pulses: usize,
    dt: f64,
) -> Result<Profile> {
    for (name, v) in [
        ("pulse_current", pulse_current),
        ("pulse_duration", pulse_duration),
        ("rest_duration", rest_duration),
        ("dt", dt),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::validation(name, format!("must be positive, got {v}")));
        }
    }
    if n_pulses == 0 {
        return Err(Error::validation("n_pulses", "must be at least 1"));
    }
    let pulse = ((pulse_duration / dt).round() as usize).max(1);
    let rest = ((rest_duration / dt).round() as usize).max(1);
    let mut current = Vec::with_capacity(n_pulses * (pulse + rest));
    for _ in 0..n_pulses {
        current.extend(std::iter::repeat_n(pulse_current, pulse));
        current.extend(std::iter::repeat_n(0.0, rest));
    }
    Profile::uniform(dt, current, None)
}

/// Initial state for fitting: relaxed RC branches and the SoC obtained by
/// inverting the OCV at the first zero-current sample.
pub fn initial_state_from_rest(profile: &Profile, ocv: &OcvTable) -> Result<CellState> {
    let v = profile
        .voltage()
        .ok_or_else(|| Error::validation("voltage", "profile needs a voltage column"))?;
    let k = profile
        .current()
        .iter()
        .position(|&i| i == 0.0)
        .ok_or_else(|| Error::Fitting("profile has no rest sample to anchor the initial SoC".into()))?;
    if k != 0 {
        return Err(Error::Fitting(format!(
            "profile must begin at rest; first zero-current sample is {k}"
        )));
    }
    Ok(CellState::at_rest(ocv.soc_from_ocv(v[0])))
}

struct Problem<'a> {
    profile: &'a Profile,
    measured: &'a [f64],
    template: EcmParams,
    initial: CellState,
}

impl Problem<'_> {
    fn residuals(&self, theta: &SVector<f64, 5>) -> Option<DVector<f64>> {
        let params = self.template.with_passive(theta.map(f64::exp).into());
        let predicted = predict_voltage(&params, self.profile, self.initial).ok()?;
        let r = DVector::from_iterator(
            predicted.len(),
            predicted.iter().zip(self.measured).map(|(p, m)| p - m),
        );
        r.iter().all(|x| x.is_finite()).then_some(r)
    }
}

/// Least-squares fit of `(r0, r1, r2, c1, c2)` to the measured voltage of
/// `profile`, with the OCV table and `q_max` held fixed.
///
/// Works in log-parameter space with a forward-difference Jacobian, so the
/// parameters stay positive and ohms and farads are on a common scale.
/// Non-convergence is reported through [`FitReport::converged`], not as an
/// error.
pub fn fit_passive_components(
    profile: &Profile,
    ocv: &OcvTable,
    q_max: f64,
    init: PassiveComponents,
    opts: &LmOptions,
) -> Result<FitReport> {
    let initial = initial_state_from_rest(profile, ocv)?;
    fit_passive_components_from(profile, ocv, q_max, init, initial, opts)
}

/// As [`fit_passive_components`] with an explicit initial cell state.
pub fn fit_passive_components_from(
    profile: &Profile,
    ocv: &OcvTable,
    q_max: f64,
    init: PassiveComponents,
    initial: CellState,
    opts: &LmOptions,
) -> Result<FitReport> {
    opts.validate()?;
    let measured = profile
        .voltage()
        .ok_or_else(|| Error::validation("voltage", "profile needs a voltage column"))?;
    let template = init.into_params(ocv.clone(), q_max);
    template.validate()?;
    let problem = Problem {
        profile,
        measured,
        template,
        initial,
    };

    let lower = SVector::<f64, 5>::from(opts.parameter_lower_bounds.map(f64::ln));
    let mut theta = SVector::<f64, 5>::from(init.to_array().map(f64::ln)).sup(&lower);
    let mut r = problem
        .residuals(&theta)
        .ok_or_else(|| Error::Fitting("initial guess produces a non-finite prediction".into()))?;
    let mut cost = r.norm_squared();
    let mut trace = vec![cost];
    let mut damping = opts.initial_damping;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    let mut gradient_norm;

    loop {
        let jac = jacobian(&problem, &theta, &r, opts.fd_step)?;
        let gradient: SVector<f64, 5> = (jac.transpose() * &r).fixed_rows::<5>(0).into();
        gradient_norm = gradient.amax();
        if gradient_norm < opts.gradient_tolerance {
            stop = StopReason::GradientTolerance;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        let normal: SMatrix<f64, 5, 5> = (jac.transpose() * &jac).fixed_view::<5, 5>(0, 0).into();
        let diag_floor = normal.diagonal().amax() * 1e-12;

        let mut accepted = None;
        while accepted.is_none() {
            if damping > 1e16 {
                break;
            }
            let mut lhs = normal;
            for j in 0..5 {
                lhs[(j, j)] += damping * normal[(j, j)].max(diag_floor);
            }
            let Some(chol) = Cholesky::new(lhs) else {
                damping *= opts.damping_up;
                continue;
            };
            let delta = chol.solve(&(-gradient));
            let candidate = (theta + delta).sup(&lower);
            match problem.residuals(&candidate) {
                Some(r_new) if r_new.norm_squared() < cost => {
                    damping = (damping / opts.damping_down).max(1e-15);
                    accepted = Some((candidate, r_new));
                }
                _ => damping *= opts.damping_up,
            }
        }
        let Some((candidate, r_new)) = accepted else {
            stop = StopReason::DampingOverflow;
            break;
        };
        let step = (candidate - theta).norm();
        theta = candidate;
        r = r_new;
        cost = r.norm_squared();
        trace.push(cost);
        if step < opts.step_tolerance * (theta.norm() + opts.step_tolerance) {
            stop = StopReason::StepTolerance;
            gradient_norm = {
                let jac = jacobian(&problem, &theta, &r, opts.fd_step)?;
                (jac.transpose() * &r).amax()
            };
            break;
        }
    }

    let fitted = PassiveComponents::from_array(theta.map(f64::exp).into()).canonical();
    Ok(FitReport {
        params: fitted,
        final_rss: cost,
        iterations,
        converged: matches!(stop, StopReason::GradientTolerance | StopReason::StepTolerance),
        stop_reason: stop,
        gradient_norm,
        trace,
    })
}

fn jacobian(problem: &Problem<'_>, theta: &SVector<f64, 5>, r: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(r.len(), 5);
    for j in 0..5 {
        let h = rel_step * theta[j].abs().max(1.0);
        let mut shifted = *theta;
        shifted[j] += h;
        let r_shift = problem
            .residuals(&shifted)
            .ok_or_else(|| Error::Fitting("non-finite prediction while differentiating".into()))?;
        jac.set_column(j, &((r_shift - r) / h));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::reference_ocv;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (EcmParams, Profile) {
        let truth = EcmParams::reference_cell();
        let rest = Profile::uniform(1.0, vec![0.0; 60], None).unwrap();
        let pulses = make_incremental_current_profile(2.5, 360.0, 1200.0, 10, 1.0).unwrap();
        let profile = rest.concat(&pulses, 1.0).unwrap();
        let v = predict_voltage(&truth, &profile, CellState::at_rest(0.2)).unwrap();
        (truth, profile.with_voltage(v).unwrap())
    }

    fn sweep_from(f: impl Fn(f64) -> f64, hysteresis: f64, n: usize) -> OcvSweep {
        let zs: Vec<f64> = (0..=n).map(|k| (k as f64 / n as f64).powf(1.1)).collect();
        OcvSweep {
            charge_curve: zs.iter().map(|&z| (z, f(z) + hysteresis)).collect(),
            discharge_curve: zs.iter().rev().map(|&z| (z, f(z) - hysteresis)).collect(),
        }
    }

    #[test]
    fn identical_curves_average_to_either() {
        let curve: Vec<(f64, f64)> = (0..=10).map(|k| (k as f64 / 10.0, 3.0 + k as f64 * 0.1)).collect();
        let sweep = OcvSweep {
            charge_curve: curve.clone(),
            discharge_curve: curve.clone(),
        };
        let table = build_ocv_table(&sweep, 0.1).unwrap();
        for (k, v) in table.ocv_values().iter().enumerate() {
            assert_relative_eq!(*v, curve[k].1, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_hysteresis_cancels() {
        let eps = 0.004;
        let base = |z: f64| 3.1 + z;
        let sweep = OcvSweep {
            charge_curve: (0..=20).map(|k| k as f64 / 20.0).map(|z| (z, base(z) + 2.0 * eps)).collect(),
            discharge_curve: (0..=20).map(|k| k as f64 / 20.0).map(|z| (z, base(z))).collect(),
        };
        let table = build_ocv_table(&sweep, 0.05).unwrap();
        for (z, v) in table.soc_grid().iter().zip(table.ocv_values()) {
            assert_relative_eq!(*v, base(*z) + eps, epsilon = 1e-12);
        }
    }

    #[test]
    fn recovers_known_curve_within_one_millivolt() {
        let sweep = sweep_from(reference_ocv, 0.010, 1000);
        let table = build_ocv_table(&sweep, 0.02).unwrap();
        assert_eq!(table.len(), 51);
        for (z, v) in table.soc_grid().iter().zip(table.ocv_values()) {
            assert!((v - reference_ocv(*z)).abs() < 1e-3, "node {z}: {v}");
        }
    }

    #[test]
    fn build_is_idempotent() {
        let table = build_ocv_table(&sweep_from(reference_ocv, 0.01, 500), 0.02).unwrap();
        let curve: Vec<(f64, f64)> = table.soc_grid().iter().copied().zip(table.ocv_values().iter().copied()).collect();
        let again = build_ocv_table(
            &OcvSweep {
                charge_curve: curve.clone(),
                discharge_curve: curve,
            },
            0.02,
        )
        .unwrap();
        assert_eq!(table, again);
    }

    #[test]
    fn non_monotone_average_names_the_node() {
        let mut sweep = sweep_from(|z| 3.0 + z, 0.0, 100);
        for p in sweep.charge_curve.iter_mut().chain(sweep.discharge_curve.iter_mut()) {
            if (p.0 - 0.5).abs() < 0.051 {
                p.1 = 3.2;
            }
        }
        let err = build_ocv_table(&sweep, 0.1).unwrap_err().to_string();
        assert!(err.contains("node"), "{err}");
    }

    #[test]
    fn partial_coverage_rejected() {
        let sweep = OcvSweep {
            charge_curve: vec![(0.1, 3.0), (1.0, 4.0)],
            discharge_curve: vec![(0.0, 3.0), (1.0, 4.0)],
        };
        assert!(build_ocv_table(&sweep, 0.1).is_err());
        assert!(build_ocv_table(&sweep_from(|z| 3.0 + z, 0.0, 10), 0.3).is_err());
    }

    #[test]
    fn sweep_from_profiles_normalises_charge() {
        let p = EcmParams::reference_cell();
        let n = 36_000;
        let discharge = Profile::uniform(1.0, vec![-0.5; n], None).unwrap();
        let v = predict_voltage(&p, &discharge, CellState::at_rest(1.0)).unwrap();
        let discharge = discharge.with_voltage(v).unwrap();
        let charge = Profile::uniform(1.0, vec![0.5; n], None).unwrap();
        let v = predict_voltage(&p, &charge, CellState::at_rest(0.0)).unwrap();
        let charge = charge.with_voltage(v).unwrap();
        let (sweep, q) = OcvSweep::from_profiles(&charge, &discharge).unwrap();
        assert_relative_eq!(q, 0.5 * (n - 1) as f64, max_relative = 1e-12);
        assert_eq!(sweep.charge_curve[0].0, 0.0);
        assert_eq!(sweep.discharge_curve[0].0, 1.0);
        let table = build_ocv_table(&sweep, 0.02).unwrap();
        // Low-current ohmic and RC drops cancel in the average.
        for (z, v) in table.soc_grid().iter().zip(table.ocv_values()).skip(1).take(49) {
            assert!((v - p.ocv.lookup(*z).unwrap()).abs() < 2e-3);
        }
    }

    #[test]
    fn predict_voltage_zero_current_is_flat() {
        let p = EcmParams::reference_cell();
        let profile = Profile::uniform(1.0, vec![0.0; 20], None).unwrap();
        let v = predict_voltage(&p, &profile, CellState::at_rest(0.4)).unwrap();
        assert!(v.iter().all(|&x| x == p.ocv.lookup(0.4).unwrap()));
    }

    #[test]
    fn predict_voltage_self_consistent() {
        let (truth, profile) = fixture();
        let v = predict_voltage(&truth, &profile, CellState::at_rest(0.2)).unwrap();
        assert_eq!(v.as_slice(), profile.voltage().unwrap());
    }

    // A 10 % r0 error shows up only through the ohmic term: residual is
    // 0.1 r0 i at every sample and jumps by 0.1 r0 |di| at step edges.
    #[test]
    fn perturbed_r0_residual_is_ohmic() {
        let truth = EcmParams::reference_cell();
        let mut perturbed = truth.clone();
        perturbed.r0 *= 1.1;
        let current: Vec<f64> = (0..400).map(|k| if (k / 100) % 2 == 0 { 0.0 } else { 3.0 }).collect();
        let profile = Profile::uniform(1.0, current.clone(), None).unwrap();
        let a = predict_voltage(&truth, &profile, CellState::at_rest(0.5)).unwrap();
        let b = predict_voltage(&perturbed, &profile, CellState::at_rest(0.5)).unwrap();
        for k in 0..400 {
            assert_relative_eq!(b[k] - a[k], 0.1 * truth.r0 * current[k], epsilon = 1e-12);
        }
        let jump = (b[100] - a[100]) - (b[99] - a[99]);
        assert_relative_eq!(jump, 0.1 * truth.r0 * 3.0, epsilon = 1e-12);
    }

    #[test]
    fn incremental_profile_shape() {
        let one = make_incremental_current_profile(1.0, 10.0, 20.0, 1, 1.0).unwrap();
        assert_eq!(one.len(), 30);
        assert!(one.current()[..10].iter().all(|&i| i == 1.0));
        assert!(one.current()[10..].iter().all(|&i| i == 0.0));

        let p = make_incremental_current_profile(1.0, 360.0, 60.0, 10, 1.0).unwrap();
        assert_eq!(p.len(), 4200);
        let mut distinct: Vec<f64> = p.current().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct, vec![0.0, 1.0]);

        let mut cell = EcmParams::reference_cell();
        cell.q_max = 3600.0;
        let charge: f64 = p.current().iter().map(|i| i * 1.0 / cell.q_max).sum();
        assert_relative_eq!(charge, 1.0, max_relative = 1e-12);
        let traj = simulate(&cell, CellState::at_rest(0.0), &p).unwrap();
        assert_relative_eq!(traj.last().unwrap().state.z, 1.0, max_relative = 1e-12);
        assert!(make_incremental_current_profile(1.0, 1.0, 1.0, 0, 1.0).is_err());
        assert!(make_incremental_current_profile(-1.0, 1.0, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn fit_from_truth_converges_immediately() {
        let (truth, profile) = fixture();
        let report = fit_passive_components(&profile, &truth.ocv, truth.q_max, PassiveComponents::of(&truth), &LmOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 2);
        assert!(report.final_rss <= 1e-12);
    }

    #[test]
    fn fit_recovers_parameters_from_double_init() {
        let (truth, profile) = fixture();
        let init = PassiveComponents::of(&truth).scaled(2.0);
        let report = fit_passive_components(&profile, &truth.ocv, truth.q_max, init, &LmOptions::default()).unwrap();
        assert!(report.converged, "{report:?}");
        for (got, want) in report.params.to_array().iter().zip(truth.passive()) {
            assert_relative_eq!(*got, want, max_relative = 0.01);
        }
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn swapped_branches_fit_to_canonical_order() {
        let (truth, profile) = fixture();
        let t = PassiveComponents::of(&truth);
        let swapped = PassiveComponents {
            r1: t.r2 * 1.3,
            c1: t.c2 * 0.8,
            r2: t.r1 * 0.7,
            c2: t.c1 * 1.2,
            ..t
        };
        let report = fit_passive_components(&profile, &truth.ocv, truth.q_max, swapped, &LmOptions::default()).unwrap();
        let p = report.params;
        assert!(p.r1 * p.c1 <= p.r2 * p.c2);
        assert_relative_eq!(p.r1, t.r1, max_relative = 0.01);
        assert_relative_eq!(p.c2, t.c2, max_relative = 0.01);
    }

    #[test]
    fn max_iterations_reports_non_convergence() {
        let (truth, profile) = fixture();
        let opts = LmOptions {
            max_iterations: 1,
            ..LmOptions::default()
        };
        let report = fit_passive_components(&profile, &truth.ocv, truth.q_max, PassiveComponents::of(&truth).scaled(3.0), &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.stop_reason, StopReason::MaxIterations);
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn fit_needs_rest_start_and_voltage() {
        let (truth, profile) = fixture();
        let init = PassiveComponents::of(&truth);
        let no_v = Profile::new(profile.timestamps().to_vec(), profile.current().to_vec(), None).unwrap();
        assert!(fit_passive_components(&no_v, &truth.ocv, truth.q_max, init, &LmOptions::default()).is_err());
        let pulses = make_incremental_current_profile(1.0, 10.0, 10.0, 2, 1.0).unwrap();
        let v = predict_voltage(&truth, &pulses, CellState::at_rest(0.5)).unwrap();
        let pulses = pulses.with_voltage(v).unwrap();
        assert!(fit_passive_components(&pulses, &truth.ocv, truth.q_max, init, &LmOptions::default()).is_err());
    }

    #[test]
    fn r0_robust_to_millivolt_noise() {
        let (truth, profile) = fixture();
        let normal = rand_distr::Normal::new(0.0, 1e-3).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = profile.voltage().unwrap().iter().map(|v| v + rng.sample(normal)).collect();
            let p = profile.clone().with_voltage(noisy).unwrap();
            // Initial SoC from the noiseless anchor: the noise study targets
            // the passive components, not the OCV inversion.
            let report = fit_passive_components_from(
                &p,
                &truth.ocv,
                truth.q_max,
                PassiveComponents::of(&truth).scaled(1.5),
                CellState::at_rest(0.2),
                &LmOptions::default(),
            )
            .unwrap();
            assert_relative_eq!(report.params.r0, truth.r0, max_relative = 0.05);
        }
    }
}
