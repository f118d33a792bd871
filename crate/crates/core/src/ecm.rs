//! Second-order equivalent circuit model ("improved Thevenin" cell).
//!
//! The state is `(z, v_r1, v_r2)`: state of charge and the voltages across
//! the two RC branches. Positive current charges the cell.
//!
//! ```text
//! z'    = z + dt / q_max * i
//! v_rj' = exp(-dt / (rj cj)) v_rj + rj (1 - exp(-dt / (rj cj))) i
//! V     = OCV(z) + r0 i + v_r1 + v_r2
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval used when a profile has no preceding timestamp.
pub const DEFAULT_DT: f64 = 1.0;

/// Default OCV table spacing in SoC units (51 nodes).
pub const DEFAULT_OCV_SPACING: f64 = 0.02;

/// Sampled OCV-SoC curve, linearly interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcvTable {
    soc_grid: Vec<f64>,
    ocv_values: Vec<f64>,
}

impl OcvTable {
    pub fn new(soc_grid: Vec<f64>, ocv_values: Vec<f64>) -> Result<Self> {
        if soc_grid.len() < 2 {
            return Err(Error::validation("soc_grid", "needs at least two nodes"));
        }
        if soc_grid.len() != ocv_values.len() {
            return Err(Error::validation(
                "ocv_values",
                format!(
                    "length {} does not match soc_grid length {}",
                    ocv_values.len(),
                    soc_grid.len()
                ),
            ));
        }
        if soc_grid[0] != 0.0 || soc_grid[soc_grid.len() - 1] != 1.0 {
            return Err(Error::validation("soc_grid", "must start at 0 and end at 1"));
        }
        if let Some(k) = soc_grid.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(
                "soc_grid",
                format!("not strictly increasing at node {}", k + 1),
            ));
        }
        if let Some(k) = ocv_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation("ocv_values", format!("non-finite value at node {k}")));
        }
        if let Some(k) = ocv_values.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(
                "ocv_values",
                format!("not strictly increasing at node {}", k + 1),
            ));
        }
        Ok(Self { soc_grid, ocv_values })
    }

    /// Samples `f` on the uniform grid `{0, spacing, ..., 1}`.
    pub fn from_fn(spacing: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let grid = uniform_grid(spacing)?;
        let values = grid.iter().map(|&z| f(z)).collect();
        Self::new(grid, values)
    }

    pub fn soc_grid(&self) -> &[f64] {
        &self.soc_grid
    }

    pub fn ocv_values(&self) -> &[f64] {
        &self.ocv_values
    }

    pub fn len(&self) -> usize {
        self.soc_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soc_grid.is_empty()
    }

    // Index of the segment containing z; interior nodes belong to the
    // segment on their right, z = 1 to the last segment.
    fn segment(&self, z: f64) -> usize {
        let upper = self.soc_grid.partition_point(|&g| g <= z);
        upper.saturating_sub(1).min(self.soc_grid.len() - 2)
    }

    fn check_domain(z: f64) -> Result<()> {
        if (0.0..=1.0).contains(&z) {
            Ok(())
        } else {
            Err(Error::Domain(format!("SoC {z} outside [0, 1]")))
        }
    }

    /// OCV at `z`; rejects `z` outside `[0, 1]`.
    pub fn lookup(&self, z: f64) -> Result<f64> {
        Self::check_domain(z)?;
        Ok(self.interpolate(z))
    }

    /// Slope of the segment containing `z`.
    pub fn derivative(&self, z: f64) -> Result<f64> {
        Self::check_domain(z)?;
        Ok(self.slope(z))
    }

    /// OCV at `z` clamped into `[0, 1]`.
    pub fn lookup_clamped(&self, z: f64) -> f64 {
        self.interpolate(z.clamp(0.0, 1.0))
    }

    pub fn derivative_clamped(&self, z: f64) -> f64 {
        self.slope(z.clamp(0.0, 1.0))
    }

    fn interpolate(&self, z: f64) -> f64 {
        let k = self.segment(z);
        let (z0, z1) = (self.soc_grid[k], self.soc_grid[k + 1]);
        let (v0, v1) = (self.ocv_values[k], self.ocv_values[k + 1]);
        if z == z0 {
            return v0;
        }
        if z == z1 {
            return v1;
        }
        v0 + (v1 - v0) * (z - z0) / (z1 - z0)
    }

    fn slope(&self, z: f64) -> f64 {
        let k = self.segment(z);
        (self.ocv_values[k + 1] - self.ocv_values[k]) / (self.soc_grid[k + 1] - self.soc_grid[k])
    }

    /// Inverse of the interpolated curve. Voltages outside the table range
    /// map to 0 or 1.
    pub fn soc_from_ocv(&self, v: f64) -> f64 {
        let n = self.ocv_values.len();
        if v <= self.ocv_values[0] {
            return 0.0;
        }
        if v >= self.ocv_values[n - 1] {
            return 1.0;
        }
        let upper = self.ocv_values.partition_point(|&o| o <= v);
        let k = upper - 1;
        let (v0, v1) = (self.ocv_values[k], self.ocv_values[k + 1]);
        let (z0, z1) = (self.soc_grid[k], self.soc_grid[k + 1]);
        z0 + (z1 - z0) * (v - v0) / (v1 - v0)
    }
}

/// `{0, spacing, ..., 1}`; `spacing` must divide 1 evenly.
pub fn uniform_grid(spacing: f64) -> Result<Vec<f64>> {
    if !(spacing > 0.0 && spacing <= 1.0) {
        return Err(Error::validation("spacing", format!("{spacing} not in (0, 1]")));
    }
    let n = (1.0 / spacing).round();
    if (n * spacing - 1.0).abs() > 1e-9 {
        return Err(Error::validation(
            "spacing",
            format!("{spacing} does not divide 1 evenly"),
        ));
    }
    let n = n as usize;
    Ok((0..=n).map(|k| k as f64 / n as f64).collect())
}

/// Model parameters of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcmParams {
    pub r0: f64,
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
    /// Coulombs.
    pub q_max: f64,
    pub ocv: OcvTable,
}

impl EcmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("r0", self.r0),
            ("r1", self.r1),
            ("c1", self.c1),
            ("r2", self.r2),
            ("c2", self.c2),
            ("q_max", self.q_max),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::validation(name, format!("must be positive and finite, got {value}")));
            }
        }
        if !(self.tau1() > 0.0 && self.tau1().is_finite()) {
            return Err(Error::validation("r1*c1", "time constant must be positive"));
        }
        if !(self.tau2() > 0.0 && self.tau2().is_finite()) {
            return Err(Error::validation("r2*c2", "time constant must be positive"));
        }
        // Re-check the table: deserialised tables bypass `OcvTable::new`.
        OcvTable::new(self.ocv.soc_grid.clone(), self.ocv.ocv_values.clone())?;
        Ok(())
    }

    pub fn tau1(&self) -> f64 {
        self.r1 * self.c1
    }

    pub fn tau2(&self) -> f64 {
        self.r2 * self.c2
    }

    /// Passive components in the fixed order `(r0, r1, r2, c1, c2)`.
    pub fn passive(&self) -> [f64; 5] {
        [self.r0, self.r1, self.r2, self.c1, self.c2]
    }

    pub fn with_passive(&self, p: [f64; 5]) -> Self {
        Self {
            r0: p[0],
            r1: p[1],
            r2: p[2],
            c1: p[3],
            c2: p[4],
            ..self.clone()
        }
    }

    /// Every passive component multiplied by `1 + rel`.
    pub fn scaled_passive(&self, rel: f64) -> Self {
        self.with_passive(self.passive().map(|p| p * (1.0 + rel)))
    }

    /// A 5 Ah NMC-like cell used by fixtures, the benchmark and the CLI
    /// defaults. Time constants 30 s and 600 s.
    pub fn reference_cell() -> Self {
        Self {
            r0: 0.015,
            r1: 0.010,
            c1: 3_000.0,
            r2: 0.020,
            c2: 30_000.0,
            q_max: 5.0 * 3600.0,
            ocv: OcvTable::from_fn(DEFAULT_OCV_SPACING, reference_ocv)
                .expect("reference OCV curve is monotone"),
        }
    }

    /// Exact discrete-time transition over `dt` with input `i`.
    pub fn step(&self, state: &CellState, i: f64, dt: f64) -> Result<CellState> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        let a1 = (-dt / self.tau1()).exp();
        let a2 = (-dt / self.tau2()).exp();
        let z_raw = state.z + dt / self.q_max * i;
        let z = z_raw.clamp(0.0, 1.0);
        Ok(CellState {
            z,
            v_r1: a1 * state.v_r1 + self.r1 * (1.0 - a1) * i,
            v_r2: a2 * state.v_r2 + self.r2 * (1.0 - a2) * i,
            saturated: z != z_raw,
        })
    }

    /// Terminal voltage; the SoC is clamped before the OCV lookup.
    pub fn terminal_voltage(&self, state: &CellState, i: f64) -> f64 {
        self.ocv.lookup_clamped(state.z) + self.r0 * i + state.v_r1 + state.v_r2
    }
}

/// Smooth monotone OCV curve behind [`EcmParams::reference_cell`]: 3.0 V
/// empty, 4.2 V full, steep below 20 % SoC.
pub fn reference_ocv(z: f64) -> f64 {
    3.0 + 0.7 * z + 0.35 * (1.0 - (-10.0 * z).exp()) + 0.15 * z * z * z
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    pub z: f64,
    pub v_r1: f64,
    pub v_r2: f64,
    /// Set when the last transition clamped `z` into `[0, 1]`.
    pub saturated: bool,
}

impl CellState {
    pub fn at_rest(z: f64) -> Self {
        Self {
            z,
            ..Self::default()
        }
    }
}

/// Timestamped current (and optionally voltage) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    timestamps: Vec<f64>,
    current: Vec<f64>,
    voltage: Option<Vec<f64>>,
}

impl Profile {
    pub fn new(timestamps: Vec<f64>, current: Vec<f64>, voltage: Option<Vec<f64>>) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(Error::validation("timestamps", "profile is empty"));
        }
        if current.len() != timestamps.len() {
            return Err(Error::validation(
                "current",
                format!("length {} != {} timestamps", current.len(), timestamps.len()),
            ));
        }
        if let Some(v) = &voltage {
            if v.len() != timestamps.len() {
                return Err(Error::validation(
                    "voltage",
                    format!("length {} != {} timestamps", v.len(), timestamps.len()),
                ));
            }
            if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::validation("voltage", format!("non-finite value at sample {k}")));
            }
        }
        if let Some(k) = timestamps.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation("timestamps", format!("non-finite value at sample {k}")));
        }
        if let Some(k) = current.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation("current", format!("non-finite value at sample {k}")));
        }
        if let Some(k) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(
                "timestamps",
                format!("not strictly increasing at sample {}", k + 1),
            ));
        }
        Ok(Self {
            timestamps,
            current,
            voltage,
        })
    }

    /// Samples at `t = k * dt`, starting from 0.
    pub fn uniform(dt: f64, current: Vec<f64>, voltage: Option<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::validation("dt", format!("must be positive, got {dt}")));
        }
        let timestamps = (0..current.len()).map(|k| k as f64 * dt).collect();
        Self::new(timestamps, current, voltage)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn voltage(&self) -> Option<&[f64]> {
        self.voltage.as_deref()
    }

    /// Interval between sample `k - 1` and sample `k`; [`DEFAULT_DT`] for
    /// the first sample.
    pub fn dt_before(&self, k: usize) -> f64 {
        if k == 0 {
            DEFAULT_DT
        } else {
            self.timestamps[k] - self.timestamps[k - 1]
        }
    }

    pub fn with_voltage(mut self, voltage: Vec<f64>) -> Result<Self> {
        self.voltage = None;
        Self::new(self.timestamps, self.current, Some(voltage))
    }

    pub fn with_current(self, current: Vec<f64>) -> Result<Self> {
        Self::new(self.timestamps, current, self.voltage)
    }

    /// Appends `other`, shifted so that its first sample follows the last
    /// sample of `self` by `gap` seconds. Voltage is kept only if both have it.
    pub fn concat(&self, other: &Profile, gap: f64) -> Result<Self> {
        let offset = self.timestamps[self.len() - 1] + gap - other.timestamps[0];
        let mut timestamps = self.timestamps.clone();
        timestamps.extend(other.timestamps.iter().map(|t| t + offset));
        let mut current = self.current.clone();
        current.extend_from_slice(&other.current);
        let voltage = match (&self.voltage, &other.voltage) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self::new(timestamps, current, voltage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSample {
    pub state: CellState,
    pub voltage: f64,
}

/// Runs the model over `profile`. Element `k` holds the state at `t_k`
/// and the terminal voltage under `i_k`; the transition from `k` to
/// `k + 1` uses `i_k` over `t_{k+1} - t_k`.
pub fn simulate(params: &EcmParams, initial: CellState, profile: &Profile) -> Result<Vec<SimSample>> {
    let current = profile.current();
    let mut out = Vec::with_capacity(profile.len());
    let mut state = initial;
    for k in 0..profile.len() {
        if k > 0 {
            state = params.step(&state, current[k - 1], profile.dt_before(k))?;
        }
        out.push(SimSample {
            state,
            voltage: params.terminal_voltage(&state, current[k]),
        });
    }
    Ok(out)
}
