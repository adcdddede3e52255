//! Fixed-step closed-loop simulation of the 2x2 dead-time plant.
//!
//! The plant is integrated as four first-order difference equations
//! `y_ij(k+1) = -a_ij y_ij(k) + b_ij u_j(k - h_j)` on deviation variables
//! around the configured operating point. Each step:
//!
//! 1. read `y(k)` (plus output disturbances),
//! 2. update the PID state from `e(k) = r(k) - y(k)`,
//! 3. evaluate the controller,
//! 4. clamp to the input bounds,
//! 5. push into the per-channel delay buffers,
//! 6. add input disturbances,
//! 7. advance the plant.
//!
//! When an input saturates the integral of the matching channel is frozen
//! for that step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fopdt_model::{
    discretize, discretize_as, ContinuousPlant, DiscretePlant, PidState, ReferenceSource, SetpointSequence,
};
use crate::gpc_core::{design_gains, CostWeights};
use crate::pid_schedule::{build_schedule, control_from_entry, GainSchedule};

const DIVERGENCE_LIMIT: f64 = 1e9;
/// Relative floor on |y1| below which the measured ratio is not trusted.
const RATIO_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl InputBounds {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self { lo: [lo; 2], hi: [hi; 2] }
    }

    pub fn contains(&self, u: [f64; 2]) -> bool {
        (0..2).all(|i| u[i] >= self.lo[i] && u[i] <= self.hi[i])
    }

    fn clamp(&self, u: [f64; 2]) -> ([f64; 2], [bool; 2]) {
        let mut out = u;
        let mut saturated = [false; 2];
        for i in 0..2 {
            if u[i] < self.lo[i] {
                out[i] = self.lo[i];
                saturated[i] = true;
            } else if u[i] > self.hi[i] {
                out[i] = self.hi[i];
                saturated[i] = true;
            }
        }
        (out, saturated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    #[default]
    Output,
    Input,
}

/// Additive step (or pulse, when `end` is set) scaled per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub magnitude: f64,
    #[serde(default = "unit_gains")]
    pub gains: [f64; 2],
    pub onset: f64,
    #[serde(default)]
    pub end: Option<f64>,
    #[serde(default)]
    pub injection: Injection,
}

fn unit_gains() -> [f64; 2] {
    [1.0, 1.0]
}

impl Disturbance {
    fn value(&self, t: f64) -> [f64; 2] {
        let active = t >= self.onset - 1e-9 && self.end.is_none_or(|end| t < end - 1e-9);
        if active {
            [self.magnitude * self.gains[0], self.magnitude * self.gains[1]]
        } else {
            [0.0, 0.0]
        }
    }
}

/// A setpoint change at `time`. `r2 = None` means `r2 = alpha r1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointStep {
    pub time: f64,
    pub r1: f64,
    #[serde(default)]
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub plant_design: ContinuousPlant,
    pub plant_true: ContinuousPlant,
    /// Piecewise-constant setpoints in deviation units; zero before the first step.
    pub setpoints: Vec<SetpointStep>,
    pub alpha: f64,
    pub duration: f64,
    pub input_bounds: Option<InputBounds>,
    pub disturbances: Vec<Disturbance>,
    /// Absolute output values corresponding to zero deviation.
    pub operating_point: [f64; 2],
    /// Initial subprocess outputs `y_ij(0)` in deviation units, in free
    /// response (zero past inputs).
    pub initial_outputs: [[f64; 2]; 2],
}

impl Scenario {
    pub fn new(plant: ContinuousPlant, setpoints: Vec<SetpointStep>, alpha: f64, duration: f64) -> Self {
        Self {
            plant_true: plant.clone(),
            plant_design: plant,
            setpoints,
            alpha,
            duration,
            input_bounds: None,
            disturbances: Vec::new(),
            operating_point: [0.0; 2],
            initial_outputs: [[0.0; 2]; 2],
        }
    }

    /// Simulation truth scaled by `factor` relative to the design plant.
    pub fn with_mismatch(mut self, factor: f64) -> Self {
        self.plant_true = self.plant_design.with_mismatch(factor);
        self
    }

    pub fn with_bounds(mut self, bounds: InputBounds) -> Self {
        self.input_bounds = Some(bounds);
        self
    }

    pub fn with_disturbance(mut self, d: Disturbance) -> Self {
        self.disturbances.push(d);
        self
    }

    pub fn with_operating_point(mut self, op: [f64; 2]) -> Self {
        self.operating_point = op;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.plant_design.validate()?;
        self.plant_true.validate()?;
        if !(self.duration > 0.0) {
            return Err(Error::InvalidScenario(format!("duration {} must be positive", self.duration)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidScenario(format!("alpha {} must be positive", self.alpha)));
        }
        if (self.plant_design.sample_time - self.plant_true.sample_time).abs() > 1e-12 {
            return Err(Error::InvalidScenario("design and true plants use different sample times".into()));
        }
        if let Some(b) = &self.input_bounds {
            if (0..2).any(|i| !(b.lo[i] < b.hi[i])) {
                return Err(Error::InvalidScenario(format!("input bounds {b:?} need lo < hi")));
            }
        }
        Ok(())
    }

    pub fn sample_time(&self) -> f64 {
        self.plant_design.sample_time
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.sample_time()).round() as usize
    }

    fn step_index(&self, time: f64) -> usize {
        (time / self.sample_time() - 1e-9).ceil().max(0.0) as usize
    }

    /// Nominal `[r1, r2]` at every sample, with `r2 = alpha r1` unless given.
    pub fn setpoint_sequence(&self) -> SetpointSequence {
        let n = self.steps() + 2;
        let mut values = vec![[0.0, 0.0]; n];
        let mut steps = self.setpoints.clone();
        steps.sort_by(|a, b| a.time.total_cmp(&b.time));
        for s in &steps {
            let from = self.step_index(s.time).min(n - 1);
            let r2 = s.r2.unwrap_or(self.alpha * s.r1);
            for v in &mut values[from..] {
                *v = [s.r1, r2];
            }
        }
        SetpointSequence::new(values)
    }

    /// Size of the setpoint step on channel 1 (final minus initial value).
    pub fn step_size(&self) -> [f64; 2] {
        let seq = self.setpoint_sequence();
        let first = seq.setpoint(0);
        let last = seq.setpoint(seq.len() as i64);
        [last[0] - first[0], last[1] - first[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    /// Integral gain per second of accumulated error.
    pub ki: f64,
}

#[derive(Debug, Clone)]
pub enum ControllerSpec {
    PredictivePid {
        schedule: GainSchedule,
    },
    /// Independent PI loops with `r2 = alpha r1`.
    ParallelRatioPid {
        gains: [PiGains; 2],
    },
    /// PI loops with slave setpoint `r2 = alpha (g r1 + (1 - g) y1)`.
    BlendStation {
        gains: [PiGains; 2],
        gamma_prime: f64,
    },
    /// Predictive PID whose master setpoint is lowered by
    /// `k_sv (alpha y1 - y2) Ts / alpha` whenever `|y2 / y1 - alpha| > alpha_b`.
    SetpointVariation {
        schedule: GainSchedule,
        alpha_b: f64,
        k_sv: f64,
    },
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::PredictivePid { .. } => "predictive_pid",
            ControllerSpec::ParallelRatioPid { .. } => "parallel_pid",
            ControllerSpec::BlendStation { .. } => "blend_station",
            ControllerSpec::SetpointVariation { .. } => "setpoint_variation",
        }
    }
}

/// Designs the predictive-PID schedule for a scenario against its design plant.
pub fn predictive_schedule(scenario: &Scenario, weights: &CostWeights) -> Result<GainSchedule> {
    scenario.validate()?;
    let dp = discretize(&scenario.plant_design)?;
    let ss = crate::fopdt_model::assemble_state_space(&dp);
    let gains = design_gains(&ss, weights)?;
    build_schedule(&gains, &ss, &scenario.setpoint_sequence(), scenario.steps())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abs_peak: f64,
    pub mean: f64,
    pub rms: f64,
}

pub fn metrics(series: &[f64]) -> Result<Metrics> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = series.len() as f64;
    let abs_peak = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = series.iter().sum::<f64>() / n;
    let rms = (series.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    Ok(Metrics { abs_peak, mean, rms })
}

/// Controller-side values at one step of a predictive run, in internal input
/// order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveTrace {
    pub pid: PidState,
    pub u_prev_delayed: [f64; 2],
    pub feedforward: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub controller: String,
    pub sample_time: f64,
    pub alpha: f64,
    pub time: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Applied (saturated) inputs.
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// Controller outputs before saturation.
    pub raw_u1: Vec<f64>,
    pub raw_u2: Vec<f64>,
    pub e_m: Vec<f64>,
    pub metrics: Metrics,
    pub trace: Vec<PredictiveTrace>,
}

impl SimResult {
    /// First time after which `|e_m|` stays within `band`, or `None` if it
    /// never settles.
    pub fn ratio_recovery_time(&self, band: f64) -> Option<f64> {
        settle_time(&self.time, &self.e_m, 0.0, band)
    }

    /// Settling time of output `ch` to its final setpoint within `band`.
    pub fn settling_time(&self, ch: usize, band: f64) -> Option<f64> {
        let (y, r) = if ch == 0 { (&self.y1, &self.r1) } else { (&self.y2, &self.r2) };
        let target = *r.last()?;
        settle_time(&self.time, y, target, band)
    }

    pub fn peak_abs_input(&self) -> f64 {
        self.u1.iter().chain(&self.u2).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn settle_time(time: &[f64], series: &[f64], target: f64, band: f64) -> Option<f64> {
    match series.iter().rposition(|v| (v - target).abs() > band) {
        None => time.first().copied(),
        Some(i) if i + 1 < series.len() => Some(time[i + 1]),
        Some(_) => None,
    }
}

/// Per-subprocess plant state with input history.
struct PlantState {
    dp: DiscretePlant,
    y: [[f64; 2]; 2],
    /// Controller-applied inputs, as seen by the delay buffers.
    applied: [Vec<f64>; 2],
    /// Inputs reaching the plant (applied plus input disturbances).
    driven: [Vec<f64>; 2],
}

impl PlantState {
    fn new(dp: DiscretePlant, initial: [[f64; 2]; 2]) -> Self {
        Self {
            dp,
            y: initial,
            applied: [Vec::new(), Vec::new()],
            driven: [Vec::new(), Vec::new()],
        }
    }

    fn outputs(&self) -> [f64; 2] {
        [self.y[0][0] + self.y[0][1], self.y[1][0] + self.y[1][1]]
    }

    /// Outputs one sample in the past under free response.
    fn previous_outputs(&self) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..2 {
                *o += self.y[i][j] / -self.dp.a(i, j);
            }
        }
        out
    }

    fn applied_input(&self, j: usize, idx: usize) -> f64 {
        self.applied[j].get(idx).copied().unwrap_or(0.0)
    }

    fn advance(&mut self, k: usize, applied: [f64; 2], disturbance: [f64; 2]) {
        for j in 0..2 {
            self.applied[j].push(applied[j]);
            self.driven[j].push(applied[j] + disturbance[j]);
        }
        let h = self.dp.delays();
        for i in 0..2 {
            for j in 0..2 {
                let u = if k < h[j] { 0.0 } else { self.driven[j][k - h[j]] };
                self.y[i][j] = -self.dp.a(i, j) * self.y[i][j] + self.dp.b(i, j) * u;
            }
        }
    }
}

/// Nominal setpoints with the master channel shifted uniformly.
struct ShiftedReference<'a> {
    base: &'a SetpointSequence,
    offset: f64,
}

impl ReferenceSource for ShiftedReference<'_> {
    fn setpoint(&self, k: i64) -> [f64; 2] {
        let mut r = self.base.setpoint(k);
        r[0] += self.offset;
        r
    }
}

pub fn run(scenario: &Scenario, controller: &ControllerSpec) -> Result<SimResult> {
    scenario.validate()?;
    let ts = scenario.sample_time();
    let steps = scenario.steps();
    let nominal = scenario.setpoint_sequence();

    let schedule = match controller {
        ControllerSpec::PredictivePid { schedule } | ControllerSpec::SetpointVariation { schedule, .. } => {
            Some(schedule)
        }
        _ => None,
    };
    // Predictive controllers work in the design plant's internal input order;
    // the simulated plant is kept in external order.
    let design_dp = match schedule {
        Some(s) => s.state_space().plant().clone(),
        None => discretize(&scenario.plant_design)?,
    };
    let true_dp = discretize_as(&scenario.plant_true, false)?;
    let mut plant = PlantState::new(true_dp, scenario.initial_outputs);

    let mut out = SimResult {
        controller: controller.name().to_string(),
        sample_time: ts,
        alpha: scenario.alpha,
        time: Vec::with_capacity(steps),
        r1: Vec::with_capacity(steps),
        r2: Vec::with_capacity(steps),
        y1: Vec::with_capacity(steps),
        y2: Vec::with_capacity(steps),
        u1: Vec::with_capacity(steps),
        u2: Vec::with_capacity(steps),
        raw_u1: Vec::with_capacity(steps),
        raw_u2: Vec::with_capacity(steps),
        e_m: Vec::with_capacity(steps),
        metrics: Metrics {
            abs_peak: 0.0,
            mean: 0.0,
            rms: 0.0,
        },
        trace: Vec::new(),
    };

    let disturbance_at = |k: usize, injection: Injection| -> [f64; 2] {
        let t = k as f64 * ts;
        scenario
            .disturbances
            .iter()
            .filter(|d| d.injection == injection)
            .fold([0.0, 0.0], |acc, d| {
                let v = d.value(t);
                [acc[0] + v[0], acc[1] + v[1]]
            })
    };

    let effective_setpoint = |k: usize, y: [f64; 2]| -> [f64; 2] {
        let r = nominal.setpoint(k as i64);
        match controller {
            ControllerSpec::BlendStation { gamma_prime, .. } => {
                let r2 = scenario.alpha * (gamma_prime * r[0] + (1.0 - gamma_prime) * y[0]);
                [r[0], r2]
            }
            _ => r,
        }
    };

    let mut pid = PidState::default();
    let mut freeze = [false; 2];
    let internal_delays = design_dp.delays();

    for k in 0..steps {
        let out_dist = disturbance_at(k, Injection::Output);
        let y_plant = plant.outputs();
        let y = [y_plant[0] + out_dist[0], y_plant[1] + out_dist[1]];
        if let Some(mag) = y.iter().map(|v| v.abs()).find(|v| !v.is_finite() || *v > DIVERGENCE_LIMIT) {
            return Err(Error::NumericalDivergence { step: k, magnitude: mag });
        }

        let mut r = effective_setpoint(k, y);
        // Setpoint variation: while the measured ratio is outside the band, the
        // master setpoint is pulled towards the slave. The shift is treated as a
        // genuine setpoint change, so errors and feedforward both see it.
        let mut sv_offset = 0.0;
        if let ControllerSpec::SetpointVariation { alpha_b, k_sv, .. } = controller {
            let floor = RATIO_FLOOR * nominal.setpoint(k as i64)[0].abs().max(1.0);
            let tripped = y[0].abs() > floor && (y[1] / y[0] - scenario.alpha).abs() > *alpha_b;
            if tripped {
                sv_offset = -k_sv * (scenario.alpha * y[0] - y[1]) * ts / scenario.alpha;
                r[0] += sv_offset;
            }
        }
        let e = [r[0] - y[0], r[1] - y[1]];
        if k == 0 {
            let y_prev = plant.previous_outputs();
            let r_prev = effective_setpoint(0, y_prev);
            pid.e1_k = r_prev[0] - y_prev[0];
            pid.e2_k = r_prev[1] - y_prev[1];
        }
        pid.advance(e, freeze);

        let raw = match controller {
            ControllerSpec::PredictivePid { schedule } => {
                let up = internal_delayed_inputs(&plant, &design_dp, k, internal_delays);
                let entry = schedule.entry(k);
                out.trace.push(PredictiveTrace {
                    pid,
                    u_prev_delayed: up,
                    feedforward: [entry.s1, entry.s2],
                });
                design_dp.permute_inputs(control_from_entry(&entry, &pid, up))
            }
            ControllerSpec::SetpointVariation { schedule, .. } => {
                let up = internal_delayed_inputs(&plant, &design_dp, k, internal_delays);
                let mut entry = schedule.entry(k);
                if sv_offset != 0.0 {
                    let shifted = ShiftedReference {
                        base: &nominal,
                        offset: sv_offset,
                    };
                    [entry.s1, entry.s2] = schedule.feedforward_with(k, &shifted);
                }
                out.trace.push(PredictiveTrace {
                    pid,
                    u_prev_delayed: up,
                    feedforward: [entry.s1, entry.s2],
                });
                design_dp.permute_inputs(control_from_entry(&entry, &pid, up))
            }
            ControllerSpec::ParallelRatioPid { gains } | ControllerSpec::BlendStation { gains, .. } => {
                [0, 1].map(|i| gains[i].kp * pid.error(i) + gains[i].ki * ts * pid.integral(i))
            }
        };

        let (applied, saturated) = match &scenario.input_bounds {
            Some(b) => b.clamp(raw),
            None => (raw, [false; 2]),
        };
        freeze = saturated;

        plant.advance(k, applied, disturbance_at(k, Injection::Input));

        let op = scenario.operating_point;
        let y_abs = [y[0] + op[0], y[1] + op[1]];
        out.time.push(k as f64 * ts);
        out.r1.push(r[0] + op[0]);
        out.r2.push(r[1] + op[1]);
        out.y1.push(y_abs[0]);
        out.y2.push(y_abs[1]);
        out.u1.push(applied[0]);
        out.u2.push(applied[1]);
        out.raw_u1.push(raw[0]);
        out.raw_u2.push(raw[1]);
        out.e_m.push(scenario.alpha * y_abs[0] - y_abs[1]);
    }

    out.metrics = metrics(&out.e_m)?;
    Ok(out)
}

fn internal_delayed_inputs(plant: &PlantState, design_dp: &DiscretePlant, k: usize, delays: [usize; 2]) -> [f64; 2] {
    // internal input i is external input ext[i]
    let ext = design_dp.permute_inputs([0usize, 1usize]);
    [0, 1].map(|i| {
        if k < 1 + delays[i] {
            0.0
        } else {
            plant.applied_input(ext[i], k - 1 - delays[i])
        }
    })
}

pub fn run_baseline_parallel(scenario: &Scenario, gains: [PiGains; 2]) -> Result<SimResult> {
    run(scenario, &ControllerSpec::ParallelRatioPid { gains })
}

pub fn run_baseline_blend(scenario: &Scenario, gains: [PiGains; 2], gamma_prime: f64) -> Result<SimResult> {
    run(scenario, &ControllerSpec::BlendStation { gains, gamma_prime })
}

pub fn run_baseline_setpoint_variation(
    scenario: &Scenario,
    schedule: &GainSchedule,
    alpha_b: f64,
    k_sv: f64,
) -> Result<SimResult> {
    run(
        scenario,
        &ControllerSpec::SetpointVariation {
            schedule: schedule.clone(),
            alpha_b,
            k_sv,
        },
    )
}

/// Open-loop outputs of `plant` driven by `inputs` (one row per sample),
/// starting at rest.
pub fn open_loop_response(plant: &ContinuousPlant, inputs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let dp = discretize_as(plant, false)?;
    let mut state = PlantState::new(dp, [[0.0; 2]; 2]);
    let mut out = Vec::with_capacity(inputs.len());
    for (k, u) in inputs.iter().enumerate() {
        out.push(state.outputs());
        state.advance(k, *u, [0.0; 2]);
    }
    Ok(out)
}
