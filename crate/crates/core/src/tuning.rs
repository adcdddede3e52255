//! Structural tuning of the predictive-PID weights.
//!
//! The procedure runs in four stages, each a deterministic grid search over
//! closed-loop step simulations of a tuning scenario:
//!
//! 1. ultimate gain `Ku` and period `Tu` of each diagonal loop fix the ratio
//!    `P1 / P2 = (Ku1 / Ku2)^2`;
//! 2. with `I1 = I2 = 0`, the smallest feasible input weight `epsilon` is
//!    located (inputs stay in bounds, no overshoot);
//! 3. the integral weights grow along a geometric grid with
//!    `I1 / I2 = (Ku1 Tu2 / (Tu1 Ku2))^2` while settling keeps improving;
//! 4. `beta` is chosen to minimise the peak ratio error, then `gamma` to
//!    shorten its recovery.
//!
//! Every accepted candidate passes the companion-matrix stability test; for
//! designs without integral weight the unread integral states are left out
//! of it (see [`check_loop_stability`]).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fopdt_model::{assemble_state_space, discretize, discretize_as, DiscretePlant};
use crate::gpc_core::{design_gains, CostWeights};
use crate::pid_schedule::build_schedule;
use crate::simulator::{run, ControllerSpec, Scenario, SimResult};
use crate::stability::{check_loop_stability, DEFAULT_MARGIN};

const PHASE_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltimateLoopData {
    /// Ultimate proportional gain.
    pub ku: f64,
    /// Ultimate period in seconds.
    pub tu: f64,
    /// Phase-crossover frequency in rad/sample.
    pub omega: f64,
}

/// Ultimate gain and period of the diagonal loop `b z^-h / (z + a)` of
/// output `loop_index` (in the plant's stored input order) under unit
/// negative proportional feedback.
pub fn find_ultimate(dp: &DiscretePlant, loop_index: usize) -> Result<UltimateLoopData> {
    let i = loop_index;
    ultimate_of(dp.a(i, i), dp.b(i, i), dp.delays()[i], dp.sample_time()).ok_or(Error::NoCrossover { loop_index })
}

/// `Ku`, `Tu` of `b z^-h / (z + a)`, or `None` when the phase never reaches
/// -180 degrees strictly below the Nyquist frequency.
pub fn ultimate_of(a: f64, b: f64, h: usize, sample_time: f64) -> Option<UltimateLoopData> {
    if h == 0 || b == 0.0 || !(a.abs() < 1.0) {
        return None;
    }
    // arg(e^{jw} + a) rises monotonically from 0 to pi on [0, pi], so the
    // loop phase is strictly decreasing and crosses -pi exactly once.
    let phase = |w: f64| -(h as f64) * w - w.sin().atan2(w.cos() + a);
    let (mut lo, mut hi) = (0.0, PI);
    if phase(hi) >= -PI {
        return None;
    }
    for _ in 0..PHASE_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if phase(mid) > -PI {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let omega = 0.5 * (lo + hi);
    let magnitude = b.abs() / ((omega.cos() + a).powi(2) + omega.sin().powi(2)).sqrt();
    Some(UltimateLoopData {
        ku: 1.0 / magnitude,
        tu: 2.0 * PI * sample_time / omega,
        omega,
    })
}

/// Settings of the tuning searches. Grids are fixed so results are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningOptions {
    /// `P2`; `P1` follows from the ultimate-gain ratio.
    pub p_scale: f64,
    /// Starting (largest) input weight of the downward search.
    pub epsilon_start: f64,
    /// Smallest input weight tried before giving up on the descent.
    pub epsilon_floor: f64,
    /// Relative width at which the bisection stops.
    pub epsilon_tolerance: f64,
    /// Allowed overshoot during the epsilon search, as a fraction of the step.
    pub overshoot_limit: f64,
    /// Allowed overshoot while raising the integral weights.
    pub integral_overshoot_limit: f64,
    /// First `I1` tried, relative to `P1`.
    pub integral_start: f64,
    pub integral_growth: f64,
    pub integral_max_steps: usize,
    /// Settling band as a fraction of the step.
    pub settling_band: f64,
    pub beta_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// Ratio-error band as a fraction of the channel-1 step.
    pub ratio_band: f64,
    /// Allowed relative growth of the peak ratio error while choosing gamma.
    pub peak_tolerance: f64,
    /// `P1 / P2` and `I1 / I2` used when a loop has no phase crossover.
    pub fallback_ratio: f64,
}

impl Default for TuningOptions {
    fn default() -> Self {
        Self {
            p_scale: 1.0,
            epsilon_start: 1e3,
            epsilon_floor: 1e-9,
            epsilon_tolerance: 0.05,
            overshoot_limit: 0.005,
            integral_overshoot_limit: 0.02,
            integral_start: 1e-4,
            integral_growth: 2.0,
            integral_max_steps: 24,
            settling_band: 0.02,
            beta_grid: vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0],
            gamma_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0],
            ratio_band: 0.005,
            peak_tolerance: 0.1,
            fallback_ratio: 1.0,
        }
    }
}

/// Plant, step scenario and horizon the weights are tuned against.
#[derive(Debug, Clone)]
pub struct TuningContext {
    /// Step-response scenario. Disturbances are ignored.
    pub scenario: Scenario,
    pub horizon: usize,
    pub options: TuningOptions,
}

impl TuningContext {
    pub fn new(scenario: Scenario, horizon: usize, options: TuningOptions) -> Self {
        let mut scenario = scenario;
        scenario.disturbances.clear();
        Self {
            scenario,
            horizon,
            options,
        }
    }

    fn weights(&self, p: [f64; 2], i: [f64; 2], epsilon: f64, beta: f64, gamma: f64) -> CostWeights {
        CostWeights::new(
            [p[0], 0.0, i[0], p[1], 0.0, i[1]],
            epsilon,
            beta,
            gamma,
            self.scenario.alpha,
            self.horizon,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Epsilon,
    Integral,
    Beta,
    Gamma,
}

/// One simulated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub stage: Stage,
    pub p: [f64; 2],
    pub i: [f64; 2],
    pub epsilon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub stable: bool,
    pub spectral_radius: f64,
    /// The closed-loop run finished without diverging.
    pub simulated: bool,
    /// Largest excursion of the unsaturated inputs outside the bounds.
    pub input_violation: f64,
    /// Largest output overshoot as a fraction of the step.
    pub overshoot: f64,
    pub settling_time: Option<f64>,
    /// Integrated absolute tracking error of both outputs.
    pub iae: f64,
    pub peak_ratio_error: f64,
    pub ratio_recovery_time: Option<f64>,
    /// Met the acceptance test of its stage.
    pub accepted: bool,
}

impl Candidate {
    fn usable(&self) -> bool {
        self.stable && self.simulated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub p1: f64,
    pub p2: f64,
    pub i1: f64,
    pub i2: f64,
    pub epsilon: f64,
    /// See [`EpsilonSearch::at_floor`].
    pub epsilon_at_floor: bool,
    pub beta: f64,
    pub gamma: f64,
    /// Ultimate data of loops 1 and 2; `None` when a loop has no crossover.
    pub ultimate: [Option<UltimateLoopData>; 2],
    pub p_ratio: f64,
    pub i_ratio: f64,
    /// Spectral radius of the final design.
    pub spectral_radius: f64,
    pub trace: Vec<Candidate>,
}

impl TuningResult {
    pub fn q1_diag(&self) -> [f64; 6] {
        [self.p1, 0.0, self.i1, self.p2, 0.0, self.i2]
    }

    pub fn weights(&self, alpha: f64, horizon: usize) -> CostWeights {
        CostWeights::new(self.q1_diag(), self.epsilon, self.beta, self.gamma, alpha, horizon)
    }
}

/// Designs, certifies and simulates one weight set.
pub fn evaluate(ctx: &TuningContext, stage: Stage, weights: &CostWeights) -> Result<Candidate> {
    let q = weights.q1_diag;
    let mut cand = Candidate {
        stage,
        p: [q[0], q[3]],
        i: [q[2], q[5]],
        epsilon: weights.epsilon,
        beta: weights.beta,
        gamma: weights.gamma,
        stable: false,
        spectral_radius: f64::NAN,
        simulated: false,
        input_violation: f64::INFINITY,
        overshoot: f64::INFINITY,
        settling_time: None,
        iae: f64::INFINITY,
        peak_ratio_error: f64::INFINITY,
        ratio_recovery_time: None,
        accepted: false,
    };
    let sc = &ctx.scenario;
    let ss = assemble_state_space(&discretize(&sc.plant_design)?);
    let gains = match design_gains(&ss, weights) {
        Ok(g) => g,
        Err(Error::SingularSystem { .. }) => return Ok(cand),
        Err(e) => return Err(e),
    };
    let report = check_loop_stability(&ss, &gains, DEFAULT_MARGIN)?;
    cand.stable = report.stable;
    cand.spectral_radius = report.spectral_radius;
    if !report.stable {
        return Ok(cand);
    }
    let schedule = build_schedule(&gains, &ss, &sc.setpoint_sequence(), sc.steps())?;
    let res = match run(sc, &ControllerSpec::PredictivePid { schedule }) {
        Ok(r) => r,
        Err(Error::NumericalDivergence { .. }) => return Ok(cand),
        Err(e) => return Err(e),
    };
    let step = sc.step_size();
    let scale = step[0].abs().max(step[1].abs());
    cand.simulated = true;
    cand.input_violation = input_violation(sc, &res);
    cand.overshoot = overshoot(&res, step);
    cand.settling_time = settling(&res, step, ctx.options.settling_band);
    cand.iae = iae(&res);
    cand.peak_ratio_error = res.metrics.abs_peak;
    cand.ratio_recovery_time = res.ratio_recovery_time(ctx.options.ratio_band * scale);
    Ok(cand)
}

fn input_violation(sc: &Scenario, res: &SimResult) -> f64 {
    let Some(b) = &sc.input_bounds else {
        return 0.0;
    };
    let mut worst = 0.0f64;
    for (ch, raw) in [&res.raw_u1, &res.raw_u2].into_iter().enumerate() {
        for &u in raw {
            worst = worst.max(b.lo[ch] - u).max(u - b.hi[ch]);
        }
    }
    worst
}

/// Largest excursion past the final setpoint, relative to the step size.
fn overshoot(res: &SimResult, step: [f64; 2]) -> f64 {
    let mut worst = 0.0f64;
    for (ch, (y, r)) in [(&res.y1, &res.r1), (&res.y2, &res.r2)].into_iter().enumerate() {
        let s = step[ch];
        if s == 0.0 {
            continue;
        }
        let target = *r.last().unwrap_or(&0.0);
        for &v in y {
            worst = worst.max(s.signum() * (v - target) / s.abs());
        }
    }
    worst
}

fn iae(res: &SimResult) -> f64 {
    let e1 = res.r1.iter().zip(&res.y1).map(|(r, y)| (r - y).abs());
    let e2 = res.r2.iter().zip(&res.y2).map(|(r, y)| (r - y).abs());
    (e1.sum::<f64>() + e2.sum::<f64>()) * res.sample_time
}

/// Later of the two output settling times, `None` if either never settles.
fn settling(res: &SimResult, step: [f64; 2], band: f64) -> Option<f64> {
    let scale = step[0].abs().max(step[1].abs());
    let t1 = res.settling_time(0, band * scale)?;
    let t2 = res.settling_time(1, band * scale)?;
    Some(t1.max(t2))
}

fn time_key(t: Option<f64>) -> f64 {
    t.unwrap_or(f64::INFINITY)
}

/// `(P1 / P2, I1 / I2)` from the ultimate data, or the fallback ratio.
pub fn weight_ratios(ultimate: &[Option<UltimateLoopData>; 2], fallback: f64) -> (f64, f64) {
    match ultimate {
        [Some(u1), Some(u2)] => {
            let p = (u1.ku / u2.ku).powi(2);
            let i = ((u1.ku / u1.tu) * (u2.tu / u2.ku)).powi(2);
            (p, i)
        }
        _ => (fallback, fallback),
    }
}

/// Ultimate data of both diagonal loops, pairing output `i` with input `i`.
pub fn ultimate_pair(ctx: &TuningContext) -> Result<[Option<UltimateLoopData>; 2]> {
    let dp = discretize_as(&ctx.scenario.plant_design, false)?;
    let mut out = [None, None];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = match find_ultimate(&dp, i) {
            Ok(u) => Some(u),
            Err(Error::NoCrossover { .. }) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Evaluations keyed by epsilon, so that repeated probes are simulated once.
struct EpsilonProbe<'a> {
    ctx: &'a TuningContext,
    p: [f64; 2],
    seen: BTreeMap<u64, Candidate>,
    order: Vec<u64>,
}

impl EpsilonProbe<'_> {
    fn feasible(&mut self, eps: f64) -> Result<bool> {
        let key = eps.to_bits();
        if !self.seen.contains_key(&key) {
            let w = self.ctx.weights(self.p, [0.0; 2], eps, 0.0, 0.0);
            let mut c = evaluate(self.ctx, Stage::Epsilon, &w)?;
            c.accepted = c.usable()
                && c.input_violation <= 0.0
                && c.overshoot <= self.ctx.options.overshoot_limit;
            self.seen.insert(key, c);
            self.order.push(key);
        }
        Ok(self.seen[&key].accepted)
    }

    fn into_trace(self) -> Vec<Candidate> {
        let mut seen = self.seen;
        self.order.iter().map(|k| seen.remove(k).unwrap()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSearch {
    pub epsilon: f64,
    /// The descent hit `epsilon_floor` with every probe feasible, so
    /// `epsilon / 2` was not shown to be infeasible.
    pub at_floor: bool,
    pub trace: Vec<Candidate>,
}

/// Smallest `epsilon` keeping the unsaturated inputs in bounds and the
/// outputs free of overshoot, with `I1 = I2 = 0`. Halves from
/// `epsilon_start`, bisects the last bracket and repeats until `epsilon / 2`
/// is infeasible.
pub fn tune_epsilon(ctx: &TuningContext, p: [f64; 2]) -> Result<EpsilonSearch> {
    let opts = &ctx.options;
    let mut probe = EpsilonProbe {
        ctx,
        p,
        seen: BTreeMap::new(),
        order: Vec::new(),
    };
    let mut hi = opts.epsilon_start;
    if !probe.feasible(hi)? {
        return Err(Error::NoFeasibleEpsilon { epsilon: hi });
    }
    loop {
        // geometric descent
        let mut lo = hi / 2.0;
        while probe.feasible(lo)? {
            hi = lo;
            if hi / 2.0 < opts.epsilon_floor {
                return Ok(EpsilonSearch {
                    epsilon: hi,
                    at_floor: true,
                    trace: probe.into_trace(),
                });
            }
            lo = hi / 2.0;
        }
        // bisection of the infeasible/feasible bracket
        while (hi - lo) / hi > opts.epsilon_tolerance {
            let mid = 0.5 * (lo + hi);
            if probe.feasible(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if !probe.feasible(hi / 2.0)? {
            return Ok(EpsilonSearch {
                epsilon: hi,
                at_floor: false,
                trace: probe.into_trace(),
            });
        }
        hi /= 2.0;
    }
}

/// Raises `I1` (with `I2 = I1 / ratio`) geometrically while the settling
/// time improves and overshoot stays within the limit. While the response
/// has not settled within the run, the integrated absolute error decides.
pub fn tune_integral(ctx: &TuningContext, p: [f64; 2], epsilon: f64, ratio: f64) -> Result<([f64; 2], Vec<Candidate>)> {
    let opts = &ctx.options;
    let mut trace = Vec::new();
    let mut base = evaluate(ctx, Stage::Integral, &ctx.weights(p, [0.0; 2], epsilon, 0.0, 0.0))?;
    base.accepted = base.usable();
    let mut best_score = (time_key(base.settling_time), base.iae);
    trace.push(base);
    let mut best = [0.0; 2];
    let mut i1 = opts.integral_start * p[0];
    for _ in 0..opts.integral_max_steps {
        let i = [i1, i1 / ratio];
        let mut c = evaluate(ctx, Stage::Integral, &ctx.weights(p, i, epsilon, 0.0, 0.0))?;
        let score = (time_key(c.settling_time), c.iae);
        let better = if score.0.is_finite() || best_score.0.is_finite() {
            score.0 < best_score.0
        } else {
            improves(score.1, best_score.1)
        };
        c.accepted = c.usable() && c.overshoot <= opts.integral_overshoot_limit && better;
        let accepted = c.accepted;
        trace.push(c);
        if !accepted {
            break;
        }
        best = i;
        best_score = score;
        i1 *= opts.integral_growth;
    }
    Ok((best, trace))
}

/// `beta` minimising the peak ratio error, then `gamma` minimising its
/// recovery time without raising the peak by more than `peak_tolerance`.
/// Only stable candidates are considered; ties keep the smaller value.
pub fn tune_ratio_weights(
    ctx: &TuningContext,
    p: [f64; 2],
    i: [f64; 2],
    epsilon: f64,
) -> Result<((f64, f64), Vec<Candidate>)> {
    let opts = &ctx.options;
    let mut trace = Vec::new();

    let mut base = evaluate(ctx, Stage::Beta, &ctx.weights(p, i, epsilon, 0.0, 0.0))?;
    base.accepted = base.usable();
    let mut beta = 0.0;
    let mut best_peak = if base.usable() { base.peak_ratio_error } else { f64::INFINITY };
    trace.push(base);
    for &b in &opts.beta_grid {
        let mut c = evaluate(ctx, Stage::Beta, &ctx.weights(p, i, epsilon, b, 0.0))?;
        c.accepted = c.usable() && improves(c.peak_ratio_error, best_peak);
        if c.accepted {
            beta = b;
            best_peak = c.peak_ratio_error;
        }
        trace.push(c);
    }

    let mut base = evaluate(ctx, Stage::Gamma, &ctx.weights(p, i, epsilon, beta, 0.0))?;
    base.accepted = base.usable();
    let peak_cap = base.peak_ratio_error * (1.0 + opts.peak_tolerance);
    let mut gamma = 0.0;
    let mut best_time = if base.usable() { time_key(base.ratio_recovery_time) } else { f64::INFINITY };
    trace.push(base);
    for &g in &opts.gamma_grid {
        let mut c = evaluate(ctx, Stage::Gamma, &ctx.weights(p, i, epsilon, beta, g))?;
        let t = time_key(c.ratio_recovery_time);
        c.accepted = c.usable() && c.peak_ratio_error <= peak_cap && improves(t, best_time);
        if c.accepted {
            gamma = g;
            best_time = t;
        }
        trace.push(c);
    }
    Ok(((beta, gamma), trace))
}

/// Strict improvement beyond round-off.
fn improves(candidate: f64, incumbent: f64) -> bool {
    if !candidate.is_finite() {
        return false;
    }
    if !incumbent.is_finite() {
        return true;
    }
    candidate < incumbent - 1e-9 * incumbent.abs() - 1e-12
}

/// Runs all stages and certifies the final design.
pub fn tune(ctx: &TuningContext) -> Result<TuningResult> {
    let ultimate = ultimate_pair(ctx)?;
    let (p_ratio, i_ratio) = weight_ratios(&ultimate, ctx.options.fallback_ratio);
    let p = [ctx.options.p_scale * p_ratio, ctx.options.p_scale];

    let search = tune_epsilon(ctx, p)?;
    let (epsilon, mut trace) = (search.epsilon, search.trace);
    let (i, t) = tune_integral(ctx, p, epsilon, i_ratio)?;
    trace.extend(t);
    let ((beta, gamma), t) = tune_ratio_weights(ctx, p, i, epsilon)?;
    trace.extend(t);

    let weights = ctx.weights(p, i, epsilon, beta, gamma);
    let ss = assemble_state_space(&discretize(&ctx.scenario.plant_design)?);
    let report = check_loop_stability(&ss, &design_gains(&ss, &weights)?, DEFAULT_MARGIN)?;
    if !report.stable {
        // Every stage only accepts stable candidates and falls back to the
        // previous stable design, so this is unreachable in practice.
        return Err(Error::InvalidWeights(format!(
            "tuned design is unstable (spectral radius {})",
            report.spectral_radius
        )));
    }
    Ok(TuningResult {
        p1: p[0],
        p2: p[1],
        i1: i[0],
        i2: i[1],
        epsilon,
        epsilon_at_floor: search.at_floor,
        beta,
        gamma,
        ultimate,
        p_ratio,
        i_ratio,
        spectral_radius: report.spectral_radius,
        trace,
    })
}
