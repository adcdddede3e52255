//! Predictive-PID reformulation of the delayed GPC law.
//!
//! Input `i` is computed from the predicted state `X(k + h_i)`. The prediction
//! rolls the model forward from `X(k)` under one of three regimes per step `l`:
//!
//! | regime            | condition        | transition                               |
//! |-------------------|------------------|------------------------------------------|
//! | open loop         | `l < h1`         | `F X + E r~(l)`                          |
//! | first input live  | `h1 <= l < h2`   | `F1 X + G K1_ref R~(l) + E r~(l)`        |
//! | closed loop       | `l >= h2`        | `Fbar X + G K_ref R~(l) + E r~(l)`       |
//!
//! which gives `u_i(k) = K_i,gpc Fbar_i(k) X(k) + S_i(k)`. Substituting
//! `X = M X~ + N U(k-1-h)` turns that into a PID law on the measured errors
//! with time-varying gains while `k < h2` and constant gains afterwards.

use nalgebra::{DMatrix, DVector, Matrix6, RowVector2, RowVector6, Vector2, Vector6};

use crate::error::{Error, Result};
use crate::fopdt_model::{aux_reference, PidState, ReferenceSource, SetpointSequence, StateSpace};
use crate::gpc_core::GpcGains;

/// Closed-loop and partial closed-loop transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMatrices {
    /// `F + G K_gpc`.
    pub f_bar: Matrix6<f64>,
    /// `F + G [K1_gpc; 0]`.
    pub f_bar_1: Matrix6<f64>,
    /// `[K1_ref; 0]`.
    pub k_ref_1: DMatrix<f64>,
    g_k_ref: DMatrix<f64>,
    g_k_ref_1: DMatrix<f64>,
}

impl ClosedLoopMatrices {
    pub fn new(ss: &StateSpace, gains: &GpcGains) -> Self {
        let mut k1 = gains.k_gpc;
        k1.row_mut(1).fill(0.0);
        let mut k_ref_1 = gains.k_ref.clone();
        k_ref_1.row_mut(1).fill(0.0);
        let g = DMatrix::from_column_slice(6, 2, ss.g.as_slice());
        Self {
            f_bar: ss.f + ss.g * gains.k_gpc,
            f_bar_1: ss.f + ss.g * k1,
            g_k_ref: &g * &gains.k_ref,
            g_k_ref_1: &g * &k_ref_1,
            k_ref_1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    OpenLoop,
    FirstInputLive,
    ClosedLoop,
}

pub fn regime(l: usize, h1: usize, h2: usize) -> Regime {
    if l < h1 {
        Regime::OpenLoop
    } else if l < h2 {
        Regime::FirstInputLive
    } else {
        Regime::ClosedLoop
    }
}

/// `R~(l) = [r~(l); r~(l+1); ...; r~(l+N-1)]`.
pub fn stacked_aux_reference<R: ReferenceSource + ?Sized>(
    ss: &StateSpace,
    refs: &R,
    l: usize,
    horizon: usize,
) -> DVector<f64> {
    let mut out = DVector::zeros(2 * horizon);
    for j in 0..horizon {
        let r = aux_reference(ss.plant(), refs, (l + j) as i64);
        out[2 * j] = r.r_tilde[0];
        out[2 * j + 1] = r.r_tilde[1];
    }
    out
}

/// `X(k+h1) = coeff_h1 X(k) + offset_h1`, and likewise for `h2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePrediction {
    pub coeff_h1: Matrix6<f64>,
    pub coeff_h2: Matrix6<f64>,
    pub offset_h1: Vector6<f64>,
    pub offset_h2: Vector6<f64>,
}

/// Reference-driven terms `G K_ref R~(l) + E r~(l)` per regime.
struct Drive<'a, R: ?Sized> {
    ss: &'a StateSpace,
    clm: &'a ClosedLoopMatrices,
    refs: &'a R,
    horizon: usize,
}

impl<R: ReferenceSource + ?Sized> Drive<'_, R> {
    fn at(&self, l: usize) -> (Matrix6<f64>, Vector6<f64>) {
        let (h1, h2) = (self.ss.h1(), self.ss.h2());
        let e_r = self.ss.e * aux_reference(self.ss.plant(), self.refs, l as i64).to_vector();
        match regime(l, h1, h2) {
            Regime::OpenLoop => (self.ss.f, e_r),
            Regime::FirstInputLive => {
                let rs = stacked_aux_reference(self.ss, self.refs, l, self.horizon);
                (self.clm.f_bar_1, to_vector6(&(&self.clm.g_k_ref_1 * rs)) + e_r)
            }
            Regime::ClosedLoop => {
                let rs = stacked_aux_reference(self.ss, self.refs, l, self.horizon);
                (self.clm.f_bar, to_vector6(&(&self.clm.g_k_ref * rs)) + e_r)
            }
        }
    }
}

fn to_vector6(v: &DVector<f64>) -> Vector6<f64> {
    Vector6::from_column_slice(v.as_slice())
}

pub fn predict_state_coefficients<R: ReferenceSource + ?Sized>(
    clm: &ClosedLoopMatrices,
    ss: &StateSpace,
    horizon: usize,
    k: usize,
    refs: &R,
) -> StatePrediction {
    let drive = Drive {
        ss,
        clm,
        refs,
        horizon,
    };
    let (h1, h2) = (ss.h1(), ss.h2());
    let mut coeff = Matrix6::identity();
    let mut offset = Vector6::zeros();
    let mut snapshot = (coeff, offset);
    for l in k..k + h2 {
        if l == k + h1 {
            snapshot = (coeff, offset);
        }
        let (a, c) = drive.at(l);
        offset = a * offset + c;
        coeff = a * coeff;
    }
    if h1 == h2 {
        snapshot = (coeff, offset);
    }
    StatePrediction {
        coeff_h1: snapshot.0,
        coeff_h2: coeff,
        offset_h1: snapshot.1,
        offset_h2: offset,
    }
}

/// PID-form gains of one schedule step.
#[derive(Debug, Clone, PartialEq)]
pub struct PidGains {
    pub k1_pid: RowVector6<f64>,
    pub k2_pid: RowVector6<f64>,
    pub k1_u: RowVector2<f64>,
    pub k2_u: RowVector2<f64>,
    /// Coefficient of `X(k)` in `X(k + h1)`.
    pub coeff_h1: Matrix6<f64>,
    /// Coefficient of `X(k)` in `X(k + h2)`.
    pub coeff_h2: Matrix6<f64>,
}

impl PidGains {
    fn new(ss: &StateSpace, gains: &GpcGains, coeff_h1: Matrix6<f64>, coeff_h2: Matrix6<f64>) -> Self {
        let k1 = gains.k1_gpc() * coeff_h1;
        let k2 = gains.k2_gpc() * coeff_h2;
        Self {
            k1_pid: k1 * ss.m,
            k2_pid: k2 * ss.m,
            k1_u: k1 * ss.n,
            k2_u: k2 * ss.n,
            coeff_h1,
            coeff_h2,
        }
    }
}

/// One step of the schedule, as consumed by the PID law.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub k1_pid: RowVector6<f64>,
    pub k2_pid: RowVector6<f64>,
    pub k1_u: RowVector2<f64>,
    pub k2_u: RowVector2<f64>,
    pub s1: f64,
    pub s2: f64,
}

/// Offline predictive-PID gain schedule.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    ss: StateSpace,
    gains: GpcGains,
    clm: ClosedLoopMatrices,
    refs: SetpointSequence,
    stage: Vec<PidGains>,
    tail: PidGains,
    feedforward: Vec<[f64; 2]>,
}

pub fn build_schedule(
    gains: &GpcGains,
    ss: &StateSpace,
    refs: &SetpointSequence,
    horizon_steps: usize,
) -> Result<GainSchedule> {
    let (h1, h2) = (ss.h1(), ss.h2());
    let n = gains.horizon;
    let last_k = if refs.extrapolates() {
        // Past this point every reference lookup is clamped to the final
        // value and the feedforward terms stay constant.
        horizon_steps.max(refs.len() + 1).max(h2 + 1)
    } else {
        let required = horizon_steps + h2 + n + 1;
        if refs.len() < required {
            return Err(Error::DelayMismatch {
                required,
                available: refs.len(),
            });
        }
        horizon_steps
    };

    let clm = ClosedLoopMatrices::new(ss, gains);
    let mut stage = Vec::with_capacity(h2 + 1);
    let mut feedforward = Vec::with_capacity(last_k + 1);
    for k in 0..=last_k {
        let pred = predict_state_coefficients(&clm, ss, n, k, refs);
        feedforward.push(feedforward_terms(ss, gains, &pred, n, k, refs));
        if k <= h2 {
            stage.push(PidGains::new(ss, gains, pred.coeff_h1, pred.coeff_h2));
        }
    }

    let tail = PidGains::new(
        ss,
        gains,
        clm.f_bar.pow(h1 as u32),
        clm.f_bar.pow(h2 as u32),
    );

    Ok(GainSchedule {
        ss: ss.clone(),
        gains: gains.clone(),
        clm,
        refs: refs.clone(),
        stage,
        tail,
        feedforward,
    })
}

fn feedforward_terms<R: ReferenceSource + ?Sized>(
    ss: &StateSpace,
    gains: &GpcGains,
    pred: &StatePrediction,
    horizon: usize,
    k: usize,
    refs: &R,
) -> [f64; 2] {
    let r1 = stacked_aux_reference(ss, refs, k + ss.h1(), horizon);
    let r2 = stacked_aux_reference(ss, refs, k + ss.h2(), horizon);
    let s1 = (gains.k1_gpc() * pred.offset_h1)[0] + (gains.k_ref.row(0) * r1)[0];
    let s2 = (gains.k2_gpc() * pred.offset_h2)[0] + (gains.k_ref.row(1) * r2)[0];
    [s1, s2]
}

impl GainSchedule {
    pub fn state_space(&self) -> &StateSpace {
        &self.ss
    }

    pub fn gpc_gains(&self) -> &GpcGains {
        &self.gains
    }

    pub fn closed_loop(&self) -> &ClosedLoopMatrices {
        &self.clm
    }

    pub fn references(&self) -> &SetpointSequence {
        &self.refs
    }

    /// Time-varying gains for `k = 0..=h2`.
    pub fn stage_gains(&self) -> &[PidGains] {
        &self.stage
    }

    pub fn tail_gains(&self) -> &PidGains {
        &self.tail
    }

    pub fn gains_at(&self, k: usize) -> &PidGains {
        self.stage.get(k).unwrap_or(&self.tail)
    }

    pub fn feedforward_at(&self, k: usize) -> [f64; 2] {
        let idx = k.min(self.feedforward.len() - 1);
        self.feedforward[idx]
    }

    pub fn entry(&self, k: usize) -> ScheduleEntry {
        let g = self.gains_at(k);
        let [s1, s2] = self.feedforward_at(k);
        ScheduleEntry {
            k1_pid: g.k1_pid,
            k2_pid: g.k2_pid,
            k1_u: g.k1_u,
            k2_u: g.k2_u,
            s1,
            s2,
        }
    }

    /// Feedforward terms against an arbitrary reference sequence, evaluated
    /// online.
    pub fn feedforward_with<R: ReferenceSource + ?Sized>(&self, k: usize, refs: &R) -> [f64; 2] {
        let pred = predict_state_coefficients(&self.clm, &self.ss, self.gains.horizon, k, refs);
        feedforward_terms(&self.ss, &self.gains, &pred, self.gains.horizon, k, refs)
    }

    /// State-feedback form `u_i = K_i,gpc Fbar_i X(k) + S_i(k)`.
    pub fn state_feedback_control(&self, k: usize, x: &Vector6<f64>) -> [f64; 2] {
        let g = self.gains_at(k);
        let [s1, s2] = self.feedforward_at(k);
        [
            (self.gains.k1_gpc() * g.coeff_h1 * x)[0] + s1,
            (self.gains.k2_gpc() * g.coeff_h2 * x)[0] + s2,
        ]
    }
}

/// `u_i(k) = K_i,pid X~(k) + K_i,u U(k-1-h) + S_i(k)`, before saturation.
/// `u_prev_delayed = [u1(k-1-h1), u2(k-1-h2)]` in internal input order.
pub fn control_step(
    schedule: &GainSchedule,
    k: usize,
    pid_state: &PidState,
    u_prev_delayed: [f64; 2],
) -> [f64; 2] {
    let entry = schedule.entry(k);
    control_from_entry(&entry, pid_state, u_prev_delayed)
}

pub fn control_from_entry(entry: &ScheduleEntry, pid_state: &PidState, u_prev_delayed: [f64; 2]) -> [f64; 2] {
    let xt = pid_state.to_vector();
    let up = Vector2::new(u_prev_delayed[0], u_prev_delayed[1]);
    [
        (entry.k1_pid * xt)[0] + (entry.k1_u * up)[0] + entry.s1,
        (entry.k2_pid * xt)[0] + (entry.k2_u * up)[0] + entry.s2,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fopdt_model::{assemble_state_space, discretize, ContinuousPlant, DiscretePlant};
    use crate::gpc_core::{design_gains, CostWeights};

    fn design(plant: &ContinuousPlant, weights: &CostWeights) -> (StateSpace, GpcGains) {
        let ss = assemble_state_space(&discretize(plant).unwrap());
        let gains = design_gains(&ss, weights).unwrap();
        (ss, gains)
    }

    fn small_delay_plant(h: [f64; 2]) -> ContinuousPlant {
        ContinuousPlant::new([[1.5, 0.4], [0.3, 1.2]], [[8.0, 12.0], [10.0, 6.0]], h, 1.0).unwrap()
    }

    fn weights() -> CostWeights {
        CostWeights::new([1.0, 0.0, 0.01, 1.0, 0.0, 0.01], 0.5, 2.0, 0.05, 1.0, 4)
    }

    #[test]
    fn delay_free_reduces_to_static_feedback() {
        let (ss, gains) = design(&small_delay_plant([0.0, 0.0]), &weights());
        let refs = SetpointSequence::constant([0.0, 0.0]);
        let clm = ClosedLoopMatrices::new(&ss, &gains);
        let pred = predict_state_coefficients(&clm, &ss, 4, 3, &refs);
        assert_eq!(pred.coeff_h1, Matrix6::identity());
        assert_eq!(pred.coeff_h2, Matrix6::identity());
        assert_eq!(pred.offset_h2, Vector6::zeros());

        let sched = build_schedule(&gains, &ss, &refs, 10).unwrap();
        assert_eq!(sched.stage_gains().len(), 1);
        let k1_pid = gains.k1_gpc() * ss.m;
        assert!((sched.tail_gains().k1_pid - k1_pid).norm() < 1e-15);

        let x = Vector6::new(0.3, -0.1, 2.0, 0.5, 0.2, -1.0);
        let u = sched.state_feedback_control(5, &x);
        let direct = gains.k_gpc * x;
        assert!((u[0] - direct[0]).abs() < 1e-14 && (u[1] - direct[1]).abs() < 1e-14);
    }

    #[test]
    fn tail_coefficients_with_zero_references() {
        let (ss, gains) = design(&small_delay_plant([2.0, 5.0]), &weights());
        let refs = SetpointSequence::constant([0.0, 0.0]);
        let clm = ClosedLoopMatrices::new(&ss, &gains);
        let pred = predict_state_coefficients(&clm, &ss, 4, 9, &refs);
        assert!((pred.coeff_h1 - clm.f_bar.pow(2)).norm() < 1e-12);
        assert!((pred.coeff_h2 - clm.f_bar.pow(5)).norm() < 1e-12);
        assert_eq!(pred.offset_h1, Vector6::zeros());
        assert_eq!(pred.offset_h2, Vector6::zeros());
    }

    #[test]
    fn zero_reference_schedule_has_no_feedforward() {
        let (ss, gains) = design(&small_delay_plant([2.0, 5.0]), &weights());
        let sched = build_schedule(&gains, &ss, &SetpointSequence::constant([0.0, 0.0]), 20).unwrap();
        for k in 0..25 {
            assert_eq!(sched.feedforward_at(k), [0.0, 0.0]);
        }
        assert_ne!(sched.stage_gains()[0].k1_pid, sched.stage_gains()[3].k1_pid);
        assert_eq!(sched.gains_at(6), sched.gains_at(105));
    }

    #[test]
    fn last_stage_entry_matches_tail() {
        let (ss, gains) = design(&small_delay_plant([3.0, 7.0]), &weights());
        let sched = build_schedule(&gains, &ss, &SetpointSequence::constant([1.0, 1.0]), 20).unwrap();
        let last = &sched.stage_gains()[7];
        assert!((last.k1_pid - sched.tail_gains().k1_pid).norm() < 1e-12);
        assert!((last.k2_u - sched.tail_gains().k2_u).norm() < 1e-12);
    }

    #[test]
    fn pid_form_matches_state_feedback_form() {
        let (ss, gains) = design(&small_delay_plant([1.0, 4.0]), &weights());
        let mut values = vec![[0.0, 0.0]; 10];
        values.extend(std::iter::repeat_n([2.0, 2.0], 10));
        let sched = build_schedule(&gains, &ss, &SetpointSequence::new(values), 30).unwrap();
        for k in [0, 2, 4, 5, 12, 40] {
            let pid = PidState::from_vector(&Vector6::new(0.4, -0.3, 1.1, 0.7, 0.2, -0.5));
            let up = [0.25, -0.6];
            let x = ss.state_from_pid(&pid, Vector2::new(up[0], up[1]));
            let a = control_step(&sched, k, &pid, up);
            let b = sched.state_feedback_control(k, &x);
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_state_control_is_zero() {
        let (ss, gains) = design(&small_delay_plant([1.0, 4.0]), &weights());
        let sched = build_schedule(&gains, &ss, &SetpointSequence::constant([0.0, 0.0]), 5).unwrap();
        assert_eq!(control_step(&sched, 2, &PidState::default(), [0.0, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn short_reference_without_clamping_rejected() {
        let (ss, gains) = design(&small_delay_plant([1.0, 4.0]), &weights());
        let refs = SetpointSequence::new(vec![[1.0, 1.0]; 10]).without_extrapolation();
        let err = build_schedule(&gains, &ss, &refs, 8).unwrap_err();
        assert_eq!(
            err,
            Error::DelayMismatch {
                required: 8 + 4 + 4 + 1,
                available: 10
            }
        );
        let refs = SetpointSequence::new(vec![[1.0, 1.0]; 40]).without_extrapolation();
        assert!(build_schedule(&gains, &ss, &refs, 8).is_ok());
    }

    #[test]
    fn regimes() {
        assert_eq!(regime(0, 2, 5), Regime::OpenLoop);
        assert_eq!(regime(2, 2, 5), Regime::FirstInputLive);
        assert_eq!(regime(5, 2, 5), Regime::ClosedLoop);
        assert_eq!(regime(3, 3, 3), Regime::ClosedLoop);
    }

    #[test]
    fn equal_delays_share_prediction() {
        let dp = DiscretePlant::from_coefficients([[-0.8, -0.7], [-0.6, -0.9]], [[0.2, 0.1], [0.1, 0.3]], [3, 3], 1.0)
            .unwrap();
        let ss = assemble_state_space(&dp);
        let gains = design_gains(&ss, &weights()).unwrap();
        let clm = ClosedLoopMatrices::new(&ss, &gains);
        let refs = SetpointSequence::constant([1.0, 1.0]);
        let pred = predict_state_coefficients(&clm, &ss, 4, 1, &refs);
        assert_eq!(pred.coeff_h1, pred.coeff_h2);
        assert_eq!(pred.offset_h1, pred.offset_h2);
    }
}
