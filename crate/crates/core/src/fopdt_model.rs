//! Two-input two-output first-order-plus-dead-time plants.
//!
//! The continuous plant is a 2x2 matrix of `K e^{-L_j s} / (tau s + 1)` entries
//! where the dead time belongs to the *input* column `j`. It is discretized
//! per entry with a zero-order hold into
//!
//! ```text
//! y_i(z) = sum_j  b_ij z^{-h_j} / (z + a_ij) * u_j(z)
//! ```
//!
//! and rewritten in tracking-error coordinates as the six-state model
//!
//! ```text
//! X(k+1) = F X(k) + G U(k-h) + E r~(k)
//! X(k)   = M X~(k) + N U(k-1-h)
//! ```
//!
//! with `X~ = [e1(k), e1(k-1), theta1(k), e2(k), e2(k-1), theta2(k)]` the PID
//! state and `U(k-h) = [u1(k-h1), u2(k-h2)]` the equivalent (per-channel
//! delayed) control. The state components are
//!
//! ```text
//! X1 = e1(k)
//! X2 = -a11 a12 e1(k-1) - b11 a12 u1(k-1-h1) - b12 a11 u2(k-1-h2)
//! X3 = theta1(k)
//! ```
//!
//! and likewise `X4..X6` for channel 2.

use nalgebra::{Matrix6, SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix6x2 = SMatrix<f64, 6, 2>;

const DELAY_TOLERANCE: f64 = 1e-9;

/// Continuous 2x2 FOPDT plant. `dead_time[j]` is the delay of input `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPlant {
    pub gain: [[f64; 2]; 2],
    pub tau: [[f64; 2]; 2],
    pub dead_time: [f64; 2],
    pub sample_time: f64,
}

impl ContinuousPlant {
    pub fn new(
        gain: [[f64; 2]; 2],
        tau: [[f64; 2]; 2],
        dead_time: [f64; 2],
        sample_time: f64,
    ) -> Result<Self> {
        let plant = Self {
            gain,
            tau,
            dead_time,
            sample_time,
        };
        plant.validate()?;
        Ok(plant)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0) {
            return Err(Error::NonPositiveSampleTime(self.sample_time));
        }
        for row in 0..2 {
            for col in 0..2 {
                let value = self.tau[row][col];
                if !(value > 0.0) {
                    return Err(Error::NonPositiveTimeConstant { row, col, value });
                }
            }
        }
        self.delay_samples().map(|_| ())
    }

    /// Dead times expressed in whole samples, in the original input order.
    pub fn delay_samples(&self) -> Result<[usize; 2]> {
        let mut h = [0usize; 2];
        for (input, slot) in h.iter_mut().enumerate() {
            let dead_time = self.dead_time[input];
            let ratio = dead_time / self.sample_time;
            let rounded = ratio.round();
            if dead_time < 0.0 || (ratio - rounded).abs() > DELAY_TOLERANCE {
                return Err(Error::NonIntegerDelay {
                    input,
                    dead_time,
                    sample_time: self.sample_time,
                });
            }
            *slot = rounded as usize;
        }
        Ok(h)
    }

    /// Parametric model error: diagonal gains and time constants are scaled
    /// by `factor`, off-diagonal ones divided by it. Dead times are unchanged.
    pub fn with_mismatch(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for i in 0..2 {
            for j in 0..2 {
                let scale = if i == j { factor } else { 1.0 / factor };
                out.gain[i][j] *= scale;
                out.tau[i][j] *= scale;
            }
        }
        out
    }
}

/// Zero-order-hold discretization. Channels are relabeled so that `h1 <= h2`.
pub fn discretize(plant: &ContinuousPlant) -> Result<DiscretePlant> {
    let h = plant.delay_samples()?;
    discretize_as(plant, h[0] > h[1])
}

/// Zero-order-hold discretization with an explicit input ordering. Used to
/// discretize a simulation plant in the same internal order as the design
/// plant.
pub fn discretize_as(plant: &ContinuousPlant, swap_inputs: bool) -> Result<DiscretePlant> {
    plant.validate()?;
    let h = plant.delay_samples()?;
    let mut a = [[0.0; 2]; 2];
    let mut b = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let pole = (-plant.sample_time / plant.tau[i][j]).exp();
            a[i][j] = -pole;
            b[i][j] = plant.gain[i][j] * (1.0 - pole);
        }
    }
    let raw = DiscretePlant {
        a,
        b,
        h,
        sample_time: plant.sample_time,
        swapped: false,
    };
    raw.validate_poles()?;
    Ok(if swap_inputs { raw.swap_inputs() } else { raw })
}

/// Discrete plant in internal input order (`h1 <= h2` unless built with
/// [`discretize_as`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePlant {
    a: [[f64; 2]; 2],
    b: [[f64; 2]; 2],
    h: [usize; 2],
    sample_time: f64,
    swapped: bool,
}

impl DiscretePlant {
    /// Builds a plant from discrete coefficients given in external input
    /// order. Inputs are relabeled when `h[0] > h[1]`.
    pub fn from_coefficients(
        a: [[f64; 2]; 2],
        b: [[f64; 2]; 2],
        h: [usize; 2],
        sample_time: f64,
    ) -> Result<Self> {
        if !(sample_time > 0.0) {
            return Err(Error::NonPositiveSampleTime(sample_time));
        }
        let raw = Self {
            a,
            b,
            h,
            sample_time,
            swapped: false,
        };
        raw.validate_poles()?;
        Ok(if h[0] > h[1] { raw.swap_inputs() } else { raw })
    }

    fn validate_poles(&self) -> Result<()> {
        for row in 0..2 {
            for col in 0..2 {
                let value = self.a[row][col];
                if !(value.abs() < 1.0) {
                    return Err(Error::UnstableSubprocess { row, col, value });
                }
            }
        }
        Ok(())
    }

    fn swap_inputs(&self) -> Self {
        let mut out = self.clone();
        for i in 0..2 {
            out.a[i].swap(0, 1);
            out.b[i].swap(0, 1);
        }
        out.h.swap(0, 1);
        out.swapped = !self.swapped;
        out
    }

    /// Pole coefficient of output `i` with respect to internal input `j`.
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.b[i][j]
    }

    pub fn h1(&self) -> usize {
        self.h[0]
    }

    pub fn h2(&self) -> usize {
        self.h[1]
    }

    pub fn delays(&self) -> [usize; 2] {
        self.h
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    /// Whether internal input 1 is external input 2.
    pub fn swapped(&self) -> bool {
        self.swapped
    }

    /// Maps between external and internal input order (an involution).
    pub fn permute_inputs<T: Copy>(&self, u: [T; 2]) -> [T; 2] {
        if self.swapped {
            [u[1], u[0]]
        } else {
            u
        }
    }

    /// `a_i1 + a_i2`.
    pub fn pole_sum(&self, i: usize) -> f64 {
        self.a[i][0] + self.a[i][1]
    }

    /// `a_i1 * a_i2`.
    pub fn pole_product(&self, i: usize) -> f64 {
        self.a[i][0] * self.a[i][1]
    }

    /// Static gain `b / (1 + a)` of entry `(i, j)`.
    pub fn dc_gain(&self, i: usize, j: usize) -> f64 {
        self.b[i][j] / (1.0 + self.a[i][j])
    }
}

/// Discrete state-space model in tracking-error coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub f: Matrix6<f64>,
    pub g: Matrix6x2,
    pub e: Matrix6x2,
    pub m: Matrix6<f64>,
    pub n: Matrix6x2,
    plant: DiscretePlant,
}

impl StateSpace {
    pub fn plant(&self) -> &DiscretePlant {
        &self.plant
    }

    pub fn h1(&self) -> usize {
        self.plant.h1()
    }

    pub fn h2(&self) -> usize {
        self.plant.h2()
    }

    /// `X = M X~ + N U(k-1-h)`.
    pub fn state_from_pid(&self, pid: &PidState, u_prev_delayed: Vector2<f64>) -> Vector6<f64> {
        self.m * pid.to_vector() + self.n * u_prev_delayed
    }
}

pub fn assemble_state_space(dp: &DiscretePlant) -> StateSpace {
    let mut f = Matrix6::zeros();
    let mut g = Matrix6x2::zeros();
    let mut e = Matrix6x2::zeros();
    let mut m = Matrix6::zeros();
    let mut n = Matrix6x2::zeros();

    for ch in 0..2 {
        let o = 3 * ch;
        let (a1, a2) = (dp.a(ch, 0), dp.a(ch, 1));
        let (b1, b2) = (dp.b(ch, 0), dp.b(ch, 1));

        f[(o, o)] = -(a1 + a2);
        f[(o, o + 1)] = 1.0;
        f[(o + 1, o)] = -a1 * a2;
        f[(o + 2, o)] = 1.0;
        f[(o + 2, o + 2)] = 1.0;

        g[(o, 0)] = -b1;
        g[(o, 1)] = -b2;
        g[(o + 1, 0)] = -b1 * a2;
        g[(o + 1, 1)] = -b2 * a1;

        e[(o, ch)] = 1.0;

        m[(o, o)] = 1.0;
        m[(o + 1, o + 1)] = -a1 * a2;
        m[(o + 2, o + 2)] = 1.0;

        n[(o + 1, 0)] = -b1 * a2;
        n[(o + 1, 1)] = -b2 * a1;
    }

    StateSpace {
        f,
        g,
        e,
        m,
        n,
        plant: dp.clone(),
    }
}

/// `F X + G U(k-h) + E r~(k)`.
pub fn step_model(
    ss: &StateSpace,
    x: &Vector6<f64>,
    u_eq: &Vector2<f64>,
    r_tilde: &AuxReference,
) -> Vector6<f64> {
    ss.f * x + ss.g * u_eq + ss.e * r_tilde.to_vector()
}

/// Tracking errors and error integrals of both channels, in `X~` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub e1_k: f64,
    pub e1_km1: f64,
    pub theta1: f64,
    pub e2_k: f64,
    pub e2_km1: f64,
    pub theta2: f64,
}

impl PidState {
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.e1_k,
            self.e1_km1,
            self.theta1,
            self.e2_k,
            self.e2_km1,
            self.theta2,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            e1_k: v[0],
            e1_km1: v[1],
            theta1: v[2],
            e2_k: v[3],
            e2_km1: v[4],
            theta2: v[5],
        }
    }

    pub fn error(&self, ch: usize) -> f64 {
        if ch == 0 {
            self.e1_k
        } else {
            self.e2_k
        }
    }

    pub fn integral(&self, ch: usize) -> f64 {
        if ch == 0 {
            self.theta1
        } else {
            self.theta2
        }
    }

    /// Shift to the next sample: `e(k-1) <- e(k)`, `theta += e(k)` unless the
    /// channel's integrator is frozen, then `e(k) <- new_errors`.
    pub fn advance(&mut self, new_errors: [f64; 2], freeze: [bool; 2]) {
        if !freeze[0] {
            self.theta1 += self.e1_k;
        }
        if !freeze[1] {
            self.theta2 += self.e2_k;
        }
        self.e1_km1 = self.e1_k;
        self.e2_km1 = self.e2_k;
        self.e1_k = new_errors[0];
        self.e2_k = new_errors[1];
    }
}

/// Auxiliary reference `r~(k)` driving the error-coordinate model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AuxReference {
    pub r_tilde: [f64; 2],
}

impl AuxReference {
    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.r_tilde[0], self.r_tilde[1])
    }
}

/// A setpoint pair `r(k)` defined for every integer sample index.
pub trait ReferenceSource {
    fn setpoint(&self, k: i64) -> [f64; 2];
}

/// Finite setpoint sequence starting at sample 0. Lookups outside the stored
/// range clamp to the nearest stored value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointSequence {
    values: Vec<[f64; 2]>,
    extrapolate: bool,
}

impl SetpointSequence {
    pub fn new(values: Vec<[f64; 2]>) -> Self {
        assert!(!values.is_empty(), "setpoint sequence must not be empty");
        Self {
            values,
            extrapolate: true,
        }
    }

    pub fn constant(r: [f64; 2]) -> Self {
        Self::new(vec![r])
    }

    /// Disables clamped extrapolation; schedule construction then requires
    /// the sequence to cover every index it touches.
    pub fn without_extrapolation(mut self) -> Self {
        self.extrapolate = false;
        self
    }

    pub fn extrapolates(&self) -> bool {
        self.extrapolate
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    /// Overwrites channel `ch` from index `from` onward with `value`,
    /// extending the sequence if needed.
    pub fn set_from(&mut self, ch: usize, from: usize, value: f64) {
        if from >= self.values.len() {
            let last = *self.values.last().unwrap();
            self.values.resize(from + 1, last);
        }
        for v in &mut self.values[from..] {
            v[ch] = value;
        }
    }
}

impl ReferenceSource for SetpointSequence {
    fn setpoint(&self, k: i64) -> [f64; 2] {
        let idx = k.clamp(0, self.values.len() as i64 - 1) as usize;
        self.values[idx]
    }
}

/// `r~_i(k) = r_i(k+1) + (a_i1 + a_i2) r_i(k) + a_i1 a_i2 r_i(k-1)`.
pub fn aux_reference<R: ReferenceSource + ?Sized>(
    dp: &DiscretePlant,
    setpoints: &R,
    k: i64,
) -> AuxReference {
    let next = setpoints.setpoint(k + 1);
    let now = setpoints.setpoint(k);
    let prev = setpoints.setpoint(k - 1);
    let mut r_tilde = [0.0; 2];
    for (i, slot) in r_tilde.iter_mut().enumerate() {
        *slot = next[i] + dp.pole_sum(i) * now[i] + dp.pole_product(i) * prev[i];
    }
    AuxReference { r_tilde }
}
