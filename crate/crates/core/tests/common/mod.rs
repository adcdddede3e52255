#![allow(dead_code)]

use std::io::Write;

use nalgebra::{DMatrix, Vector6};
use predpid::fopdt_model::ContinuousPlant;
use predpid::simulator::{Disturbance, InputBounds, Injection, Scenario, SetpointStep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bake-plate process of the first simulation study.
pub fn bake_plate() -> ContinuousPlant {
    ContinuousPlant::new(
        [[2.67, 1.039], [1.039, 1.5595]],
        [[323.58, 759.2], [759.2, 524.5]],
        [60.0, 80.0],
        1.0,
    )
    .unwrap()
}

/// Identified thermal-chamber model.
pub fn chamber() -> ContinuousPlant {
    ContinuousPlant::new([[35.0, 25.5], [19.0, 31.5]], [[51.0, 99.0], [108.0, 68.0]], [2.0, 6.0], 0.1).unwrap()
}

pub const BAKE_Q1: [f64; 6] = [10.0, 0.0, 0.007, 50.0, 0.0, 0.1];
pub const CHAMBER_Q1: [f64; 6] = [1.0, 0.0, 0.001, 1.0, 0.0, 0.001];

pub fn bake_plate_scenario(duration: f64) -> Scenario {
    Scenario::new(bake_plate(), vec![SetpointStep { time: 150.0, r1: 10.0, r2: None }], 1.0, duration)
}

pub fn chamber_scenario() -> Scenario {
    Scenario::new(chamber(), vec![SetpointStep { time: 10.0, r1: 5.0, r2: None }], 1.0, 500.0)
        .with_bounds(InputBounds::uniform(0.0, 1.0))
        .with_operating_point([26.0, 26.0])
        .with_disturbance(Disturbance {
            magnitude: 1.0,
            gains: [-1.0, -1.0],
            onset: 250.0,
            end: None,
            injection: Injection::Output,
        })
}

/// Random stable FOPDT plant with integer delays `h1 <= h2 <= max_delay`.
pub fn random_plant(rng: &mut impl Rng, max_delay: usize) -> ContinuousPlant {
    let ts = 1.0;
    let mut gain = [[0.0; 2]; 2];
    let mut tau = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let magnitude = if i == j { rng.random_range(0.5..3.0) } else { rng.random_range(0.0..1.0) };
            gain[i][j] = if i != j && rng.random_bool(0.3) { -magnitude } else { magnitude };
            tau[i][j] = rng.random_range(2.0..40.0);
        }
    }
    let h1 = rng.random_range(0..=max_delay);
    let h2 = rng.random_range(h1..=max_delay);
    ContinuousPlant::new(gain, tau, [h1 as f64 * ts, h2 as f64 * ts], ts).unwrap()
}

/// Zero-order-hold coefficients `(a, b)` computed independently of the
/// library.
pub fn zoh(plant: &ContinuousPlant) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mut a = [[0.0; 2]; 2];
    let mut b = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let p = (-plant.sample_time / plant.tau[i][j]).exp();
            a[i][j] = -p;
            b[i][j] = plant.gain[i][j] * (1.0 - p);
        }
    }
    (a, b)
}

/// Backward dynamic-programming LQ solution of
/// `min sum_{i=1..N} x_i' Q_i x_i + sum_{i=0..N-1} u_i' R u_i`
/// subject to `x_{i+1} = F x_i + G u_i`; returns the first-step gain.
pub fn dp_first_gain(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &[DMatrix<f64>], r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.len();
    let mut p = q[n - 1].clone();
    let mut k = DMatrix::zeros(g.ncols(), f.ncols());
    for i in (0..n).rev() {
        let gtp = g.transpose() * &p;
        let s = r + &gtp * g;
        k = -s.clone().lu().solve(&(&gtp * f)).unwrap();
        let stage = if i == 0 { DMatrix::zeros(f.nrows(), f.ncols()) } else { q[i - 1].clone() };
        p = stage + f.transpose() * &p * (f + g * &k);
        p = (&p + p.transpose()) * 0.5;
    }
    k
}

/// Tracking-error state `X(k)` of a recorded trajectory (no relabeling,
/// zero history before the run).
pub struct Trajectory {
    pub a: [[f64; 2]; 2],
    pub b: [[f64; 2]; 2],
    pub h: [usize; 2],
    pub r: Vec<[f64; 2]>,
    pub y: Vec<[f64; 2]>,
    pub u: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn e(&self, k: i64) -> [f64; 2] {
        if k < 0 {
            return [0.0; 2];
        }
        let k = k as usize;
        [self.r[k][0] - self.y[k][0], self.r[k][1] - self.y[k][1]]
    }

    pub fn input(&self, j: usize, k: i64) -> f64 {
        if k < 0 {
            0.0
        } else {
            self.u[k as usize][j]
        }
    }

    pub fn state(&self, k: usize) -> Vector6<f64> {
        let mut x = Vector6::zeros();
        let k = k as i64;
        for ch in 0..2 {
            let o = 3 * ch;
            let (a1, a2) = (self.a[ch][0], self.a[ch][1]);
            let (b1, b2) = (self.b[ch][0], self.b[ch][1]);
            x[o] = self.e(k)[ch];
            x[o + 1] = -a1 * a2 * self.e(k - 1)[ch]
                - b1 * a2 * self.input(0, k - 1 - self.h[0] as i64)
                - b2 * a1 * self.input(1, k - 1 - self.h[1] as i64);
            x[o + 2] = (0..k).map(|j| self.e(j)[ch]).sum();
        }
        x
    }

    pub fn r_at(&self, k: i64) -> [f64; 2] {
        let idx = k.clamp(0, self.r.len() as i64 - 1) as usize;
        self.r[idx]
    }

    /// `r~(k)` from the recorded setpoints.
    pub fn r_tilde(&self, k: i64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let (a1, a2) = (self.a[i][0], self.a[i][1]);
            *o = self.r_at(k + 1)[i] + (a1 + a2) * self.r_at(k)[i] + a1 * a2 * self.r_at(k - 1)[i];
        }
        out
    }
}

/// One criterion line, written past the test harness's output capture.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {verdict} - {detail}");
}
