//! Delay-aware closed-loop stability.
//!
//! Past the initial delay period the reference-free loop obeys
//!
//! ```text
//! X(k+1) = F X(k) + G K1 Fbar^h1 X(k-h1) + G K2 Fbar^h2 X(k-h2)
//! ```
//!
//! with `K1 = [K1_gpc; 0]` and `K2 = [0; K2_gpc]`. Lifting the history
//! `[X(k-h2) .. X(k)]` gives a block companion matrix whose eigenvalues are
//! exactly the roots of
//! `det(lambda^(h2+1) I - F lambda^h2 - G K1 Fbar^h1 lambda^(h2-h1) - G K2 Fbar^h2)`.
//! Reduced-size determinant methods exist for large lifts but at
//! `6 (h2 + 1) <= ~500` the dense eigenvalue route is fine.

use nalgebra::{linalg::Schur, DMatrix, Matrix6};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fopdt_model::StateSpace;
use crate::gpc_core::GpcGains;

pub const DEFAULT_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Eigenvalues of the lifted companion matrix, `6 (h2 + 1)` of them.
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    pub stable: bool,
    pub margin: f64,
    /// Spectral radius of `Fbar` alone (necessary condition only).
    pub corollary_radius: f64,
    /// State indices left out of the test (see [`check_loop_stability`]).
    #[serde(default)]
    pub excluded_states: Vec<usize>,
}

/// Matrices of the delayed reference-free closed loop.
#[derive(Debug, Clone)]
pub struct DelayedLoop {
    pub f: Matrix6<f64>,
    pub f_bar: Matrix6<f64>,
    /// `G [K1_gpc; 0]`.
    pub gk1: Matrix6<f64>,
    /// `G [0; K2_gpc]`.
    pub gk2: Matrix6<f64>,
    pub h1: usize,
    pub h2: usize,
}

impl DelayedLoop {
    pub fn new(ss: &StateSpace, gains: &GpcGains) -> Self {
        let mut k1 = gains.k_gpc;
        k1.row_mut(1).fill(0.0);
        let mut k2 = gains.k_gpc;
        k2.row_mut(0).fill(0.0);
        Self {
            f: ss.f,
            f_bar: ss.f + ss.g * gains.k_gpc,
            gk1: ss.g * k1,
            gk2: ss.g * k2,
            h1: ss.h1(),
            h2: ss.h2(),
        }
    }

    /// Coefficient of `X(k-h1)`.
    pub fn delayed_term_1(&self) -> Matrix6<f64> {
        self.gk1 * self.f_bar.pow(self.h1 as u32)
    }

    /// Coefficient of `X(k-h2)`.
    pub fn delayed_term_2(&self) -> Matrix6<f64> {
        self.gk2 * self.f_bar.pow(self.h2 as u32)
    }
}

/// Block companion matrix of `x(k+1) = f x(k) + sum_i terms_i x(k - lag_i)`
/// over the lifted history `[x(k-max_lag) .. x(k)]`. Terms with equal lags
/// are summed.
pub fn companion_from_delays(f: &DMatrix<f64>, terms: &[(usize, DMatrix<f64>)], max_lag: usize) -> DMatrix<f64> {
    let n = f.nrows();
    let dim = n * (max_lag + 1);
    let mut c = DMatrix::zeros(dim, dim);
    for i in 0..max_lag {
        for d in 0..n {
            c[(i * n + d, (i + 1) * n + d)] = 1.0;
        }
    }
    let bottom = max_lag * n;
    {
        let mut block = c.view_mut((bottom, bottom), (n, n));
        block += f;
    }
    for (lag, term) in terms {
        assert!(*lag <= max_lag, "lag {lag} exceeds lifted history {max_lag}");
        let col = (max_lag - lag) * n;
        let mut block = c.view_mut((bottom, col), (n, n));
        block += term;
    }
    c
}

pub fn build_companion(ss: &StateSpace, gains: &GpcGains) -> DMatrix<f64> {
    let dl = DelayedLoop::new(ss, gains);
    let dynamic = |m: Matrix6<f64>| DMatrix::from_column_slice(6, 6, m.as_slice());
    companion_from_delays(
        &dynamic(dl.f),
        &[(dl.h1, dynamic(dl.delayed_term_1())), (dl.h2, dynamic(dl.delayed_term_2()))],
        dl.h2,
    )
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let dim = m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 200 * dim.max(10))
        .ok_or(Error::EigenvalueFailure { dimension: dim })?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_radius(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|l| l.norm()).fold(0.0, f64::max)
}

pub fn check_stability(ss: &StateSpace, gains: &GpcGains) -> Result<StabilityReport> {
    check_stability_with_margin(ss, gains, DEFAULT_MARGIN)
}

pub fn check_stability_with_margin(ss: &StateSpace, gains: &GpcGains, margin: f64) -> Result<StabilityReport> {
    let companion = build_companion(ss, gains);
    let eigs = eigenvalues(&companion)?;
    let rho = spectral_radius(&eigs);
    let f_bar = DelayedLoop::new(ss, gains).f_bar;
    let f_bar_dyn = DMatrix::from_column_slice(6, 6, f_bar.as_slice());
    let corollary_radius = spectral_radius(&eigenvalues(&f_bar_dyn)?);
    Ok(StabilityReport {
        eigenvalues: eigs,
        spectral_radius: rho,
        stable: rho < 1.0 - margin,
        margin,
        corollary_radius,
        excluded_states: Vec::new(),
    })
}

/// Integral states (indices 2 and 5) that no feedback gain reads.
pub fn unread_integrators(gains: &GpcGains) -> Vec<usize> {
    let scale = gains.k_gpc.amax().max(f64::MIN_POSITIVE);
    [2usize, 5]
        .into_iter()
        .filter(|&c| gains.k_gpc.column(c).amax() <= 1e-12 * scale)
        .collect()
}

/// Stability of the modes the controller acts on.
///
/// With zero integral weight an integral state is a pure accumulator of its
/// channel error: nothing reads it, so its unit eigenvalue says nothing about
/// the loop. Such states decouple exactly (their columns of `F` and of the
/// delayed terms vanish off the diagonal) and are removed before the test.
/// When every integral state is read this is [`check_stability_with_margin`].
pub fn check_loop_stability(ss: &StateSpace, gains: &GpcGains, margin: f64) -> Result<StabilityReport> {
    let drop = unread_integrators(gains);
    if drop.is_empty() {
        return check_stability_with_margin(ss, gains, margin);
    }
    let dl = DelayedLoop::new(ss, gains);
    let keep: Vec<usize> = (0..6).filter(|i| !drop.contains(i)).collect();
    let reduce = |m: Matrix6<f64>| DMatrix::from_fn(keep.len(), keep.len(), |r, c| m[(keep[r], keep[c])]);
    let companion = companion_from_delays(
        &reduce(dl.f),
        &[(dl.h1, reduce(dl.delayed_term_1())), (dl.h2, reduce(dl.delayed_term_2()))],
        dl.h2,
    );
    let eigs = eigenvalues(&companion)?;
    let rho = spectral_radius(&eigs);
    let corollary_radius = spectral_radius(&eigenvalues(&reduce(dl.f_bar))?);
    Ok(StabilityReport {
        eigenvalues: eigs,
        spectral_radius: rho,
        stable: rho < 1.0 - margin,
        margin,
        corollary_radius,
        excluded_states: drop,
    })
}

fn complexify(m: &Matrix6<f64>) -> Matrix6<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn characteristic_matrix(dl: &DelayedLoop, lambda: Complex64) -> Matrix6<Complex64> {
    let (h1, h2) = (dl.h1 as i32, dl.h2 as i32);
    let eye = Matrix6::<Complex64>::identity();
    eye * lambda.powi(h2 + 1)
        - complexify(&dl.f) * lambda.powi(h2)
        - complexify(&dl.delayed_term_1()) * lambda.powi(h2 - h1)
        - complexify(&dl.delayed_term_2())
}

/// `det(lambda^(h2+1) I - F lambda^h2 - G K1 Fbar^h1 lambda^(h2-h1) - G K2 Fbar^h2)`.
pub fn determinant_residual(ss: &StateSpace, gains: &GpcGains, lambda: Complex64) -> Complex64 {
    characteristic_matrix(&DelayedLoop::new(ss, gains), lambda).determinant()
}

/// Determinant residual divided by the product of the characteristic
/// matrix's row norms (Hadamard bound), so that values are comparable across
/// delays and evaluation points.
pub fn normalized_residual(ss: &StateSpace, gains: &GpcGains, lambda: Complex64) -> f64 {
    let m = characteristic_matrix(&DelayedLoop::new(ss, gains), lambda);
    let scale: f64 = (0..6)
        .map(|i| m.row(i).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .product();
    if scale == 0.0 {
        return 0.0;
    }
    m.determinant().norm() / scale
}

/// The same determinant evaluated through the factorization
/// `[lambda^h2 I + G K1 sum_{j<h1} Fbar^j lambda^(h2-1-j) + G K2 sum_{j<h2} Fbar^j lambda^(h2-1-j)] (lambda I - Fbar)`.
pub fn factorized_determinant(ss: &StateSpace, gains: &GpcGains, lambda: Complex64) -> Complex64 {
    let dl = DelayedLoop::new(ss, gains);
    let f_bar = complexify(&dl.f_bar);
    let eye = Matrix6::<Complex64>::identity();
    let mut sum1 = Matrix6::<Complex64>::zeros();
    let mut sum2 = Matrix6::<Complex64>::zeros();
    let mut power = eye;
    for j in 0..dl.h2 {
        let term = power * lambda.powi((dl.h2 - 1 - j) as i32);
        if j < dl.h1 {
            sum1 += term;
        }
        sum2 += term;
        power *= f_bar;
    }
    let left = eye * lambda.powi(dl.h2 as i32) + complexify(&dl.gk1) * sum1 + complexify(&dl.gk2) * sum2;
    left.determinant() * (eye * lambda - f_bar).determinant()
}
