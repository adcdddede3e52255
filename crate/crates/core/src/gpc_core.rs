//! Finite-horizon unconstrained GPC on the error-coordinate model.
//!
//! The stacked prediction over `N` steps is
//! `Xbar = HF X(k) + P Ubar + Ebar Rtilde(k)` and the cost
//! `Xbar' Q Xbar + Ubar' R Ubar` is minimized in closed form. Only the first
//! input block of the optimal sequence is applied, which yields
//! `U(k-h) = K_gpc X(k) + K_ref Rtilde(k)`.

use nalgebra::{DMatrix, DVector, Matrix6, RowVector6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fopdt_model::StateSpace;

const MAX_CONDITION: f64 = 1e14;

/// Stacked prediction matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    /// Block rows `F^0 .. F^(N-1)`.
    pub h: DMatrix<f64>,
    /// Block lower-triangular Toeplitz matrix with blocks `F^(i-j) G`.
    pub p: DMatrix<f64>,
    /// Same structure as `p` with `E` in place of `G`.
    pub e_bar: DMatrix<f64>,
    /// `H F`, block rows `F^1 .. F^N`.
    pub hf: DMatrix<f64>,
    pub horizon: usize,
}

impl PredictionMatrices {
    pub fn from_matrices(
        f: &DMatrix<f64>,
        g: &DMatrix<f64>,
        e: &DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::ZeroHorizon);
        }
        let n = f.nrows();
        let m = g.ncols();
        let q = e.ncols();

        // powers[i] = F^i for i = 0..=N
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(DMatrix::identity(n, n));
        for i in 1..=horizon {
            let next = f * &powers[i - 1];
            powers.push(next);
        }

        let mut h = DMatrix::zeros(n * horizon, n);
        let mut hf = DMatrix::zeros(n * horizon, n);
        let mut p = DMatrix::zeros(n * horizon, m * horizon);
        let mut e_bar = DMatrix::zeros(n * horizon, q * horizon);
        let fg: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|fp| fp * g).collect();
        let fe: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|fp| fp * e).collect();

        for i in 0..horizon {
            h.view_mut((i * n, 0), (n, n)).copy_from(&powers[i]);
            hf.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
            for j in 0..=i {
                p.view_mut((i * n, j * m), (n, m)).copy_from(&fg[i - j]);
                e_bar.view_mut((i * n, j * q), (n, q)).copy_from(&fe[i - j]);
            }
        }

        Ok(Self {
            h,
            p,
            e_bar,
            hf,
            horizon,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.p.ncols() / self.horizon
    }

    /// `Xbar = HF x + P ubar + Ebar rbar`.
    pub fn predict(&self, x: &DVector<f64>, ubar: &DVector<f64>, rbar: &DVector<f64>) -> DVector<f64> {
        &self.hf * x + &self.p * ubar + &self.e_bar * rbar
    }
}

pub fn build_prediction(ss: &StateSpace, horizon: usize) -> Result<PredictionMatrices> {
    PredictionMatrices::from_matrices(
        &to_dynamic(&ss.f),
        &to_dynamic(&ss.g),
        &to_dynamic(&ss.e),
        horizon,
    )
}

fn to_dynamic<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Weights of the ratio-augmented cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// `diag(P1, 0, I1, P2, 0, I2)` in the usual tuning layout.
    pub q1_diag: [f64; 6],
    /// Ratio-error weight.
    pub beta: f64,
    /// Ratio-integral weight.
    pub gamma: f64,
    /// Desired output ratio `y2 / y1`.
    pub alpha: f64,
    /// Control weight, `R = epsilon I`.
    pub epsilon: f64,
    pub horizon: usize,
    /// Optional per-step state weights overriding the constant stage weight.
    #[serde(default, skip)]
    pub per_step_q: Option<Vec<Matrix6<f64>>>,
}

impl CostWeights {
    pub fn new(q1_diag: [f64; 6], epsilon: f64, beta: f64, gamma: f64, alpha: f64, horizon: usize) -> Self {
        Self {
            q1_diag,
            beta,
            gamma,
            alpha,
            epsilon,
            horizon,
            per_step_q: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::ZeroHorizon);
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidWeights(format!(
                "epsilon = {} but R must be positive definite",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidWeights(format!("alpha = {} must be positive", self.alpha)));
        }
        if self.q1_diag.iter().any(|q| !(*q >= 0.0) || !q.is_finite()) {
            return Err(Error::InvalidWeights(format!(
                "Q1 diagonal {:?} must be nonnegative",
                self.q1_diag
            )));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidWeights(format!(
                "beta = {}, gamma = {} must be nonnegative",
                self.beta, self.gamma
            )));
        }
        if let Some(per_step) = &self.per_step_q {
            if per_step.len() != self.horizon {
                return Err(Error::InvalidWeights(format!(
                    "{} per-step weights supplied for horizon {}",
                    per_step.len(),
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    /// `M2 = [1 0 0 -1/alpha 0 0]`, so that `|M2 X|^2 = (e1 - e2/alpha)^2`.
    pub fn m2(&self) -> RowVector6<f64> {
        RowVector6::new(1.0, 0.0, 0.0, -1.0 / self.alpha, 0.0, 0.0)
    }

    /// `M3 = [0 0 1 0 0 -1/alpha]`, so that `|M3 X|^2 = (theta1 - theta2/alpha)^2`.
    pub fn m3(&self) -> RowVector6<f64> {
        RowVector6::new(0.0, 0.0, 1.0, 0.0, 0.0, -1.0 / self.alpha)
    }

    /// `Q1 + beta M2'M2 + gamma M3'M3`.
    pub fn stage_weight(&self) -> Matrix6<f64> {
        let q1 = Matrix6::from_diagonal(&nalgebra::Vector6::from_row_slice(&self.q1_diag));
        let m2 = self.m2();
        let m3 = self.m3();
        q1 + m2.transpose() * m2 * self.beta + m3.transpose() * m3 * self.gamma
    }
}

/// Block-diagonal `Q` over the horizon and `R = epsilon I`.
pub fn assemble_cost(weights: &CostWeights) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    weights.validate()?;
    let n = weights.horizon;
    let stage = weights.stage_weight();
    let mut q_big = DMatrix::zeros(6 * n, 6 * n);
    for j in 0..n {
        let block = match &weights.per_step_q {
            Some(per_step) => per_step[j],
            None => stage,
        };
        q_big.view_mut((6 * j, 6 * j), (6, 6)).copy_from(&block);
    }
    let r_big = DMatrix::identity(2 * n, 2 * n) * weights.epsilon;
    Ok((q_big, r_big))
}

/// First input block of the optimal sequence for arbitrary dimensions:
/// `Ubar* = K_state x + K_ref_full rbar`, returned as the first `m` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstBlockGains {
    pub k_state: DMatrix<f64>,
    pub k_ref: DMatrix<f64>,
}

pub fn solve_first_block(
    pm: &PredictionMatrices,
    q_big: &DMatrix<f64>,
    r_big: &DMatrix<f64>,
) -> Result<FirstBlockGains> {
    let m = pm.input_dim();
    let pt_q = pm.p.transpose() * q_big;
    let normal = &pt_q * &pm.p + r_big;
    let normal = (&normal + normal.transpose()) * 0.5;

    let chol = normal
        .clone()
        .cholesky()
        .ok_or(Error::SingularSystem { condition: f64::INFINITY })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
    let condition = (hi / lo).powi(2);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::SingularSystem { condition });
    }

    let state_rhs = &pt_q * &pm.hf;
    let ref_rhs = &pt_q * &pm.e_bar;
    let state_sol = chol.solve(&state_rhs);
    let ref_sol = chol.solve(&ref_rhs);

    Ok(FirstBlockGains {
        k_state: -state_sol.rows(0, m).into_owned(),
        k_ref: -ref_sol.rows(0, m).into_owned(),
    })
}

/// Receding-horizon gains `U(k-h) = K_gpc X(k) + K_ref Rtilde(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcGains {
    pub k_gpc: SMatrix<f64, 2, 6>,
    /// `2 x 2N`, acting on `[r~(k); r~(k+1); ...; r~(k+N-1)]`.
    pub k_ref: DMatrix<f64>,
    pub horizon: usize,
}

impl GpcGains {
    pub fn k1_gpc(&self) -> RowVector6<f64> {
        self.k_gpc.row(0).into_owned()
    }

    pub fn k2_gpc(&self) -> RowVector6<f64> {
        self.k_gpc.row(1).into_owned()
    }
}

pub fn solve_gains(
    pm: &PredictionMatrices,
    q_big: &DMatrix<f64>,
    r_big: &DMatrix<f64>,
) -> Result<GpcGains> {
    let block = solve_first_block(pm, q_big, r_big)?;
    if block.k_state.shape() != (2, 6) {
        return Err(Error::InvalidWeights(format!(
            "expected a 2x6 state gain, got {:?}",
            block.k_state.shape()
        )));
    }
    Ok(GpcGains {
        k_gpc: SMatrix::<f64, 2, 6>::from_iterator(block.k_state.iter().copied()),
        k_ref: block.k_ref,
        horizon: pm.horizon,
    })
}

/// Prediction, cost assembly and solve in one call.
pub fn design_gains(ss: &StateSpace, weights: &CostWeights) -> Result<GpcGains> {
    let pm = build_prediction(ss, weights.horizon)?;
    let (q, r) = assemble_cost(weights)?;
    solve_gains(&pm, &q, &r)
}

/// `J = Xbar' Q Xbar + Ubar' R Ubar` for a given input sequence.
pub fn stacked_cost(
    pm: &PredictionMatrices,
    q_big: &DMatrix<f64>,
    r_big: &DMatrix<f64>,
    x: &DVector<f64>,
    ubar: &DVector<f64>,
    rbar: &DVector<f64>,
) -> f64 {
    let xbar = pm.predict(x, ubar, rbar);
    (xbar.transpose() * q_big * &xbar)[(0, 0)] + (ubar.transpose() * r_big * ubar)[(0, 0)]
}

/// Full optimal input sequence `Ubar*`.
pub fn optimal_sequence(
    pm: &PredictionMatrices,
    q_big: &DMatrix<f64>,
    r_big: &DMatrix<f64>,
    x: &DVector<f64>,
    rbar: &DVector<f64>,
) -> Result<DVector<f64>> {
    let pt_q = pm.p.transpose() * q_big;
    let normal = &pt_q * &pm.p + r_big;
    let chol = normal
        .cholesky()
        .ok_or(Error::SingularSystem { condition: f64::INFINITY })?;
    let rhs = &pt_q * (&pm.hf * x + &pm.e_bar * rbar);
    Ok(-chol.solve(&rhs))
}
