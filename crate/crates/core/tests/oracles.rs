//! Library results checked against independent computations.

mod common;

use approx::assert_relative_eq;
use common::*;
use nalgebra::{DMatrix, DVector, Vector2};
use predpid::fopdt_model::{assemble_state_space, aux_reference, discretize, step_model, SetpointSequence};
use predpid::gpc_core::{
    assemble_cost, build_prediction, design_gains, optimal_sequence, solve_gains, stacked_cost, CostWeights,
    PredictionMatrices,
};
use predpid::simulator::{predictive_schedule, run, ControllerSpec, Scenario, SetpointStep};
use predpid::stability::eigenvalues;
use predpid::tuning::ultimate_of;
use rand::Rng;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn gpc_gain_matches_dynamic_programming() {
    let mut rng = rng(11);
    for _ in 0..20 {
        let n = 6;
        let f = random_matrix(&mut rng, n, n) * 0.4;
        let g = random_matrix(&mut rng, n, 2);
        let e = random_matrix(&mut rng, n, 2);
        let horizon = rng.random_range(1..=6);
        let pm = PredictionMatrices::from_matrices(&f, &g, &e, horizon).unwrap();
        let stages: Vec<DMatrix<f64>> = (0..horizon)
            .map(|_| {
                let a = random_matrix(&mut rng, n, n);
                &a * a.transpose() + DMatrix::identity(n, n) * 0.1
            })
            .collect();
        let mut q_big = DMatrix::zeros(n * horizon, n * horizon);
        for (j, q) in stages.iter().enumerate() {
            q_big.view_mut((n * j, n * j), (n, n)).copy_from(q);
        }
        let r = DMatrix::identity(2, 2) * rng.random_range(0.1..2.0);
        let r_big = DMatrix::identity(2 * horizon, 2 * horizon) * r[(0, 0)];
        let gains = solve_gains(&pm, &q_big, &r_big).unwrap();
        let oracle = dp_first_gain(&f, &g, &stages, &r);
        let k = DMatrix::from_column_slice(2, 6, gains.k_gpc.as_slice());
        let rel = (&k - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-9, "relative error {rel}");
    }
}

#[test]
fn optimal_sequence_is_stationary() {
    // The analytic optimum must beat every perturbation and have zero
    // finite-difference gradient.
    let ss = assemble_state_space(&discretize(&bake_plate()).unwrap());
    let w = CostWeights::new(BAKE_Q1, 0.6, 10.0, 0.1, 1.0, 5);
    let pm = build_prediction(&ss, 5).unwrap();
    let (q, r) = assemble_cost(&w).unwrap();
    let mut rng = rng(3);
    let x = DVector::from_fn(6, |_, _| rng.random_range(-5.0..5.0));
    let rbar = DVector::from_fn(10, |_, _| rng.random_range(-0.1..0.1));
    let u = optimal_sequence(&pm, &q, &r, &x, &rbar).unwrap();
    let j0 = stacked_cost(&pm, &q, &r, &x, &u, &rbar);
    let step = 1e-4;
    for i in 0..u.len() {
        let mut plus = u.clone();
        plus[i] += step;
        let mut minus = u.clone();
        minus[i] -= step;
        let jp = stacked_cost(&pm, &q, &r, &x, &plus, &rbar);
        let jm = stacked_cost(&pm, &q, &r, &x, &minus, &rbar);
        let grad = (jp - jm) / (2.0 * step);
        assert!(grad.abs() < 1e-6 * j0.max(1.0), "gradient {grad} at {i}");
        assert!(jp >= j0 && jm >= j0);
    }
    for _ in 0..50 {
        let du = DVector::from_fn(u.len(), |_, _| rng.random_range(-1.0..1.0));
        assert!(stacked_cost(&pm, &q, &r, &x, &(&u + du), &rbar) > j0);
    }
}

#[test]
fn first_block_of_sequence_is_receding_law() {
    let ss = assemble_state_space(&discretize(&chamber()).unwrap());
    let w = CostWeights::new(CHAMBER_Q1, 5.0, 5.0, 0.15, 1.0, 5);
    let gains = design_gains(&ss, &w).unwrap();
    let pm = build_prediction(&ss, 5).unwrap();
    let (q, r) = assemble_cost(&w).unwrap();
    let mut rng = rng(5);
    let x6 = nalgebra::Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let x = DVector::from_column_slice(x6.as_slice());
    let rbar = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
    let u = optimal_sequence(&pm, &q, &r, &x, &rbar).unwrap();
    let law = gains.k_gpc * x6 + Vector2::from_column_slice((&gains.k_ref * &rbar).as_slice());
    assert_relative_eq!(u[0], law[0], epsilon = 1e-10, max_relative = 1e-10);
    assert_relative_eq!(u[1], law[1], epsilon = 1e-10, max_relative = 1e-10);
}

#[test]
fn state_space_matches_difference_equations() {
    let mut rng = rng(21);
    for _ in 0..5 {
        let plant = random_plant(&mut rng, 6);
        let (a, b) = zoh(&plant);
        let h = plant.delay_samples().unwrap();
        let steps = 300;
        let u: Vec<[f64; 2]> = (0..steps).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let r: Vec<[f64; 2]> = (0..steps + 2).map(|k| if k < 40 { [0.0; 2] } else { [1.0, 0.7] }).collect();
        let mut sub = [[0.0; 2]; 2];
        let mut y = Vec::new();
        for k in 0..steps {
            y.push([sub[0][0] + sub[0][1], sub[1][0] + sub[1][1]]);
            for i in 0..2 {
                for j in 0..2 {
                    let uj = if k >= h[j] { u[k - h[j]][j] } else { 0.0 };
                    sub[i][j] = -a[i][j] * sub[i][j] + b[i][j] * uj;
                }
            }
        }
        let traj = Trajectory { a, b, h, r: r.clone(), y, u: u.clone() };
        let ss = assemble_state_space(&discretize(&plant).unwrap());
        assert!(!ss.plant().swapped());
        let refs = SetpointSequence::new(r);
        let mut x = traj.state(0);
        for k in 0..steps - 1 {
            let ueq = Vector2::new(traj.input(0, k as i64 - h[0] as i64), traj.input(1, k as i64 - h[1] as i64));
            x = step_model(&ss, &x, &ueq, &aux_reference(ss.plant(), &refs, k as i64));
            let expect = traj.state(k + 1);
            assert!((x - expect).amax() < 1e-9, "step {k}: {}", (x - expect).amax());
        }
    }
}

/// `u_i(k) = K_i,gpc X(k + h_i) + K_i,ref R~(k + h_i)` evaluated on the
/// simulated trajectory itself must reproduce the applied input.
#[test]
fn pid_form_matches_delayed_state_law_on_small_plant() {
    let plant = predpid::fopdt_model::ContinuousPlant::new(
        [[1.0, 0.3], [0.2, 0.8]],
        [[10.0, 15.0], [12.0, 8.0]],
        [2.0, 5.0],
        1.0,
    )
    .unwrap();
    let sc = Scenario::new(plant.clone(), vec![SetpointStep { time: 12.0, r1: 1.0, r2: None }], 1.0, 120.0);
    let w = CostWeights::new([1.0, 0.0, 0.01, 2.0, 0.0, 0.02], 0.7, 2.0, 0.1, 1.0, 4);
    let sched = predictive_schedule(&sc, &w).unwrap();
    let res = run(&sc, &ControllerSpec::PredictivePid { schedule: sched.clone() }).unwrap();
    let (a, b) = zoh(&plant);
    let h = plant.delay_samples().unwrap();
    let traj = Trajectory {
        a,
        b,
        h,
        r: res.r1.iter().zip(&res.r2).map(|(p, q)| [*p, *q]).collect(),
        y: res.y1.iter().zip(&res.y2).map(|(p, q)| [*p, *q]).collect(),
        u: res.u1.iter().zip(&res.u2).map(|(p, q)| [*p, *q]).collect(),
    };
    let gains = sched.gpc_gains();
    let n = gains.horizon;
    for k in 0..res.time.len() - h[1] - 1 {
        for ch in 0..2 {
            let l = k + h[ch];
            let x = traj.state(l);
            let rbar: Vec<f64> = (0..n).flat_map(|j| traj.r_tilde((l + j) as i64)).collect();
            let law = (gains.k_gpc.row(ch) * x)[0] + (gains.k_ref.row(ch) * DVector::from_vec(rbar))[0];
            let applied = traj.u[k][ch];
            assert!((law - applied).abs() < 1e-10, "k={k} ch={ch}: {law} vs {applied}");
        }
    }
}

#[test]
fn ultimate_gain_sits_on_stability_boundary() {
    // Closed-loop poles of b z^-h/(z+a) under gain K are the roots of
    // z^(h+1) + a z^h + K b.
    let roots_radius = |a: f64, b: f64, h: usize, k: f64| {
        let d = h + 1;
        let mut c = DMatrix::zeros(d, d);
        for i in 0..d - 1 {
            c[(i, i + 1)] = 1.0;
        }
        c[(d - 1, d - 1)] = -a;
        c[(d - 1, 0)] = -k * b;
        eigenvalues(&c).unwrap().iter().map(|l| l.norm()).fold(0.0, f64::max)
    };
    let mut rng = rng(8);
    for _ in 0..40 {
        let a = -rng.random_range(0.05..0.99);
        let b = rng.random_range(0.01..3.0);
        let h = rng.random_range(1..15);
        let u = ultimate_of(a, b, h, 1.0).unwrap();
        assert!(roots_radius(a, b, h, u.ku * (1.0 - 1e-6)) < 1.0);
        assert!(roots_radius(a, b, h, u.ku * (1.0 + 1e-6)) > 1.0);
    }
}

#[test]
fn chamber_loop_crossover_matches_frequency_sweep() {
    let dp = predpid::fopdt_model::discretize_as(&chamber(), false).unwrap();
    let u = predpid::tuning::find_ultimate(&dp, 0).unwrap();
    let (a, b, h) = (dp.a(0, 0), dp.b(0, 0), dp.delays()[0] as f64);
    // sweep for the first frequency whose unwrapped phase passes -pi
    let samples = 200_000;
    let mut crossing = None;
    for s in 1..samples {
        let w = std::f64::consts::PI * s as f64 / samples as f64;
        let phase = -h * w - w.sin().atan2(w.cos() + a);
        if phase <= -std::f64::consts::PI {
            crossing = Some(w);
            break;
        }
    }
    let w = crossing.unwrap();
    let mag = b / ((w.cos() + a).powi(2) + w.sin().powi(2)).sqrt();
    // the sweep brackets the crossing to one grid step
    assert!(w - u.omega >= 0.0 && w - u.omega <= std::f64::consts::PI / samples as f64);
    assert_relative_eq!(u.ku, 1.0 / mag, max_relative = 1e-3);
    assert!((u.ku * 35.0).is_finite() && u.ku * 35.0 > 1.0);
}
