mod common;

use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use predpid::fopdt_model::{discretize, ContinuousPlant, PidState};
use predpid::gpc_core::CostWeights;
use predpid::simulator::{predictive_schedule, run, run_baseline_parallel, ControllerSpec, PiGains, Scenario, SetpointStep};
use proptest::prelude::*;

fn plant_strategy() -> impl Strategy<Value = ContinuousPlant> {
    (
        prop::array::uniform4(0.1f64..3.0),
        prop::array::uniform4(1.0f64..50.0),
        0usize..6,
        0usize..6,
    )
        .prop_map(|(k, t, h1, h2)| {
            ContinuousPlant::new(
                [[k[0], k[1]], [k[2], k[3]]],
                [[t[0], t[1]], [t[2], t[3]]],
                [h1 as f64, h2 as f64],
                1.0,
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn discrete_dc_gain_equals_continuous_gain(plant in plant_strategy()) {
        let dp = discretize(&plant).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let ext = dp.permute_inputs([0usize, 1])[j];
                let k = plant.gain[i][ext];
                prop_assert!((dp.dc_gain(i, j) - k).abs() <= 1e-12 * k.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stage_weight_is_positive_semidefinite(
        q in prop::array::uniform6(0.0f64..100.0),
        beta in 0.0f64..100.0,
        gamma in 0.0f64..10.0,
        alpha in 0.1f64..10.0,
    ) {
        let w = CostWeights::new(q, 1.0, beta, gamma, alpha, 3);
        let s = w.stage_weight();
        let dynamic = DMatrix::from_column_slice(6, 6, s.as_slice());
        let eig = SymmetricEigen::new(dynamic);
        let scale = s.amax().max(1.0);
        prop_assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-12 * scale));
        prop_assert!((s - s.transpose()).amax() == 0.0);
    }

    #[test]
    fn integral_state_sums_errors(errors in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..60)) {
        let mut pid = PidState::default();
        for (e1, e2) in &errors {
            pid.advance([*e1, *e2], [false; 2]);
        }
        // theta(k) accumulates e(0..k-1)
        let n = errors.len() - 1;
        let s1: f64 = errors[..n].iter().map(|e| e.0).sum();
        let s2: f64 = errors[..n].iter().map(|e| e.1).sum();
        prop_assert!((pid.theta1 - s1).abs() < 1e-9);
        prop_assert!((pid.theta2 - s2).abs() < 1e-9);
        prop_assert_eq!(pid.e1_k, errors[n].0);
    }

    #[test]
    fn predictive_loop_is_linear_in_setpoint(plant in plant_strategy(), scale in -3.0f64..3.0) {
        let w = CostWeights::new([1.0, 0.0, 0.01, 1.0, 0.0, 0.01], 1.0, 1.0, 0.05, 1.0, 3);
        let scenario = |r1: f64| Scenario::new(plant.clone(), vec![SetpointStep { time: 5.0, r1, r2: None }], 1.0, 80.0);
        let base = scenario(1.0);
        let scaled = scenario(scale);
        let a = run(&base, &ControllerSpec::PredictivePid { schedule: predictive_schedule(&base, &w).unwrap() });
        let b = run(&scaled, &ControllerSpec::PredictivePid { schedule: predictive_schedule(&scaled, &w).unwrap() });
        if let (Ok(a), Ok(b)) = (a, b) {
            let ypeak = a.y1.iter().chain(&a.y2).fold(1.0f64, |m, v| m.max(v.abs()));
            let upeak = a.u1.iter().chain(&a.u2).fold(1.0f64, |m, v| m.max(v.abs()));
            let s = scale.abs().max(1.0);
            for k in 0..a.y1.len() {
                prop_assert!((b.y1[k] - scale * a.y1[k]).abs() <= 1e-9 * ypeak * s);
                prop_assert!((b.u2[k] - scale * a.u2[k]).abs() <= 1e-9 * upeak * s);
            }
        }
    }

    #[test]
    fn recorded_ratio_error_matches_outputs(
        plant in plant_strategy(),
        alpha in 0.5f64..2.0,
        mismatch in 0.7f64..1.4,
    ) {
        let sc = Scenario::new(plant, vec![SetpointStep { time: 0.0, r1: 1.0, r2: None }], alpha, 60.0)
            .with_mismatch(mismatch);
        let gains = [PiGains { kp: 0.2, ki: 0.02 }; 2];
        if let Ok(res) = run_baseline_parallel(&sc, gains) {
            for k in 0..res.e_m.len() {
                prop_assert_eq!(res.e_m[k], alpha * res.y1[k] - res.y2[k]);
            }
            prop_assert!(res.metrics.rms >= res.metrics.mean.abs());
        }
    }
}

#[test]
fn random_plants_discretize_consistently_with_oracle() {
    let mut rng = rng(2);
    for _ in 0..50 {
        let plant = random_plant(&mut rng, 8);
        let (a, b) = zoh(&plant);
        let dp = predpid::fopdt_model::discretize_as(&plant, false).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(dp.a(i, j), a[i][j]);
                assert_eq!(dp.b(i, j), b[i][j]);
            }
        }
    }
}
