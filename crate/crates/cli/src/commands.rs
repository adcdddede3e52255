//! `design`, `stability`, `simulate` and `tune`.

use std::path::Path;

use predpid::fopdt_model::{assemble_state_space, discretize, StateSpace};
use predpid::gpc_core::{design_gains, CostWeights, GpcGains};
use predpid::pid_schedule::GainSchedule;
use predpid::simulator::{predictive_schedule, run, ControllerSpec, Metrics, SimResult};
use predpid::stability::{check_loop_stability, StabilityReport, DEFAULT_MARGIN};
use predpid::tuning::{tune, TuningContext, TuningResult};
use predpid::Error;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ControllerConfig, DesignConfig, RunConfig, WeightOverride};
use crate::output::{self, MetricsRecord};
use crate::{CliError, Status};

/// Gains, schedule and certificate of one weight set.
struct Design {
    ss: StateSpace,
    gains: GpcGains,
    schedule: GainSchedule,
    stability: StabilityReport,
}

fn build_design(cfg: &RunConfig, weights: &CostWeights) -> Result<Design, CliError> {
    let ss = assemble_state_space(&discretize(&cfg.plant)?);
    let gains = design_gains(&ss, weights)?;
    let stability = check_loop_stability(&ss, &gains, DEFAULT_MARGIN)?;
    let schedule = predictive_schedule(&cfg.scenario(), weights)?;
    Ok(Design {
        ss,
        gains,
        schedule,
        stability,
    })
}

fn verdict(report: &StabilityReport) -> Status {
    if report.stable {
        Status::Ok
    } else {
        Status::Unstable
    }
}

/// Row-major copy of a matrix for JSON output.
fn rows(nrows: usize, ncols: usize, at: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..nrows).map(|i| (0..ncols).map(|j| at(i, j)).collect()).collect()
}

fn write_stability(out: &Path, report: &StabilityReport) -> Result<(), CliError> {
    let mut eigs = report.eigenvalues.clone();
    eigs.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(a.re.total_cmp(&b.re))
            .then(a.im.total_cmp(&b.im))
    });
    output::write(
        &out.join("eigenvalues.csv"),
        &output::csv("re,im,modulus", eigs.iter().map(|l| [l.re, l.im, l.norm()])),
    )?;
    output::write_json(
        &out.join("stability.json"),
        &json!({
            "stable": report.stable,
            "spectral_radius": report.spectral_radius,
            "margin": report.margin,
            "corollary_radius": report.corollary_radius,
            "excluded_states": report.excluded_states,
            "eigenvalue_count": report.eigenvalues.len(),
        }),
    )
}

pub fn stability(cfg: &RunConfig, out: &Path) -> Result<Status, CliError> {
    let ss = assemble_state_space(&discretize(&cfg.plant)?);
    let gains = design_gains(&ss, &cfg.weights(&WeightOverride::default()))?;
    let report = check_loop_stability(&ss, &gains, DEFAULT_MARGIN)?;
    write_stability(out, &report)?;
    print_verdict(&report);
    Ok(verdict(&report))
}

fn print_verdict(report: &StabilityReport) {
    println!(
        "{} (spectral radius {}{})",
        if report.stable { "stable" } else { "UNSTABLE" },
        output::num(report.spectral_radius),
        if report.excluded_states.is_empty() {
            String::new()
        } else {
            format!(", unweighted integrator states {:?} excluded", report.excluded_states)
        }
    );
}

pub fn design(cfg: &RunConfig, out: &Path) -> Result<Status, CliError> {
    let weights = cfg.weights(&WeightOverride::default());
    let d = build_design(cfg, &weights)?;
    let plant = d.ss.plant();

    let steps = cfg.scenario().steps();
    let header = [
        "k".to_string(),
        (1..=6).map(|j| format!("k1_pid_{j}")).collect::<Vec<_>>().join(","),
        (1..=6).map(|j| format!("k2_pid_{j}")).collect::<Vec<_>>().join(","),
        "k1_u_1,k1_u_2,k2_u_1,k2_u_2,s1,s2".to_string(),
    ]
    .join(",");
    let table = output::csv(
        &header,
        (0..steps).map(|k| {
            let e = d.schedule.entry(k);
            std::iter::once(k as f64)
                .chain(e.k1_pid.iter().copied())
                .chain(e.k2_pid.iter().copied())
                .chain(e.k1_u.iter().copied())
                .chain(e.k2_u.iter().copied())
                .chain([e.s1, e.s2])
                .collect::<Vec<_>>()
        }),
    );
    output::write(&out.join("schedule.csv"), &table)?;
    write_stability(out, &d.stability)?;

    let k_gpc = rows(2, 6, |i, j| d.gains.k_gpc[(i, j)]);
    let k_ref = rows(2, d.gains.k_ref.ncols(), |i, j| d.gains.k_ref[(i, j)]);
    let tail = d.schedule.tail_gains();
    output::write_json(
        &out.join("design.json"),
        &json!({
            "name": cfg.name,
            "discrete_plant": {
                "a": [[plant.a(0, 0), plant.a(0, 1)], [plant.a(1, 0), plant.a(1, 1)]],
                "b": [[plant.b(0, 0), plant.b(0, 1)], [plant.b(1, 0), plant.b(1, 1)]],
                "delays": plant.delays(),
                "inputs_swapped": plant.swapped(),
            },
            "weights": weights,
            "k_gpc": k_gpc,
            "k_ref": k_ref,
            "tail_gains": {
                "k1_pid": tail.k1_pid.iter().collect::<Vec<_>>(),
                "k2_pid": tail.k2_pid.iter().collect::<Vec<_>>(),
                "k1_u": tail.k1_u.iter().collect::<Vec<_>>(),
                "k2_u": tail.k2_u.iter().collect::<Vec<_>>(),
            },
            "schedule_steps": steps,
            "stable": d.stability.stable,
            "spectral_radius": d.stability.spectral_radius,
        }),
    )?;
    print_verdict(&d.stability);
    Ok(verdict(&d.stability))
}

struct RunOutcome {
    label: String,
    result: Result<SimResult, Error>,
    stability: Option<StabilityReport>,
}

fn simulate_one(cfg: &RunConfig, c: &ControllerConfig) -> Result<RunOutcome, CliError> {
    let scenario = cfg.scenario();
    let (spec, stability) = match c {
        ControllerConfig::PredictivePid { .. } | ControllerConfig::SetpointVariation { .. } => {
            let weights = cfg.weights(&c.overrides().unwrap_or_default());
            let d = build_design(cfg, &weights)?;
            let spec = match c {
                ControllerConfig::SetpointVariation { alpha_b, k_sv, .. } => ControllerSpec::SetpointVariation {
                    schedule: d.schedule,
                    alpha_b: *alpha_b,
                    k_sv: *k_sv,
                },
                _ => ControllerSpec::PredictivePid { schedule: d.schedule },
            };
            (spec, Some(d.stability))
        }
        ControllerConfig::BlendStation { gains, gamma_prime, .. } => (
            ControllerSpec::BlendStation {
                gains: *gains,
                gamma_prime: *gamma_prime,
            },
            None,
        ),
        ControllerConfig::ParallelPid { gains, .. } => (ControllerSpec::ParallelRatioPid { gains: *gains }, None),
    };
    let result = match run(&scenario, &spec) {
        Ok(r) => Ok(r),
        Err(e @ Error::NumericalDivergence { .. }) => Err(e),
        Err(e) => return Err(e.into()),
    };
    Ok(RunOutcome {
        label: c.label().to_string(),
        result,
        stability,
    })
}

pub fn simulate(cfg: &RunConfig, out: &Path, parallel: bool) -> Result<Status, CliError> {
    let default = [ControllerConfig::PredictivePid {
        label: "predictive_pid".into(),
        epsilon: None,
        beta: None,
        gamma: None,
    }];
    let controllers: &[ControllerConfig] = if cfg.controllers.is_empty() { &default } else { &cfg.controllers };
    let outcomes: Vec<RunOutcome> = if parallel {
        controllers.par_iter().map(|c| simulate_one(cfg, c)).collect::<Result<_, _>>()?
    } else {
        controllers.iter().map(|c| simulate_one(cfg, c)).collect::<Result<_, _>>()?
    };

    let mut status = Status::Ok;
    let mut table: Vec<(String, Metrics)> = Vec::new();
    for o in &outcomes {
        if o.stability.as_ref().is_some_and(|s| !s.stable) && status == Status::Ok {
            status = Status::Unstable;
        }
        match &o.result {
            Ok(res) => {
                output::write(&out.join(format!("{}.csv", o.label)), &output::simulation_csv(res))?;
                output::write_json(
                    &out.join(format!("{}.metrics.json", o.label)),
                    &MetricsRecord {
                        controller: o.label.clone(),
                        abs_peak: res.metrics.abs_peak,
                        mean: res.metrics.mean,
                        rms: res.metrics.rms,
                        stable: o.stability.as_ref().map(|s| s.stable),
                        spectral_radius: o.stability.as_ref().map(|s| s.spectral_radius),
                    },
                )?;
                table.push((o.label.clone(), res.metrics));
            }
            Err(e) => {
                eprintln!("{}: {e}", o.label);
                status = Status::Diverged;
            }
        }
    }
    output::write(&out.join("comparison.csv"), &output::comparison_csv(&table))?;
    print!("{}", output::comparison_table(&table));
    Ok(status)
}

pub fn tune_cmd(cfg: &RunConfig, out: &Path, then_design: bool) -> Result<Status, CliError> {
    let ctx = TuningContext::new(cfg.scenario(), cfg.design.horizon, cfg.tuning.clone().unwrap_or_default());
    let result = tune(&ctx)?;
    output::write_json(&out.join("tuning.json"), &result)?;
    output::write(&out.join("trace.csv"), &trace_csv(&result))?;
    println!(
        "P = ({}, {}), I = ({}, {}), epsilon = {}{}, beta = {}, gamma = {}, spectral radius {}",
        output::num(result.p1),
        output::num(result.p2),
        output::num(result.i1),
        output::num(result.i2),
        output::num(result.epsilon),
        if result.epsilon_at_floor { " (search floor)" } else { "" },
        output::num(result.beta),
        output::num(result.gamma),
        output::num(result.spectral_radius),
    );
    if !then_design {
        return Ok(Status::Ok);
    }
    let tuned = RunConfig {
        design: DesignConfig {
            horizon: cfg.design.horizon,
            q1_diag: result.q1_diag(),
            epsilon: result.epsilon,
            beta: result.beta,
            gamma: result.gamma,
            alpha: cfg.design.alpha,
        },
        ..cfg.clone()
    };
    output::write(&out.join("tuned.cfg"), &tuned.to_toml())?;
    let dir = output::ensure_dir(&out.join("design"))?;
    design(&tuned, &dir)
}

fn trace_csv(result: &TuningResult) -> String {
    let mut out = String::from(
        "stage,p1,p2,i1,i2,epsilon,beta,gamma,stable,spectral_radius,simulated,input_violation,overshoot,\
         settling_time,iae,peak_ratio_error,ratio_recovery_time,accepted\n",
    );
    let opt = |v: Option<f64>| v.map(output::num).unwrap_or_default();
    for c in &result.trace {
        let stage = serde_json::to_value(c.stage)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let cells = [
            stage,
            output::num(c.p[0]),
            output::num(c.p[1]),
            output::num(c.i[0]),
            output::num(c.i[1]),
            output::num(c.epsilon),
            output::num(c.beta),
            output::num(c.gamma),
            c.stable.to_string(),
            output::num(c.spectral_radius),
            c.simulated.to_string(),
            output::num(c.input_violation),
            output::num(c.overshoot),
            opt(c.settling_time),
            output::num(c.iae),
            output::num(c.peak_ratio_error),
            opt(c.ratio_recovery_time),
            c.accepted.to_string(),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
