//! TOML run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use predpid::fopdt_model::ContinuousPlant;
use predpid::gpc_core::CostWeights;
use predpid::simulator::{Disturbance, InputBounds, PiGains, Scenario, SetpointStep};
use predpid::tuning::TuningOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plant: ContinuousPlant,
    pub design: DesignConfig,
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub controllers: Vec<ControllerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub horizon: usize,
    pub q1_diag: [f64; 6],
    pub epsilon: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration: f64,
    #[serde(default)]
    pub setpoints: Vec<SetpointStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<InputBounds>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<Disturbance>,
    /// Simulation plant = design plant scaled by this factor.
    #[serde(default = "unit")]
    pub mismatch: f64,
    #[serde(default)]
    pub operating_point: [f64; 2],
}

fn unit() -> f64 {
    1.0
}

/// Per-controller overrides of the base design weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightOverride {
    pub epsilon: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    PredictivePid {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    SetpointVariation {
        label: String,
        alpha_b: f64,
        k_sv: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    BlendStation {
        label: String,
        gains: [PiGains; 2],
        gamma_prime: f64,
    },
    ParallelPid {
        label: String,
        gains: [PiGains; 2],
    },
}

impl ControllerConfig {
    pub fn label(&self) -> &str {
        match self {
            ControllerConfig::PredictivePid { label, .. }
            | ControllerConfig::SetpointVariation { label, .. }
            | ControllerConfig::BlendStation { label, .. }
            | ControllerConfig::ParallelPid { label, .. } => label,
        }
    }

    /// Weight overrides of the predictive variants, `None` for PI baselines.
    pub fn overrides(&self) -> Option<WeightOverride> {
        match self {
            ControllerConfig::PredictivePid { epsilon, beta, gamma, .. }
            | ControllerConfig::SetpointVariation { epsilon, beta, gamma, .. } => Some(WeightOverride {
                epsilon: *epsilon,
                beta: *beta,
                gamma: *gamma,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let cfg = Self::parse(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    /// Parses and validates; the error carries toml's line/field context.
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.plant.validate().map_err(|e| format!("plant: {e}"))?;
        self.weights(&WeightOverride::default())
            .validate()
            .map_err(|e| format!("design: {e}"))?;
        self.scenario().validate().map_err(|e| format!("scenario: {e}"))?;
        if !(self.scenario.mismatch > 0.0) {
            return Err(format!("scenario.mismatch = {} must be positive", self.scenario.mismatch));
        }
        let mut labels = BTreeSet::new();
        for (i, c) in self.controllers.iter().enumerate() {
            let at = format!("controllers[{i}] ({})", c.label());
            if c.label().is_empty() || !c.label().chars().all(|ch| ch.is_ascii_alphanumeric() || "_-".contains(ch)) {
                return Err(format!("{at}: label must be non-empty and use only [A-Za-z0-9_-]"));
            }
            if !labels.insert(c.label()) {
                return Err(format!("{at}: duplicate label"));
            }
            if let Some(o) = c.overrides() {
                self.weights(&o).validate().map_err(|e| format!("{at}: {e}"))?;
            }
            match c {
                ControllerConfig::SetpointVariation { alpha_b, k_sv, .. } if !(*alpha_b >= 0.0 && *k_sv >= 0.0) => {
                    return Err(format!("{at}: alpha_b and k_sv must be nonnegative"));
                }
                ControllerConfig::BlendStation { gains, gamma_prime, .. } => {
                    check_pi(gains).map_err(|e| format!("{at}: {e}"))?;
                    if !(0.0..=1.0).contains(gamma_prime) {
                        return Err(format!("{at}: gamma_prime = {gamma_prime} must lie in [0, 1]"));
                    }
                }
                ControllerConfig::ParallelPid { gains, .. } => check_pi(gains).map_err(|e| format!("{at}: {e}"))?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn weights(&self, o: &WeightOverride) -> CostWeights {
        let d = &self.design;
        CostWeights::new(
            d.q1_diag,
            o.epsilon.unwrap_or(d.epsilon),
            o.beta.unwrap_or(d.beta),
            o.gamma.unwrap_or(d.gamma),
            d.alpha,
            d.horizon,
        )
    }

    pub fn scenario(&self) -> Scenario {
        let s = &self.scenario;
        let mut sc = Scenario::new(self.plant.clone(), s.setpoints.clone(), self.design.alpha, s.duration)
            .with_mismatch(s.mismatch)
            .with_operating_point(s.operating_point);
        sc.input_bounds = s.bounds;
        sc.disturbances = s.disturbances.clone();
        sc
    }
}

fn check_pi(gains: &[PiGains; 2]) -> Result<(), String> {
    if gains.iter().all(|g| g.kp.is_finite() && g.ki.is_finite() && g.kp >= 0.0 && g.ki >= 0.0) {
        Ok(())
    } else {
        Err(format!("PI gains {gains:?} must be finite and nonnegative"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BUNDLED: [(&str, &str); 3] = [
        ("example1", include_str!("../../../configs/example1.cfg")),
        ("example2", include_str!("../../../configs/example2.cfg")),
        ("chamber", include_str!("../../../configs/chamber.cfg")),
    ];

    #[test]
    fn bundled_configs_round_trip() {
        for (name, text) in BUNDLED {
            let cfg = RunConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = RunConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again, "{name}");
            assert_eq!(cfg.name.as_deref(), Some(name));
        }
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut cfg = RunConfig::parse(BUNDLED[0].1).unwrap();
        cfg.design.epsilon = 0.1 + 0.2;
        cfg.design.q1_diag[2] = 1.0 / 3.0;
        cfg.scenario.duration = 1e-300 + 2000.0;
        cfg.plant.tau[0][1] = std::f64::consts::PI * 1e5;
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let text = BUNDLED[0].1.replace("epsilon = 0.6", "epsilon = 0.0");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("positive definite"), "{err}");
    }

    #[test]
    fn unknown_field_reports_location() {
        let text = BUNDLED[0].1.replace("horizon = 5", "horizon = 5\nhorizn = 4");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("horizn"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn incomplete_controller_is_rejected() {
        let text = format!("{}\n[[controllers]]\nkind = \"blend_station\"\nlabel = \"b\"\n", BUNDLED[0].1);
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("gains") || err.contains("missing"), "{err}");
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let text = format!(
            "{}\n[[controllers]]\nkind = \"predictive_pid\"\nlabel = \"run_iii\"\n",
            BUNDLED[0].1
        );
        assert!(RunConfig::parse(&text).unwrap_err().contains("duplicate"));
    }
}
