//! Experiment configuration files.

use std::path::Path;

use fracrl_core::glucose::{
    GlucoseEnv, MealSchedule, Plant, PlantA, PlantB, PlantBParams, RiskParams, SAMPLING_PERIOD_S,
};
use fracrl_core::mbrl::RlConfig;
use fracrl_core::mpc::{Formulation, MpcConfig, StateBounds};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::ModelDoc;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; the command line may override it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub meals: MealConfig,
    #[serde(default)]
    pub mbrl: MbrlSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            plant: PlantConfig::default(),
            meals: MealConfig::default(),
            mbrl: MbrlSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    MinimalModel(MinimalModelPlant),
    Fractional(FractionalPlant),
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig::MinimalModel(MinimalModelPlant::default())
    }
}

/// Mirrors [`PlantBParams`]; see there for units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimalModelPlant {
    pub gb: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub n: f64,
    pub ib: f64,
    pub vi_ml: f64,
    pub vg_dl: f64,
    pub ag: f64,
    pub tau_meal: f64,
    pub initial_bg: f64,
    pub initial_insulin_rate: f64,
    pub cgm_noise_sd: f64,
    pub cgm_rounding: bool,
    pub substep_s: f64,
}

impl Default for MinimalModelPlant {
    fn default() -> Self {
        let p = PlantBParams::default();
        Self::from_params(PlantBParams {
            initial_bg: 140.0,
            initial_insulin_rate: p.basal_rate(SAMPLING_PERIOD_S),
            ..p
        })
    }
}

impl MinimalModelPlant {
    pub fn from_params(p: PlantBParams) -> Self {
        Self {
            gb: p.gb,
            p1: p.p1,
            p2: p.p2,
            p3: p.p3,
            n: p.n,
            ib: p.ib,
            vi_ml: p.vi_ml,
            vg_dl: p.vg_dl,
            ag: p.ag,
            tau_meal: p.tau_meal,
            initial_bg: p.initial_bg,
            initial_insulin_rate: p.initial_insulin_rate,
            cgm_noise_sd: p.cgm_noise_sd,
            cgm_rounding: p.cgm_rounding,
            substep_s: p.substep_s,
        }
    }

    pub fn params(&self) -> PlantBParams {
        PlantBParams {
            gb: self.gb,
            p1: self.p1,
            p2: self.p2,
            p3: self.p3,
            n: self.n,
            ib: self.ib,
            vi_ml: self.vi_ml,
            vg_dl: self.vg_dl,
            ag: self.ag,
            tau_meal: self.tau_meal,
            initial_bg: self.initial_bg,
            initial_insulin_rate: self.initial_insulin_rate,
            cgm_noise_sd: self.cgm_noise_sd,
            cgm_rounding: self.cgm_rounding,
            substep_s: self.substep_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionalPlant {
    pub model: ModelDoc,
    pub initial: Vec<f64>,
    /// State change per gram of carbohydrate, per dimension.
    pub meal_gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MealConfig {
    /// Six meals over 36 h starting at 06:00.
    #[default]
    Protocol,
    Custom {
        start_minute: u32,
        duration_hours: f64,
        period_s: f64,
        meals: Vec<MealEntry>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MealEntry {
    pub day: u32,
    pub minute: u32,
    pub grams: f64,
}

impl MealConfig {
    pub fn schedule(&self) -> Result<MealSchedule, ConfigError> {
        match self {
            MealConfig::Protocol => Ok(MealSchedule::protocol()),
            MealConfig::Custom {
                start_minute,
                duration_hours,
                period_s,
                meals,
            } => {
                let entries: Vec<(u32, u32, f64)> = meals.iter().map(|m| (m.day, m.minute, m.grams)).collect();
                MealSchedule::from_clock(*start_minute, duration_hours * 3600.0, *period_s, &entries)
                    .map_err(|e| field_err("meals", e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulationName {
    Condensed,
    Sparse,
}

/// Learning-loop and controller settings. Scalar bounds and references
/// apply to every state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbrlSettings {
    pub iter_max: usize,
    /// Defaults to the length of the meal schedule.
    pub episode_len: Option<usize>,
    pub horizon: usize,
    pub gamma: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Defaults to the minimizer of the risk function.
    pub reference: Option<f64>,
    pub q_weight: f64,
    pub r_weight: f64,
    pub state_bounds: BoundMode,
    pub bound_weight: f64,
    pub action_min: f64,
    pub action_max: f64,
    pub seed_episodes: usize,
    /// Defaults to `episode_len`.
    pub seed_episode_len: Option<usize>,
    pub snapshot_every: usize,
    pub formulation: FormulationName,
}

impl Default for MbrlSettings {
    fn default() -> Self {
        Self {
            iter_max: 30,
            episode_len: None,
            horizon: 100,
            gamma: 0.99,
            s_min: 70.0,
            s_max: 180.0,
            reference: None,
            q_weight: 1.0,
            r_weight: 100.0,
            state_bounds: BoundMode::Soft,
            bound_weight: 1e4,
            action_min: 0.0,
            action_max: 0.5,
            seed_episodes: 1,
            seed_episode_len: None,
            snapshot_every: 5,
            formulation: FormulationName::Condensed,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Parses, validates and fills in defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("version") {
            Some(v) if v.as_u64() == Some(u64::from(CONFIG_VERSION)) => {}
            Some(v) => return Err(field_err("version", format!("unsupported version {v}, expected {CONFIG_VERSION}"))),
            None => return Err(field_err("version", "missing")),
        }
        let cfg: Self = serde_json::from_value(raw)?;
        cfg.validate()?;
        cfg.resolve()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.mbrl;
        if m.iter_max == 0 {
            return Err(field_err("mbrl.iter_max", "must be at least 1"));
        }
        if m.horizon == 0 {
            return Err(field_err("mbrl.horizon", "must be at least 1"));
        }
        if !(m.gamma > 0.0 && m.gamma <= 1.0) {
            return Err(field_err("mbrl.gamma", format!("must lie in (0, 1], got {}", m.gamma)));
        }
        if !(m.s_min <= m.s_max) {
            return Err(field_err("mbrl.s_min", "must not exceed mbrl.s_max"));
        }
        if !(m.action_min <= m.action_max) || !m.action_min.is_finite() || !m.action_max.is_finite() {
            return Err(field_err("mbrl.action_min", "must be finite and not exceed mbrl.action_max"));
        }
        if !(m.q_weight >= 0.0) || !m.q_weight.is_finite() {
            return Err(field_err("mbrl.q_weight", "must be non-negative"));
        }
        if !(m.r_weight >= 0.0) || !m.r_weight.is_finite() {
            return Err(field_err("mbrl.r_weight", "must be non-negative"));
        }
        if !(m.bound_weight > 0.0) || !m.bound_weight.is_finite() {
            return Err(field_err("mbrl.bound_weight", "must be positive"));
        }
        if m.episode_len == Some(0) {
            return Err(field_err("mbrl.episode_len", "must be at least 1"));
        }
        if m.seed_episodes == 0 {
            return Err(field_err("mbrl.seed_episodes", "must be at least 1"));
        }
        if m.seed_episode_len.is_some_and(|l| l < 2) {
            return Err(field_err("mbrl.seed_episode_len", "must be at least 2"));
        }
        if let Some(r) = m.reference {
            if !r.is_finite() {
                return Err(field_err("mbrl.reference", "must be finite"));
            }
        }
        let schedule = self.meals.schedule()?;
        if let Some(len) = m.episode_len {
            if len > schedule.steps() {
                return Err(field_err(
                    "mbrl.episode_len",
                    format!("{len} exceeds the {} steps of the meal schedule", schedule.steps()),
                ));
            }
        }
        match &self.plant {
            PlantConfig::MinimalModel(p) => p.params().validate().map_err(|e| field_err("plant", e.to_string()))?,
            PlantConfig::Fractional(f) => {
                let model = f.model.to_model().map_err(|e| field_err("plant.model", e.to_string()))?;
                PlantA::new(model, f.initial.clone(), f.meal_gain.clone())
                    .map_err(|e| field_err("plant", e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Replaces every defaulted optional with its concrete value.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        let steps = self.meals.schedule()?.steps();
        let m = &mut self.mbrl;
        let len = *m.episode_len.get_or_insert(steps);
        m.seed_episode_len.get_or_insert(len.max(2));
        m.reference.get_or_insert(RiskParams::default().minimizer());
        Ok(self)
    }

    pub fn environment(&self) -> Result<GlucoseEnv, ConfigError> {
        let meals = self.meals.schedule()?;
        let plant = match &self.plant {
            PlantConfig::MinimalModel(p) => {
                Plant::B(PlantB::new(p.params()).map_err(|e| field_err("plant", e.to_string()))?)
            }
            PlantConfig::Fractional(f) => {
                let model = f.model.to_model().map_err(|e| field_err("plant.model", e.to_string()))?;
                Plant::A(PlantA::new(model, f.initial.clone(), f.meal_gain.clone()).map_err(|e| field_err("plant", e.to_string()))?)
            }
        };
        Ok(GlucoseEnv::new(plant, meals))
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.plant {
            PlantConfig::MinimalModel(_) => (1, 1),
            PlantConfig::Fractional(f) => (f.model.n, f.model.p),
        }
    }

    /// Learning-loop settings for master seed `seed`. Call on a resolved
    /// configuration.
    pub fn rl_config(&self, seed: u64) -> RlConfig {
        let (n, p) = self.dims();
        let m = &self.mbrl;
        let reference = m.reference.unwrap_or_else(|| RiskParams::default().minimizer());
        let mut mpc = MpcConfig::tracking(n, p, m.horizon, vec![reference; n], m.r_weight);
        mpc.gamma = m.gamma;
        mpc.q *= m.q_weight;
        mpc.s_min = vec![m.s_min; n];
        mpc.s_max = vec![m.s_max; n];
        mpc.action_bounds = Some((vec![m.action_min; p], vec![m.action_max; p]));
        mpc.state_bounds = match m.state_bounds {
            BoundMode::Hard => StateBounds::Hard,
            BoundMode::Soft => StateBounds::Soft { weight: m.bound_weight },
        };
        mpc.formulation = match m.formulation {
            FormulationName::Condensed => Formulation::Condensed,
            FormulationName::Sparse => Formulation::Sparse { explicit_pinning: false },
        };
        RlConfig {
            iter_max: m.iter_max,
            episode_len: m.episode_len.unwrap_or(432),
            mpc,
            seed,
            snapshot_every: m.snapshot_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_resolve() {
        let cfg = ExperimentConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg.mbrl.episode_len, Some(432));
        assert_eq!(cfg.mbrl.seed_episode_len, Some(432));
        assert!((cfg.mbrl.reference.unwrap() - 112.5).abs() < 0.1);
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        let rl = cfg.rl_config(7);
        assert_eq!(rl.mpc.horizon, 100);
        assert_eq!(rl.mpc.gamma, 0.99);
        assert_eq!(rl.mpc.s_min, vec![70.0]);
        assert_eq!(rl.iter_max, 30);
    }

    #[test]
    fn invalid_gamma_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"version": 1, "mbrl": {"gamma": 1.5}}"#).unwrap_err();
        let text = err.to_string();
        assert!(text.starts_with("mbrl.gamma"), "{text}");
        assert!(text.contains("1.5"));
    }

    #[test]
    fn version_and_unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"mbrl": {}}"#).unwrap_err().to_string().starts_with("version"));
        assert!(ExperimentConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "mbrl": {"horizn": 5}}"#).is_err());
    }

    #[test]
    fn custom_meals_and_fractional_plant() {
        let text = r#"{
            "version": 1,
            "plant": {"kind": "fractional",
                      "model": {"version": 1, "n": 1, "p": 1, "alphas": [0.5], "A": [-0.1],
                                "B": [-5.0], "mu": [12.0], "Sigma": [0.0]},
                      "initial": [120.0], "meal_gain": [0.0]},
            "meals": {"kind": "custom", "start_minute": 0, "duration_hours": 2.0,
                      "period_s": 300.0, "meals": [{"day": 0, "minute": 30, "grams": 20.0}]},
            "mbrl": {"iter_max": 2, "horizon": 5}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.mbrl.episode_len, Some(24));
        assert!(cfg.environment().is_ok());
        let bad = text.replace("\"duration_hours\": 2.0", "\"duration_hours\": 0.01");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }
}
