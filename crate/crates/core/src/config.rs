//! Experiment configuration (TOML).
//!
//! One file drives a whole experiment: the data distributions, the
//! architecture, both training runs, the sampler, the guidance defaults and
//! the sweep grids. Validation errors name the offending field path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Condition;
use crate::denoiser::{Activation, Architecture, CondInput};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Method, MethodSpec};
use crate::linalg::{Mat2, Vec2};
use crate::sampler::SamplerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptConfig {
    pub mean: Vec2,
    pub covariance: Mat2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub concept: u32,
    pub mean: Vec2,
    pub covariance: Mat2,
    /// Size of the fine-tuning set.
    pub n_points: usize,
    #[serde(default)]
    pub base_attribute: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generic pretraining concepts; concept `i` has id `i`.
    pub concepts: Vec<ConceptConfig>,
    /// Translation applied by each attribute; attribute `a` has id `a`.
    pub attribute_shifts: Vec<Vec2>,
    pub target: TargetConfig,
}

impl DataConfig {
    /// Number of concept ids the condition table must hold.
    pub fn concept_slots(&self) -> usize {
        self.concepts.len().max(self.target.concept as usize + 1)
    }

    pub fn base_condition(&self) -> Condition {
        Condition::token(self.target.concept, self.target.base_attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma_frequencies: usize,
    pub cond_input: CondInput,
    pub data_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceDefaults {
    pub cfg_lambda: f64,
    pub ag_lambda: f64,
    pub pg_lambda: f64,
    pub pg_omega: f64,
}

impl GuidanceDefaults {
    pub fn for_method(&self, spec: MethodSpec) -> GuidanceConfig {
        let lambda = match spec.method {
            Method::Cfg => self.cfg_lambda,
            Method::Ag => self.ag_lambda,
            Method::Pg => self.pg_lambda,
        };
        GuidanceConfig {
            method: spec.method,
            lambda,
            omega: spec.omega,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Attribute requested when generating the target concept.
    pub attribute: u32,
    /// Draws per point for the fixed target-loss estimate.
    pub target_loss_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaSweepConfig {
    pub lambda: f64,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSweepConfig {
    pub methods: Vec<MethodSpec>,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<MethodSpec>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sampling: SamplerConfig,
    pub guidance: GuidanceDefaults,
    pub eval: EvalConfig,
    pub sweep_omega: OmegaSweepConfig,
    pub sweep_lambda: LambdaSweepConfig,
    pub compare: CompareConfig,
}

/// The configuration shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|s| locate(text, s.start))
                .unwrap_or_else(|| "<root>".to_string());
            Error::config(path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn shipped() -> Self {
        Self::from_toml(DEFAULT_CONFIG_TOML).expect("shipped config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            sigma_frequencies: self.model.sigma_frequencies,
            cond_input: self.model.cond_input,
            n_concepts: self.data.concept_slots(),
            n_attributes: self.data.attribute_shifts.len(),
            data_std: self.model.data_std,
        }
    }

    /// Training configs with the experiment seed filled in.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.finetune.clone()
        }
    }

    pub fn requested_condition(&self) -> Condition {
        Condition::token(self.data.target.concept, self.eval.attribute)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.concepts.len() < 2 {
            return Err(Error::config("data.concepts", "need at least 2 concepts"));
        }
        if d.attribute_shifts.len() < 2 {
            return Err(Error::config("data.attribute_shifts", "need at least 2 attributes"));
        }
        if d.target.n_points == 0 {
            return Err(Error::config("data.target.n_points", "must be at least 1"));
        }
        if d.target.base_attribute as usize >= d.attribute_shifts.len() {
            return Err(Error::config("data.target.base_attribute", "attribute id out of range"));
        }
        if self.eval.attribute as usize >= d.attribute_shifts.len() {
            return Err(Error::config("eval.attribute", "attribute id out of range"));
        }
        if self.eval.target_loss_draws == 0 {
            return Err(Error::config("eval.target_loss_draws", "must be at least 1"));
        }
        self.architecture()
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        self.sampling.validate("sampling")?;
        let g = &self.guidance;
        for (name, v) in [("cfg_lambda", g.cfg_lambda), ("ag_lambda", g.ag_lambda), ("pg_lambda", g.pg_lambda)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::config(format!("guidance.{name}"), "guidance scale must be >= 1"));
            }
        }
        check_omega("guidance.pg_omega", g.pg_omega)?;
        if !(self.sweep_omega.lambda >= 1.0) {
            return Err(Error::config("sweep_omega.lambda", "guidance scale must be >= 1"));
        }
        check_grid("sweep_omega.grid", &self.sweep_omega.grid, 0.0, 1.0)?;
        check_grid("sweep_lambda.grid", &self.sweep_lambda.grid, 1.0, f64::INFINITY)?;
        check_grid("compare.lambdas", &self.compare.lambdas, 1.0, f64::INFINITY)?;
        if self.sweep_lambda.methods.is_empty() {
            return Err(Error::config("sweep_lambda.methods", "need at least one method"));
        }
        if self.compare.methods.is_empty() {
            return Err(Error::config("compare.methods", "need at least one method"));
        }
        Ok(())
    }
}

fn check_omega(path: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::config(path, "interpolation scale must lie in [0, 1]"));
    }
    Ok(())
}

fn check_grid(path: &str, grid: &[f64], lo: f64, hi: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config(path, "grid is empty"));
    }
    if grid.iter().any(|v| !(lo..=hi).contains(v) || !v.is_finite()) {
        return Err(Error::config(path, format!("grid values must lie in [{lo}, {hi}]")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(path, "grid must be strictly increasing"));
    }
    Ok(())
}

/// Best-effort dotted key path for the TOML entry containing byte `pos`.
fn locate(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
        if offset > pos {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_valid() {
        let cfg = ExperimentConfig::shipped();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.pretrain.steps, 20_000);
        assert_eq!(cfg.finetune.steps, 500);
        assert_eq!(cfg.sampling.steps, 50);
        assert_eq!(cfg.guidance.cfg_lambda, 7.5);
        assert_eq!(cfg.guidance.ag_lambda, 2.0);
        assert_eq!(cfg.sweep_omega.grid.len(), 11);
    }

    #[test]
    fn type_errors_carry_field_path() {
        let text = DEFAULT_CONFIG_TOML.replace("steps = 20000", "steps = \"many\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "pretrain.steps"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn semantic_errors_carry_field_path() {
        let mut cfg = ExperimentConfig::shipped();
        cfg.sweep_omega.grid = vec![0.0, 0.5, 0.4];
        match cfg.validate().unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "sweep_omega.grid"),
            other => panic!("{other}"),
        }
        let mut cfg = ExperimentConfig::shipped();
        cfg.guidance.cfg_lambda = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::shipped();
        cfg.data.attribute_shifts.truncate(1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{DEFAULT_CONFIG_TOML}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
