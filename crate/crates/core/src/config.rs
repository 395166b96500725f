//! Experiment configuration: a sectioned TOML file with every key known.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, DEFAULT_NORM_EPSILON};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::taxonomy::DEFAULT_TRIALS;
use crate::train::{BopoConfig, RewardConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    /// Boundary-policy trials per task.
    pub trials: usize,
    /// Number of training tasks.
    pub tasks: usize,
}

impl Default for TaxonomySection {
    fn default() -> Self {
        TaxonomySection {
            trials: DEFAULT_TRIALS,
            tasks: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub r_success: f64,
    pub r_hard: f64,
    pub epsilon_norm: f64,
    pub epsilon_adv: f64,
    pub lambdas: Vec<f64>,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            r_success: 1.0,
            r_hard: 0.5,
            epsilon_norm: DEFAULT_NORM_EPSILON,
            // Groups whose rewards differ only by cost noise would otherwise
            // get unit-scale advantages.
            epsilon_adv: 0.5,
            lambdas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

impl RewardSection {
    pub fn reward_config(&self, lambda: f64) -> RewardConfig {
        RewardConfig {
            r_success: self.r_success,
            r_hard: self.r_hard,
            lambda,
            epsilon_norm: self.epsilon_norm,
            epsilon_adv: self.epsilon_adv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: usize,
    pub seeds: usize,
    pub k_values: Vec<usize>,
    pub random_p: Vec<f64>,
    pub cascade_thresholds: Vec<f64>,
    pub first_large_k: Vec<usize>,
    pub single_turn_thresholds: Vec<f64>,
    /// Usefulness cutoff on the small model's clear probability used to
    /// label single-turn classifier targets.
    pub single_turn_cutoff: f64,
    /// λ of the BoPO checkpoint used for the allocation report.
    pub allocation_lambda: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: 200,
            seeds: 3,
            k_values: vec![5, 10, 15],
            random_p: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            cascade_thresholds: vec![0.0, 0.5, 1.0, 1.01],
            first_large_k: vec![0, 2, 5, 10, 15],
            single_turn_thresholds: vec![0.1, 0.3, 0.5, 0.7],
            single_turn_cutoff: 0.9,
            allocation_lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub cost: CostModel,
    pub taxonomy: TaxonomySection,
    pub synth: SynthConfig,
    pub reward: RewardSection,
    pub bopo: BopoConfig,
    pub eval: EvalSection,
}

/// Optimizer settings sized for the linear router rather than a 1.5B
/// model; the library defaults keep the large-model values.
pub fn desk_bopo_config() -> BopoConfig {
    BopoConfig {
        group_size: 8,
        beta_kl: 0.001,
        learning_rate: 2.0,
        sft_learning_rate: 0.5,
        ratio_clip: 0.2,
        iterations: 3000,
        tasks_per_batch: 32,
        update_epochs: 2,
        max_grad_norm: None,
        sft_steps: 3000,
        sft_batch_size: 64,
        variant: Variant::Bopo,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            cost: CostModel::default(),
            taxonomy: TaxonomySection::default(),
            synth: SynthConfig::default(),
            reward: RewardSection::default(),
            bopo: desk_bopo_config(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.cost.validate()?;
        self.bopo.validate()?;
        if self.taxonomy.trials == 0 {
            return Err(Error::InvalidConfig("taxonomy.trials must be at least 1".into()));
        }
        if self.synth.n_stratified == 0 {
            return Err(Error::InvalidConfig("synth.n_stratified must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.hard_share) {
            return Err(Error::InvalidConfig("synth.hard_share must lie in [0, 1]".into()));
        }
        if self.reward.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("reward.lambdas must be non-negative".into()));
        }
        if self.eval.seeds == 0 {
            return Err(Error::InvalidConfig("eval.seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "experiment config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::default().to_toml_string();
        let bad = text.replacen("[env]\n", "[env]\nbogus = 1\n", 1);
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert_eq!(err.class(), "parse_error");
        let bad_top = format!("mystery = true\n{text}");
        assert!(ExperimentConfig::from_toml_str(&bad_top).is_err());
    }

    #[test]
    fn missing_sections_are_rejected() {
        let text = ExperimentConfig::default().to_toml_string();
        let start = text.find("[cost]").unwrap();
        let end = start + text[start..].find("\n\n").unwrap();
        let without = format!("{}{}", &text[..start], &text[end..]);
        assert!(ExperimentConfig::from_toml_str(&without).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.cost.large = 0.5;
        assert!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).is_err());
    }
}
