//! Run configuration: one TOML file with flat sections.
//!
//! Every key is optional and falls back to the default shown by
//! `RunConfig::default()`; unknown keys are rejected. The resolved config is
//! written next to every run's outputs so the run can be replayed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::metrics::LabelFilter;
use crate::parser::Dialect;
use crate::policy::GenConfig;
use crate::rewards::{HardRewardConfig, NuancedRewardConfig};
use crate::sampler::SamplePlan;
use crate::sft::SftConfig;
use crate::toyenv::DEFAULT_FEATURE_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Size of the generated toy pool. "No Finding" has prevalence near 1%
    /// and the SFT draw keeps taking it after its floor is met, so the pool
    /// must be large for the RL draw to still find 50.
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { n: 40_000, d: DEFAULT_FEATURE_DIM, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub sft_n: usize,
    pub rl_n: usize,
    pub min_fraction: f64,
    pub overrepresentation_penalty: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let plan = SamplePlan::default();
        SamplerConfig {
            sft_n: 2000,
            rl_n: 1000,
            min_fraction: plan.min_fraction,
            overrepresentation_penalty: plan.overrepresentation_penalty,
            seed: plan.seed,
        }
    }
}

impl SamplerConfig {
    /// Plan for the SFT draw; `split_disjoint` derives the RL draw from it.
    pub fn plan(&self) -> SamplePlan {
        SamplePlan {
            n: self.sft_n,
            min_fraction: self.min_fraction,
            overrepresentation_penalty: self.overrepresentation_penalty,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardsConfig {
    pub hard: HardRewardConfig,
    pub nuanced: NuancedRewardConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub labels: LabelFilter,
    pub dialect: Dialect,
    /// Decoding used by `predict`.
    pub decoding: GenConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub pool: PathBuf,
    /// Where `sample` writes sft.jsonl, rl.jsonl and coverage.json.
    pub data_dir: PathBuf,
    /// Parent of the per-stage run directories.
    pub run_dir: PathBuf,
    /// GRPO steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            pool: "data/pool.jsonl".into(),
            data_dir: "data".into(),
            run_dir: "runs".into(),
            checkpoint_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub sampler: SamplerConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub rewards: RewardsConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.d < crate::vocab::NUM_LABELS {
            return Err(Error::Config(format!("task.d must be >= {}", crate::vocab::NUM_LABELS)));
        }
        self.sampler.plan().validate()?;
        if self.sampler.sft_n == 0 || self.sampler.rl_n == 0 {
            return Err(Error::Config("sampler.sft_n and sampler.rl_n must be >= 1".into()));
        }
        if self.sft.batch_size == 0 || !(0.0..1.0).contains(&self.sft.validation_fraction) {
            return Err(Error::Config("sft: batch_size >= 1 and validation_fraction in [0, 1)".into()));
        }
        self.grpo.validate()?;
        self.rewards.hard.validate()?;
        self.rewards.nuanced.validate()?;
        let dec = &self.eval.decoding;
        if dec.max_len == 0 || !(dec.temperature >= 0.0 && dec.top_p > 0.0 && dec.top_p <= 1.0) {
            return Err(Error::Config("eval.decoding: max_len >= 1, temperature >= 0, top_p in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.grpo.kl_coefficient = 0.0;
        cfg.eval.labels = LabelFilter::Nih9;
        cfg.rewards.hard.min_length_tokens = 20;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections() {
        let cfg = RunConfig::from_toml("[grpo]\nsteps = 7\nnormalization = \"per_token\"\n").unwrap();
        assert_eq!(cfg.grpo.steps, 7);
        assert_eq!(cfg.grpo.group_size, 4);
        assert_eq!(cfg.sampler, SamplerConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[grpo]\nbeta = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[grpo]\ngroup_size = 1\n").is_err());
        assert!(RunConfig::from_toml("[sampler]\nmin_fraction = 1.5\n").is_err());
    }
}
