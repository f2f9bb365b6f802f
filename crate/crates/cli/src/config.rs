//! Experiment configuration: one TOML file with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fliplab::trainer::derive_seed;
use fliplab::{CorruptionConfig, FeatureSubset, FlipMode, LossKind, TrainSchedule, WorldConfig};
use serde::{Deserialize, Serialize};

/// Child-seed tags. Every stage of a run draws from its own stream.
pub mod tag {
    pub const WORLD: u64 = 0;
    pub const CLEAN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const GENERATOR: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const TRAIN: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldSection,
    pub corruption: CorruptionSection,
    pub trainer: TrainerSection,
    pub experiment: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub reward_scale: f64,
    pub ref_logit_scale: f64,
    pub min_len: u32,
    pub max_len: u32,
    pub n_samples: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub eta: f64,
    pub tau: f64,
    pub feature_subset: FeatureSubset,
    pub mode: FlipMode,
    pub surrogate_temp: f64,
    pub init_spread: f64,
    pub tolerance: f64,
    pub max_steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub loss: String,
    /// Fixed flip rate assumed by cdpo and rdpo.
    pub baseline_eps: f64,
    pub warmup: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub n_outer: usize,
    pub n_omega: usize,
    pub n_theta: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
    pub lr_policy: f64,
    pub lr_flip: f64,
    pub beta: f64,
    pub refit_scaler: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_max_norm: Option<f64>,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub etas: Vec<f64>,
    pub losses: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            world: WorldSection::default(),
            corruption: CorruptionSection::default(),
            trainer: TrainerSection::default(),
            experiment: SweepSection::default(),
        }
    }
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            n_prompts: w.n_prompts,
            n_responses: w.n_responses,
            reward_scale: w.reward_scale,
            ref_logit_scale: w.ref_logit_scale,
            min_len: w.min_len,
            max_len: w.max_len,
            n_samples: 30_000,
            n_test: 2_000,
        }
    }
}

impl Default for CorruptionSection {
    fn default() -> Self {
        let c = CorruptionConfig::default();
        Self {
            eta: c.flip_ratio_target,
            tau: c.tau,
            feature_subset: c.feature_subset,
            mode: c.mode,
            surrogate_temp: c.surrogate_temp,
            init_spread: c.init_spread,
            tolerance: c.tolerance,
            max_steps: c.max_steps,
            lr: c.lr,
        }
    }
}

impl Default for TrainerSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        Self {
            loss: s.loss_kind.name().to_string(),
            baseline_eps: 0.1,
            warmup: s.warmup,
            warmup_steps: s.warmup_steps,
            n_outer: s.n_outer,
            n_omega: s.n_omega,
            n_theta: s.n_theta,
            batch_size: s.batch_size,
            minibatch_size: s.minibatch_size,
            lr_policy: s.lr_policy,
            lr_flip: s.lr_flip,
            beta: s.beta,
            refit_scaler: s.refit_scaler,
            flip_max_norm: s.flip_max_norm,
            eval_every: s.eval_every,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            losses: ["dpo", "cdpo", "rdpo", "fadpo"].map(String::from).to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn world_config(&self, seed: u64) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            n_prompts: w.n_prompts,
            n_responses: w.n_responses,
            reward_scale: w.reward_scale,
            ref_logit_scale: w.ref_logit_scale,
            min_len: w.min_len,
            max_len: w.max_len,
            seed: derive_seed(seed, tag::WORLD),
        }
    }

    pub fn corruption_config(&self, seed: u64, eta: f64) -> CorruptionConfig {
        let c = &self.corruption;
        CorruptionConfig {
            tau: c.tau,
            flip_ratio_target: eta,
            feature_subset: c.feature_subset,
            seed: derive_seed(seed, tag::GENERATOR),
            surrogate_temp: c.surrogate_temp,
            init_spread: c.init_spread,
            tolerance: c.tolerance,
            max_steps: c.max_steps,
            lr: c.lr,
            mode: c.mode,
        }
    }

    pub fn loss_kind(&self, name: &str) -> anyhow::Result<LossKind> {
        Ok(LossKind::parse_with(name, self.trainer.baseline_eps)?)
    }

    pub fn schedule(&self, seed: u64, loss: LossKind) -> TrainSchedule {
        let t = &self.trainer;
        TrainSchedule {
            warmup: t.warmup,
            warmup_steps: t.warmup_steps,
            n_outer: t.n_outer,
            n_omega: t.n_omega,
            n_theta: t.n_theta,
            batch_size: t.batch_size,
            minibatch_size: t.minibatch_size,
            lr_policy: t.lr_policy,
            lr_flip: t.lr_flip,
            beta: t.beta,
            seed: derive_seed(seed, tag::TRAIN),
            loss_kind: loss,
            refit_scaler: t.refit_scaler,
            flip_init: [0.0; fliplab::features::FEATURE_DIM],
            flip_max_norm: t.flip_max_norm,
            eval_every: t.eval_every,
        }
    }

    /// Checks every section and reports all problems together.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.world_config(self.seed).validate() {
            problems.push(format!("[world] {e}"));
        }
        if self.world.n_samples == 0 {
            problems.push("[world] n_samples must be >= 1".into());
        }
        if self.world.n_test == 0 {
            problems.push("[world] n_test must be >= 1".into());
        }
        let mut etas = vec![self.corruption.eta];
        etas.extend(&self.experiment.etas);
        for eta in etas {
            if let Err(e) = self.corruption_config(self.seed, eta).validate() {
                problems.push(format!("[corruption] {e}"));
            }
        }
        let mut losses = vec![self.trainer.loss.clone()];
        losses.extend(self.experiment.losses.iter().cloned());
        for name in &losses {
            match self.loss_kind(name) {
                Ok(kind) => {
                    if let Err(e) = self.schedule(self.seed, kind).validate() {
                        problems.push(format!("[trainer] {e}"));
                    }
                }
                Err(e) => problems.push(format!("[trainer] {e}")),
            }
        }
        for (name, empty) in [
            ("etas", self.experiment.etas.is_empty()),
            ("losses", self.experiment.losses.is_empty()),
            ("seeds", self.experiment.seeds.is_empty()),
        ] {
            if empty {
                problems.push(format!("[experiment] {name} must not be empty"));
            }
        }
        problems.dedup();
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", problems.join("\n  "))
        }
    }
}
