//! Ground-truth synthetic world and clean Bradley-Terry sampling.
//!
//! A world fixes, for every prompt, a finite set of responses with a true
//! reward `r*(x, y)`, a reference policy `pi_ref(y | x)` given by softmax
//! logits, and a token-length surrogate per response. Every random draw goes
//! through a seeded `ChaCha8Rng`, so worlds and datasets reproduce bit-exactly
//! across platforms.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PreferenceTriple, Provenance};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, sigmoid};

/// Generation parameters for [`World`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_prompts: usize,
    pub n_responses: usize,
    /// Standard deviation of the true rewards.
    pub reward_scale: f64,
    /// Standard deviation of the reference-policy logits.
    pub ref_logit_scale: f64,
    /// Inclusive range of response lengths.
    pub min_len: u32,
    pub max_len: u32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_prompts: 300,
            n_responses: 8,
            reward_scale: 2.0,
            ref_logit_scale: 0.5,
            min_len: 5,
            max_len: 200,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_prompts < 1 {
            problems.push("n_prompts must be >= 1".to_string());
        }
        if self.n_responses < 2 {
            problems.push("n_responses must be >= 2".to_string());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            problems.push(format!("reward_scale must be > 0, got {}", self.reward_scale));
        }
        if !(self.ref_logit_scale >= 0.0 && self.ref_logit_scale.is_finite()) {
            problems.push(format!("ref_logit_scale must be >= 0, got {}", self.ref_logit_scale));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            problems.push(format!("length range [{}, {}] is empty or starts below 1", self.min_len, self.max_len));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::arg(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub n_prompts: usize,
    pub n_responses: usize,
    /// `true_reward[x][y] = r*(x, y)`.
    pub true_reward: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
    pub response_len: Vec<Vec<u32>>,
    pub seed: u64,
}

pub fn make_world(n_prompts: usize, n_responses: usize, reward_scale: f64, seed: u64) -> Result<World> {
    make_world_with(&WorldConfig {
        n_prompts,
        n_responses,
        reward_scale,
        seed,
        ..WorldConfig::default()
    })
}

pub fn make_world_with(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reward = Normal::new(0.0, cfg.reward_scale).map_err(|e| Error::arg(e.to_string()))?;
    let logit = Normal::new(0.0, cfg.ref_logit_scale).map_err(|e| Error::arg(e.to_string()))?;

    let mut matrix = |dist: &Normal<f64>| -> Vec<Vec<f64>> {
        (0..cfg.n_prompts)
            .map(|_| (0..cfg.n_responses).map(|_| dist.sample(&mut rng)).collect())
            .collect()
    };
    let true_reward = matrix(&reward);
    let ref_logits = matrix(&logit);
    let response_len = (0..cfg.n_prompts)
        .map(|_| (0..cfg.n_responses).map(|_| rng.random_range(cfg.min_len..=cfg.max_len)).collect())
        .collect();

    let world = World {
        n_prompts: cfg.n_prompts,
        n_responses: cfg.n_responses,
        true_reward,
        ref_logits,
        response_len,
        seed: cfg.seed,
    };
    world.validate()?;
    Ok(world)
}

impl World {
    pub fn validate(&self) -> Result<()> {
        let shape_ok = |rows: usize, cols: &[usize]| rows == self.n_prompts && cols.iter().all(|&c| c == self.n_responses);
        let r_cols: Vec<usize> = self.true_reward.iter().map(Vec::len).collect();
        let l_cols: Vec<usize> = self.ref_logits.iter().map(Vec::len).collect();
        let n_cols: Vec<usize> = self.response_len.iter().map(Vec::len).collect();
        if self.n_prompts < 1 || self.n_responses < 2 {
            return Err(Error::arg("world needs >= 1 prompt and >= 2 responses"));
        }
        if !shape_ok(self.true_reward.len(), &r_cols)
            || !shape_ok(self.ref_logits.len(), &l_cols)
            || !shape_ok(self.response_len.len(), &n_cols)
        {
            return Err(Error::arg("world matrices do not match n_prompts x n_responses"));
        }
        if self.true_reward.iter().flatten().chain(self.ref_logits.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("world rewards and logits must be finite".into()));
        }
        if self.response_len.iter().flatten().any(|&l| l < 1) {
            return Err(Error::arg("response lengths must be >= 1"));
        }
        for (x, row) in self.ref_logits.iter().enumerate() {
            let lse = log_sum_exp(row);
            let total: f64 = row.iter().map(|&v| (v - lse).exp()).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::NonFinite(format!("reference row {x} does not normalize (sum {total})")));
            }
        }
        Ok(())
    }

    pub fn check_index(&self, prompt: usize, y: usize) -> Result<()> {
        if prompt >= self.n_prompts || y >= self.n_responses {
            return Err(Error::Index(format!(
                "(prompt {prompt}, response {y}) outside {}x{} world",
                self.n_prompts, self.n_responses
            )));
        }
        Ok(())
    }

    /// `pi_ref(y | x)` row as probabilities.
    pub fn ref_probs(&self, prompt: usize) -> Vec<f64> {
        let row = &self.ref_logits[prompt];
        let lse = log_sum_exp(row);
        row.iter().map(|&v| (v - lse).exp()).collect()
    }

    pub fn ref_log_prob(&self, prompt: usize, y: usize) -> f64 {
        let row = &self.ref_logits[prompt];
        row[y] - log_sum_exp(row)
    }

    pub fn len_of(&self, prompt: usize, y: usize) -> u32 {
        self.response_len[prompt][y]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: World = serde_json::from_str(&text)?;
        world.validate()?;
        Ok(world)
    }
}

/// Clean-label probability `sigma(r*(x, y1) - r*(x, y2))` that `y1` is preferred.
pub fn true_preference_prob(world: &World, prompt: usize, y1: usize, y2: usize) -> Result<f64> {
    world.check_index(prompt, y1)?;
    world.check_index(prompt, y2)?;
    let r = &world.true_reward[prompt];
    Ok(sigmoid(r[y1] - r[y2]))
}

fn draw_categorical(probs: &[f64], skip: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, p)| p)
        .sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws `n_samples` clean Bradley-Terry comparisons.
///
/// Each sample picks a prompt uniformly, an unordered pair of distinct
/// responses from `pi_ref` (second draw excludes the first), and labels the
/// first response as preferred with probability `sigma(r*(x,y1) - r*(x,y2))`.
pub fn sample_clean(world: &World, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples < 1 {
        return Err(Error::arg("n_samples must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ref_probs: Vec<Vec<f64>> = (0..world.n_prompts).map(|x| world.ref_probs(x)).collect();
    let mut triples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.random_range(0..world.n_prompts);
        let y1 = draw_categorical(&ref_probs[x], None, &mut rng);
        let y2 = draw_categorical(&ref_probs[x], Some(y1), &mut rng);
        let p1 = sigmoid(world.true_reward[x][y1] - world.true_reward[x][y2]);
        let (w, l) = if rng.random::<f64>() < p1 { (y1, y2) } else { (y2, y1) };
        triples.push(PreferenceTriple::new(x, w, l, world.len_of(x, w), world.len_of(x, l)));
    }
    Ok(Dataset::new(triples, Provenance::Synthetic))
}
