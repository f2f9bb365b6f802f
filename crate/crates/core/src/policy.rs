//! Tabular softmax policies, implicit rewards and the KL-regularized closed form.
//!
//! The policy parameters are the logits matrix itself: `pi(y | x) =
//! softmax(logits[x])[y]`. There is no sharing across prompts, so every
//! gradient touches exactly one row.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::world::World;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy<T> {
    n_prompts: usize,
    n_responses: usize,
    logits: Vec<T>,
}

/// Gradient supported on one prompt's logits row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad<T> {
    pub prompt: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n_prompts = rows.len();
        let n_responses = rows.first().map_or(0, Vec::len);
        if n_prompts == 0 || n_responses < 2 || rows.iter().any(|r| r.len() != n_responses) {
            return Err(Error::arg("policy rows must be non-empty, rectangular, with >= 2 responses"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self {
            n_prompts,
            n_responses,
            logits: rows.iter().flatten().copied().collect(),
        })
    }

    /// The reference policy of a world.
    pub fn reference(world: &World) -> Self {
        Self {
            n_prompts: world.n_prompts,
            n_responses: world.n_responses,
            logits: world.ref_logits.iter().flatten().map(|&v| T::of(v)).collect(),
        }
    }

    /// Reference logits plus i.i.d. Gaussian noise; an untrained policy that
    /// carries no information about the true reward.
    pub fn perturbed(base: &Self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, scale).expect("finite noise scale");
        let logits = base.logits.iter().map(|&v| v + T::of(noise.sample(&mut rng))).collect();
        Self { logits, ..*base }
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_prompts == other.n_prompts && self.n_responses == other.n_responses
    }

    pub fn check_index(&self, prompt: usize, y: usize) -> Result<()> {
        if prompt >= self.n_prompts || y >= self.n_responses {
            return Err(Error::Index(format!(
                "(prompt {prompt}, response {y}) outside {}x{} policy",
                self.n_prompts, self.n_responses
            )));
        }
        Ok(())
    }

    pub fn row(&self, prompt: usize) -> &[T] {
        &self.logits[prompt * self.n_responses..(prompt + 1) * self.n_responses]
    }

    pub fn row_mut(&mut self, prompt: usize) -> &mut [T] {
        &mut self.logits[prompt * self.n_responses..(prompt + 1) * self.n_responses]
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<T> {
        let row = self.row(prompt);
        let lse = log_sum_exp(row);
        row.iter().map(|&v| v - lse).collect()
    }

    pub fn probs(&self, prompt: usize) -> Vec<T> {
        self.log_probs(prompt).into_iter().map(T::exp).collect()
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        (0..self.n_prompts).map(|x| self.row(x).to_vec()).collect()
    }

    /// Squared Euclidean distance between logit matrices.
    pub fn sq_distance(&self, other: &Self) -> T {
        self.logits.iter().zip(&other.logits).map(|(&a, &b)| (a - b) * (a - b)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let dump = PolicyDump {
            n_prompts: self.n_prompts,
            n_responses: self.n_responses,
            logits: self.rows().into_iter().map(|r| r.into_iter().map(Scalar::to_f64_lossy).collect()).collect(),
        };
        Ok(serde_json::to_string(&dump)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: PolicyDump = serde_json::from_str(text)?;
        let rows: Vec<Vec<T>> = dump.logits.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
        let pol = Self::from_rows(&rows)?;
        if pol.n_prompts != dump.n_prompts || pol.n_responses != dump.n_responses {
            return Err(Error::arg("policy dump shape disagrees with its logits"));
        }
        Ok(pol)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDump {
    n_prompts: usize,
    n_responses: usize,
    logits: Vec<Vec<f64>>,
}

pub fn log_prob<T: Scalar>(pol: &TabularPolicy<T>, prompt: usize, y: usize) -> Result<T> {
    pol.check_index(prompt, y)?;
    let row = pol.row(prompt);
    Ok(row[y] - log_sum_exp(row))
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`.
pub fn implicit_reward<T: Scalar>(
    pol: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    prompt: usize,
    y: usize,
    beta: T,
) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(Error::arg("beta must be > 0"));
    }
    Ok(beta * (log_prob(pol, prompt, y)? - log_prob(reference, prompt, y)?))
}

/// `pi(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x)`, with `Z(x)` summed exactly
/// over the finite response set. The returned logits are normalized log-probs.
pub fn closed_form_policy<T: Scalar>(world: &World, reward: &[Vec<f64>], beta: f64) -> Result<TabularPolicy<T>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg("beta must be > 0"));
    }
    if reward.len() != world.n_prompts || reward.iter().any(|r| r.len() != world.n_responses) {
        return Err(Error::arg("reward matrix does not match world shape"));
    }
    let rows: Vec<Vec<T>> = (0..world.n_prompts)
        .map(|x| {
            let unnorm: Vec<f64> = (0..world.n_responses)
                .map(|y| world.ref_log_prob(x, y) + reward[x][y] / beta)
                .collect();
            let log_z = log_sum_exp(&unnorm);
            unnorm.iter().map(|&v| T::of(v - log_z)).collect()
        })
        .collect();
    TabularPolicy::from_rows(&rows)
}

/// `d log pi(y|x) / d logits[x] = e_y - softmax(logits[x])`.
pub fn grad_log_prob<T: Scalar>(pol: &TabularPolicy<T>, prompt: usize, y: usize) -> Result<RowGrad<T>> {
    pol.check_index(prompt, y)?;
    let mut values: Vec<T> = pol.probs(prompt).into_iter().map(|p| -p).collect();
    values[y] = values[y] + T::one();
    Ok(RowGrad { prompt, values })
}

/// Per-(prompt, response) embedding used by [`LinearReward`].
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding<T> {
    /// Indicator of the (prompt, response) cell; makes the reward tabular.
    OneHot { n_prompts: usize, n_responses: usize },
    /// Dense random vectors of a fixed dimension, one per cell.
    LowRank { n_responses: usize, vectors: Vec<Vec<T>> },
}

/// Linear reward model `r_phi(x, y) = <phi, e(x, y)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReward<T> {
    pub phi: Vec<T>,
    pub embedding: Embedding<T>,
}

impl<T: Scalar> LinearReward<T> {
    pub fn one_hot(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            phi: vec![T::zero(); n_prompts * n_responses],
            embedding: Embedding::OneHot { n_prompts, n_responses },
        }
    }

    /// Gaussian embeddings of dimension `dim`; with `dim` below the number of
    /// cells the model cannot represent arbitrary rewards.
    pub fn low_rank(n_prompts: usize, n_responses: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim.max(1) as f64).sqrt()).expect("valid normal");
        let vectors = (0..n_prompts * n_responses)
            .map(|_| (0..dim).map(|_| T::of(normal.sample(&mut rng))).collect())
            .collect();
        Self {
            phi: vec![T::zero(); dim],
            embedding: Embedding::LowRank { n_responses, vectors },
        }
    }

    fn n_responses(&self) -> usize {
        match &self.embedding {
            Embedding::OneHot { n_responses, .. } | Embedding::LowRank { n_responses, .. } => *n_responses,
        }
    }

    fn cell(&self, prompt: usize, y: usize) -> Result<usize> {
        let n_resp = self.n_responses();
        let n_cells = match &self.embedding {
            Embedding::OneHot { n_prompts, n_responses } => n_prompts * n_responses,
            Embedding::LowRank { vectors, .. } => vectors.len(),
        };
        let cell = prompt * n_resp + y;
        if y >= n_resp || cell >= n_cells {
            return Err(Error::Index(format!("(prompt {prompt}, response {y}) outside reward embedding")));
        }
        Ok(cell)
    }

    pub fn reward(&self, prompt: usize, y: usize) -> Result<T> {
        let cell = self.cell(prompt, y)?;
        Ok(match &self.embedding {
            Embedding::OneHot { .. } => self.phi[cell],
            Embedding::LowRank { vectors, .. } => crate::scalar::dot(&self.phi, &vectors[cell]),
        })
    }

    /// Adds `scale * d r_phi(x, y) / d phi` into `acc`.
    pub fn accumulate_grad(&self, prompt: usize, y: usize, scale: T, acc: &mut [T]) -> Result<()> {
        let cell = self.cell(prompt, y)?;
        match &self.embedding {
            Embedding::OneHot { .. } => acc[cell] = acc[cell] + scale,
            Embedding::LowRank { vectors, .. } => {
                for (a, &v) in acc.iter_mut().zip(&vectors[cell]) {
                    *a = *a + scale * v;
                }
            }
        }
        Ok(())
    }
}
