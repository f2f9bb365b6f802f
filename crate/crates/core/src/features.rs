//! Permutation-invariant features of a preference triple.
//!
//! Three pairs of (average, absolute difference) statistics over the two
//! responses: token length, whole-response log-likelihood under the current
//! policy, and implicit reward. After optional z-scoring a constant 1 is
//! appended so the flip model's bias is just the last weight.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceTriple;
use crate::error::{Error, Result};
use crate::policy::{implicit_reward, log_prob, TabularPolicy};
use crate::scalar::Scalar;

/// Number of raw (non-bias) feature coordinates.
pub const RAW_DIM: usize = 6;
/// Feature dimension including the bias slot.
pub const FEATURE_DIM: usize = RAW_DIM + 1;

pub const LEN_AVG: usize = 0;
pub const LEN_ABSDIFF: usize = 1;
pub const PPL_AVG: usize = 2;
pub const PPL_ABSDIFF: usize = 3;
pub const MARGIN_AVG: usize = 4;
pub const MARGIN_ABSDIFF: usize = 5;
pub const BIAS: usize = 6;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "len_avg",
    "len_absdiff",
    "ppl_avg",
    "ppl_absdiff",
    "margin_avg",
    "margin_absdiff",
    "bias",
];

pub type RawFeatures<T> = [T; RAW_DIM];

/// `[len_avg, len_absdiff, ppl_avg, ppl_absdiff, margin_avg, margin_absdiff, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector<T>(pub [T; FEATURE_DIM]);

impl<T: Scalar> FeatureVector<T> {
    pub fn from_raw(raw: RawFeatures<T>) -> Self {
        let mut v = [T::one(); FEATURE_DIM];
        v[..RAW_DIM].copy_from_slice(&raw);
        Self(v)
    }

    pub fn values(&self) -> &[T; FEATURE_DIM] {
        &self.0
    }
}

fn avg_absdiff<T: Scalar>(a: T, b: T) -> (T, T) {
    ((a + b) * T::half(), (a - b).abs())
}

fn finite_pair<T: Scalar>(a: T, b: T, what: &str) -> Result<()> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} inputs ({a}, {b})")))
    }
}

pub fn h_len<T: Scalar>(triple: &PreferenceTriple) -> (T, T) {
    avg_absdiff(T::of(triple.chosen_len as f64), T::of(triple.rejected_len as f64))
}

/// Perplexity features from whole-response log-likelihoods.
pub fn h_ppl<T: Scalar>(logp_w: T, logp_l: T) -> Result<(T, T)> {
    finite_pair(logp_w, logp_l, "h_ppl")?;
    Ok(avg_absdiff(logp_w, logp_l))
}

pub fn h_margin<T: Scalar>(rhat_w: T, rhat_l: T) -> Result<(T, T)> {
    finite_pair(rhat_w, rhat_l, "h_margin")?;
    Ok(avg_absdiff(rhat_w, rhat_l))
}

/// Unscaled six-coordinate features from precomputed log-probs and implicit rewards.
pub fn raw_features<T: Scalar>(triple: &PreferenceTriple, logps: (T, T), rhats: (T, T)) -> Result<RawFeatures<T>> {
    let (la, ld) = h_len::<T>(triple);
    let (pa, pd) = h_ppl(logps.0, logps.1)?;
    let (ma, md) = h_margin(rhats.0, rhats.1)?;
    Ok([la, ld, pa, pd, ma, md])
}

pub fn assemble<T: Scalar>(
    triple: &PreferenceTriple,
    logps: (T, T),
    rhats: (T, T),
    scaler: Option<&FeatureScaler<T>>,
) -> Result<FeatureVector<T>> {
    let raw = raw_features(triple, logps, rhats)?;
    Ok(match scaler {
        Some(s) => s.apply(&raw),
        None => FeatureVector::from_raw(raw),
    })
}

/// Where the policy-dependent features come from.
#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a, T> {
    pub policy: &'a TabularPolicy<T>,
    pub reference: &'a TabularPolicy<T>,
    pub beta: T,
}

impl<'a, T: Scalar> PolicyView<'a, T> {
    pub fn new(policy: &'a TabularPolicy<T>, reference: &'a TabularPolicy<T>, beta: T) -> Self {
        Self { policy, reference, beta }
    }

    pub fn raw(&self, t: &PreferenceTriple) -> Result<RawFeatures<T>> {
        let logps = (
            log_prob(self.policy, t.prompt_id, t.chosen_id)?,
            log_prob(self.policy, t.prompt_id, t.rejected_id)?,
        );
        let rhats = (
            implicit_reward(self.policy, self.reference, t.prompt_id, t.chosen_id, self.beta)?,
            implicit_reward(self.policy, self.reference, t.prompt_id, t.rejected_id, self.beta)?,
        );
        raw_features(t, logps, rhats)
    }

    pub fn raw_all(&self, triples: &[PreferenceTriple]) -> Result<Vec<RawFeatures<T>>> {
        triples.iter().map(|t| self.raw(t)).collect()
    }
}

/// Features of an ingested triple at the reference policy: the stored
/// log-probs feed the perplexity pair and the implicit rewards are zero.
pub fn reference_raw<T: Scalar>(t: &PreferenceTriple) -> Result<RawFeatures<T>> {
    let (w, l) = t
        .logp_ref
        .ok_or_else(|| Error::arg("triple carries no reference log-probs"))?;
    raw_features(t, (T::of(w), T::of(l)), (T::zero(), T::zero()))
}

/// Per-coordinate z-scoring of the six raw features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler<T> {
    pub mean: [T; RAW_DIM],
    pub std: [T; RAW_DIM],
}

impl<T: Scalar> FeatureScaler<T> {
    pub fn identity() -> Self {
        Self {
            mean: [T::zero(); RAW_DIM],
            std: [T::one(); RAW_DIM],
        }
    }

    pub fn apply(&self, raw: &RawFeatures<T>) -> FeatureVector<T> {
        let mut out = [T::zero(); RAW_DIM];
        for i in 0..RAW_DIM {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        FeatureVector::from_raw(out)
    }

    pub fn apply_all(&self, raw: &[RawFeatures<T>]) -> Vec<FeatureVector<T>> {
        raw.iter().map(|r| self.apply(r)).collect()
    }
}

/// Mean and population standard deviation per coordinate; coordinates with
/// zero spread get std 1.
pub fn fit_scaler<T: Scalar>(raw: &[RawFeatures<T>]) -> Result<FeatureScaler<T>> {
    if raw.len() < 2 {
        return Err(Error::arg(format!("fit_scaler needs at least 2 vectors, got {}", raw.len())));
    }
    let n = T::of(raw.len() as f64);
    let mut mean = [T::zero(); RAW_DIM];
    let mut std = [T::one(); RAW_DIM];
    for i in 0..RAW_DIM {
        mean[i] = raw.iter().map(|r| r[i]).sum::<T>() / n;
        let var = raw.iter().map(|r| (r[i] - mean[i]) * (r[i] - mean[i])).sum::<T>() / n;
        let sd = var.sqrt();
        // Relative floor so that float noise on a constant column reads as zero spread.
        let scale = mean[i].abs().max(T::one());
        if sd > scale * T::epsilon() * T::of(16.0) {
            std[i] = sd;
        }
    }
    Ok(FeatureScaler { mean, std })
}

/// Smallest eigenvalue of the empirical second-moment matrix `E[h h^T]` over
/// the non-bias coordinates. Positive iff the features span all six directions.
pub fn coverage_lambda_min<T: Scalar>(features: &[FeatureVector<T>]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::arg("coverage needs at least one feature vector"));
    }
    let mut m = DMatrix::<f64>::zeros(RAW_DIM, RAW_DIM);
    for f in features {
        for i in 0..RAW_DIM {
            for j in 0..RAW_DIM {
                m[(i, j)] += f.0[i].to_f64_lossy() * f.0[j].to_f64_lossy();
            }
        }
    }
    m /= features.len() as f64;
    let eig = SymmetricEigen::new(m);
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}
