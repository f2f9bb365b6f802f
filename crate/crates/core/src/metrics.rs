//! Evaluation: ranking accuracy, flip-model recovery, consistency gap and
//! convergence-rate estimation.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::flip_model::{terminal_geometric_mean, ConvergenceTrace, FlipModel};
use crate::losses::eval_triple;
use crate::policy::{implicit_reward, TabularPolicy};
use crate::scalar::Scalar;

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub accuracy: f64,
    /// Pearson correlation of learned vs generator flip probabilities.
    pub flip_corr: Option<f64>,
    pub flip_separation: Option<f64>,
    pub flip_auc: Option<f64>,
    pub coverage_lambda_min: Option<f64>,
    pub consistency_gap: Option<f64>,
}

/// Fraction of triples whose chosen response gets the strictly larger
/// implicit reward. Ties count as misses.
pub fn accuracy<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    test: &Dataset,
    beta: T,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::arg("accuracy needs a non-empty test set"));
    }
    if test.is_corrupted() {
        return Err(Error::arg("accuracy must be measured on a clean test set"));
    }
    let mut hits = 0usize;
    for t in &test.triples {
        let rw = implicit_reward(policy, reference, t.prompt_id, t.chosen_id, beta)?;
        let rl = implicit_reward(policy, reference, t.prompt_id, t.rejected_id, beta)?;
        if rw > rl {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks with ties averaged, 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

/// Probability that a random positive scores above a random negative (ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let r = ranks(scores);
    let pos_rank_sum: f64 = r.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipRecovery {
    /// Pearson correlation; 0 with `corr_defined = false` for constant predictions.
    pub flip_corr: f64,
    pub corr_defined: bool,
    pub rank_corr: Option<f64>,
    /// Mean learned eps on flipped triples minus on unflipped ones.
    pub flip_separation: f64,
    /// `flip_separation` over its Welch standard error.
    pub separation_z: f64,
    pub flip_auc: Option<f64>,
}

/// Compares learned flip probabilities with the generator's on a corrupted dataset.
pub fn flip_recovery<T: Scalar>(
    learned: &FlipModel<T>,
    learned_features: &[FeatureVector<T>],
    truth: &Dataset,
) -> Result<FlipRecovery> {
    let recs = truth
        .corruption
        .as_ref()
        .ok_or_else(|| Error::arg("flip recovery needs corruption records"))?;
    if recs.len() != learned_features.len() {
        return Err(Error::Dimension {
            expected: recs.len(),
            got: learned_features.len(),
        });
    }
    if recs.is_empty() {
        return Err(Error::arg("flip recovery needs at least one triple"));
    }
    let pred: Vec<f64> = learned_features.iter().map(|h| learned.epsilon(h).to_f64_lossy()).collect();
    Ok(recovery_from_predictions(&pred, recs.iter().map(|r| (r.epsilon, r.flipped))))
}

pub(crate) fn recovery_from_predictions(pred: &[f64], truth: impl Iterator<Item = (f64, bool)>) -> FlipRecovery {
    let (true_eps, flipped): (Vec<f64>, Vec<bool>) = truth.unzip();
    let corr = pearson(&pred, &true_eps);
    let group = |want: bool| -> Vec<f64> {
        pred.iter()
            .zip(&flipped)
            .filter(|(_, &f)| f == want)
            .map(|(&p, _)| p)
            .collect()
    };
    let (on, off) = (group(true), group(false));
    let (separation, z) = if on.is_empty() || off.is_empty() {
        (0.0, 0.0)
    } else {
        let var = |xs: &[f64]| {
            let m = mean(xs);
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len().max(2) - 1) as f64
        };
        let sep = mean(&on) - mean(&off);
        let se = (var(&on) / on.len() as f64 + var(&off) / off.len() as f64).sqrt();
        let z = if se > 0.0 {
            sep / se
        } else if sep == 0.0 {
            0.0
        } else {
            sep.signum() * f64::INFINITY
        };
        (sep, z)
    };
    FlipRecovery {
        flip_corr: corr.unwrap_or(0.0),
        corr_defined: corr.is_some(),
        rank_corr: spearman(&pred, &true_eps),
        flip_separation: separation,
        separation_z: z,
        flip_auc: auc(&pred, &flipped),
    }
}

/// Mean absolute difference of `p_theta` between two policies over `test`.
pub fn mean_abs_p_difference<T: Scalar>(
    a: &TabularPolicy<T>,
    b: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    test: &Dataset,
    beta: T,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::arg("consistency gap needs test pairs"));
    }
    let mut total = 0.0;
    for t in &test.triples {
        let pa = eval_triple(a, reference, t, beta)?.p_theta.to_f64_lossy();
        let pb = eval_triple(b, reference, t, beta)?.p_theta.to_f64_lossy();
        total += (pa - pb).abs();
    }
    Ok(total / test.len() as f64)
}

/// A trained policy with the norm of its full training-objective gradient at the end.
#[derive(Debug, Clone, Copy)]
pub struct TrainedPolicy<'a, T> {
    pub policy: &'a TabularPolicy<T>,
    pub grad_norm: f64,
}

/// Mean absolute `p_theta` difference between two converged policies.
pub fn consistency_gap<T: Scalar>(
    a: TrainedPolicy<'_, T>,
    b: TrainedPolicy<'_, T>,
    reference: &TabularPolicy<T>,
    test: &Dataset,
    beta: T,
    grad_tol: f64,
) -> Result<f64> {
    for side in [&a, &b] {
        if !(side.grad_norm <= grad_tol) {
            return Err(Error::NotConverged {
                grad_norm: side.grad_norm,
                threshold: grad_tol,
            });
        }
    }
    mean_abs_p_difference(a.policy, b.policy, reference, test, beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub rate: f64,
    /// False when the terminal ratios do not contract (`rate >= 1`).
    pub contracting: bool,
}

/// Geometric mean of the terminal half of squared-distance ratios.
pub fn qlinear_rate<T: Scalar>(trace: &ConvergenceTrace<T>) -> Result<RateEstimate> {
    if trace.ratios.len() < 5 {
        return Err(Error::arg(format!("need at least 5 ratios, trace has {}", trace.ratios.len())));
    }
    let rate = terminal_geometric_mean(&trace.ratios).map_or(f64::NAN, Scalar::to_f64_lossy);
    Ok(RateEstimate {
        rate,
        contracting: rate < 1.0,
    })
}
