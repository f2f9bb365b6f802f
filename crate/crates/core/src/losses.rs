//! The DPO loss family and its gradient weights.
//!
//! Every loss depends on the policy only through the margin
//! `m = rhat_w - rhat_l` with `p = sigmoid(m)`, and its gradient has the form
//!
//! ```text
//! dL/dtheta = -zeta * beta * (dlog pi(y_w|x) - dlog pi(y_l|x))
//! ```
//!
//! so each variant is characterized by its scalar weight `zeta = -dL/dm`.
//!
//! | variant | loss                                    | zeta                                   |
//! |---------|-----------------------------------------|----------------------------------------|
//! | DPO     | `-ln p`                                 | `1 - p`                                |
//! | cDPO    | `-(1-e) ln p - e ln(1-p)`               | `1 - p - e`                            |
//! | rDPO    | `-[(1-e) ln p - e ln(1-p)] / (1-2e)`    | `1 - p + e/(1-2e)`                     |
//! | FA-DPO  | `-ln((1-e) p + e (1-p))`                | `(1-2e) p / ((1-2e) p + e) * (1 - p)`  |
//!
//! cDPO and rDPO use one fixed `e`; FA-DPO takes a per-sample `e` from the
//! flip model, held constant with respect to the policy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceTriple;
use crate::error::{Error, Result};
use crate::policy::{implicit_reward, LinearReward, TabularPolicy};
use crate::scalar::{clamped_ln, sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Cdpo { eps: f64 },
    Rdpo { eps: f64 },
    Fadpo,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Cdpo { eps } | LossKind::Rdpo { eps } if !(0.0..0.5).contains(&eps) => {
                Err(Error::arg(format!("{} requires eps in [0, 0.5), got {eps}", self.name())))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Cdpo { .. } => "cdpo",
            LossKind::Rdpo { .. } => "rdpo",
            LossKind::Fadpo => "fadpo",
        }
    }

    /// Whether the per-sample flip probability enters the loss.
    pub fn uses_flip_model(&self) -> bool {
        matches!(self, LossKind::Fadpo)
    }

    /// Parses `dpo | cdpo | rdpo | fadpo`, giving the fixed-rate variants `baseline_eps`.
    pub fn parse_with(name: &str, baseline_eps: f64) -> Result<Self> {
        let kind = match name.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dpo" => LossKind::Dpo,
            "cdpo" => LossKind::Cdpo { eps: baseline_eps },
            "rdpo" => LossKind::Rdpo { eps: baseline_eps },
            "fadpo" => LossKind::Fadpo,
            other => return Err(Error::arg(format!("unknown loss `{other}` (expected dpo, cdpo, rdpo, fadpo)"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::parse_with(s, 0.1)
    }
}

/// Per-pair quantities shared by every loss variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEval<T> {
    pub p_theta: T,
    pub rhat_w: T,
    pub rhat_l: T,
    /// Per-sample flip probability; only read by FA-DPO.
    pub epsilon: T,
}

impl<T: Scalar> PairEval<T> {
    /// From any pair of scores whose difference is the preference logit:
    /// implicit rewards of a policy, or an explicit reward model.
    pub fn from_scores(score_w: T, score_l: T) -> Self {
        Self {
            p_theta: sigmoid(score_w - score_l),
            rhat_w: score_w,
            rhat_l: score_l,
            epsilon: T::zero(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: T) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn margin(&self) -> T {
        self.rhat_w - self.rhat_l
    }

    /// The same pair with the preferred and dispreferred responses exchanged.
    pub fn swapped(&self) -> Self {
        Self::from_scores(self.rhat_l, self.rhat_w).with_epsilon(self.epsilon)
    }
}

pub fn p_theta<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    prompt: usize,
    y_w: usize,
    y_l: usize,
    beta: T,
) -> Result<PairEval<T>> {
    let rw = implicit_reward(policy, reference, prompt, y_w, beta)?;
    let rl = implicit_reward(policy, reference, prompt, y_l, beta)?;
    if !(rw.is_finite() && rl.is_finite()) {
        return Err(Error::NonFinite(format!("implicit reward at prompt {prompt}")));
    }
    Ok(PairEval::from_scores(rw, rl))
}

/// `p_theta` for a triple in its labeled order.
pub fn eval_triple<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    t: &PreferenceTriple,
    beta: T,
) -> Result<PairEval<T>> {
    p_theta(policy, reference, t.prompt_id, t.chosen_id, t.rejected_id, beta)
}

fn rdpo_denominator<T: Scalar>(eps: f64) -> Result<T> {
    if eps >= 0.5 {
        return Err(Error::arg(format!("rdpo requires eps < 0.5, got {eps}")));
    }
    Ok(T::of(1.0 - 2.0 * eps))
}

pub fn loss<T: Scalar>(kind: LossKind, ev: &PairEval<T>) -> Result<T> {
    let p = ev.p_theta;
    let one = T::one();
    Ok(match kind {
        LossKind::Dpo => -clamped_ln(p),
        LossKind::Cdpo { eps } => {
            let e = T::of(eps);
            -(one - e) * clamped_ln(p) - e * clamped_ln(one - p)
        }
        LossKind::Rdpo { eps } => {
            let e = T::of(eps);
            -((one - e) * clamped_ln(p) - e * clamped_ln(one - p)) / rdpo_denominator::<T>(eps)?
        }
        LossKind::Fadpo => {
            let e = ev.epsilon;
            -clamped_ln((one - e) * p + e * (one - p))
        }
    })
}

/// Gradient weight `zeta = -dL/dm`.
pub fn zeta<T: Scalar>(kind: LossKind, ev: &PairEval<T>) -> Result<T> {
    let p = ev.p_theta;
    let one = T::one();
    let base = one - p;
    Ok(match kind {
        LossKind::Dpo => base,
        LossKind::Cdpo { eps } => base - T::of(eps),
        LossKind::Rdpo { eps } => base + T::of(eps) / rdpo_denominator::<T>(eps)?,
        LossKind::Fadpo => {
            let e = ev.epsilon;
            let a = (one - T::two() * e) * p;
            let denom = a + e;
            if denom == T::zero() {
                T::zero()
            } else {
                a / denom * base
            }
        }
    })
}

/// `-zeta * beta * (gradlog_w - gradlog_l)`.
pub fn grad_policy_direction<T: Scalar>(
    kind: LossKind,
    ev: &PairEval<T>,
    gradlog_w: &[T],
    gradlog_l: &[T],
    beta: T,
) -> Result<Vec<T>> {
    if gradlog_w.len() != gradlog_l.len() {
        return Err(Error::Dimension {
            expected: gradlog_w.len(),
            got: gradlog_l.len(),
        });
    }
    let k = -zeta(kind, ev)? * beta;
    Ok(gradlog_w.iter().zip(gradlog_l).map(|(&w, &l)| k * (w - l)).collect())
}

/// Mean loss of an explicit reward model over `triples` and its gradient in `phi`.
///
/// `epsilon` supplies per-triple flip probabilities for FA-DPO (ignored otherwise).
pub fn reward_model_objective<T: Scalar>(
    kind: LossKind,
    reward: &LinearReward<T>,
    triples: &[PreferenceTriple],
    epsilon: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    if triples.is_empty() {
        return Err(Error::arg("reward objective needs at least one triple"));
    }
    if let Some(e) = epsilon {
        if e.len() != triples.len() {
            return Err(Error::Dimension {
                expected: triples.len(),
                got: e.len(),
            });
        }
    }
    let n = T::of(triples.len() as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); reward.phi.len()];
    for (i, t) in triples.iter().enumerate() {
        let ev = PairEval::from_scores(reward.reward(t.prompt_id, t.chosen_id)?, reward.reward(t.prompt_id, t.rejected_id)?)
            .with_epsilon(epsilon.map_or(T::zero(), |e| e[i]));
        total = total + loss(kind, &ev)?;
        let z = zeta(kind, &ev)?;
        reward.accumulate_grad(t.prompt_id, t.chosen_id, -z / n, &mut grad)?;
        reward.accumulate_grad(t.prompt_id, t.rejected_id, z / n, &mut grad)?;
    }
    Ok((total / n, grad))
}
