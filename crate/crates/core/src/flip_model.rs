//! Logistic instance-dependent flip model `eps(h) = sigmoid(<omega, h>)`.
//!
//! With the clean-preference probabilities `p` held fixed, fitting `omega`
//! is gradient descent on
//!
//! ```text
//! L(omega) = -mean_i ln( p_i + eps_i * (1 - 2 p_i) )
//! ```
//!
//! where `p_i` is the clean probability of the *observed* ordering of triple
//! `i`, so the observed label never appears separately.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_DIM};
use crate::scalar::{clamped_ln, dot, l2_norm, sigmoid, Scalar, LOG_FLOOR};

pub type Weights<T> = [T; FEATURE_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipModel<T> {
    /// Feature weights; the last entry multiplies the constant bias slot.
    pub omega: Weights<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_norm: Option<T>,
}

impl<T: Scalar> Default for FlipModel<T> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<T: Scalar> FlipModel<T> {
    /// `eps = 0.5` everywhere.
    pub fn zeros() -> Self {
        Self::new([T::zero(); FEATURE_DIM])
    }

    pub fn new(omega: Weights<T>) -> Self {
        Self { omega, max_norm: None }
    }

    pub fn from_slice(omega: &[T]) -> Result<Self> {
        let arr: Weights<T> = omega.try_into().map_err(|_| Error::Dimension {
            expected: FEATURE_DIM,
            got: omega.len(),
        })?;
        if arr.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("flip model weights".into()));
        }
        Ok(Self::new(arr))
    }

    pub fn with_max_norm(mut self, bound: T) -> Self {
        self.max_norm = Some(bound);
        self.project();
        self
    }

    pub fn logit(&self, h: &FeatureVector<T>) -> T {
        dot(&self.omega, &h.0)
    }

    /// `sigma(<omega, h>)`, kept one machine epsilon inside the unit interval.
    pub fn epsilon(&self, h: &FeatureVector<T>) -> T {
        let tiny = T::epsilon();
        sigmoid(self.logit(h)).max(tiny).min(T::one() - tiny)
    }

    /// `eps (1 - eps) h`.
    pub fn grad_epsilon(&self, h: &FeatureVector<T>) -> Weights<T> {
        let e = sigmoid(self.logit(h));
        let s = e * (T::one() - e);
        h.0.map(|v| s * v)
    }

    /// Rescales `omega` back onto the `max_norm` ball when it has left it.
    pub fn project(&mut self) {
        if let Some(bound) = self.max_norm {
            let n = l2_norm(&self.omega);
            if n > bound {
                let k = bound / n;
                self.omega = self.omega.map(|w| w * k);
            }
        }
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.omega)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> FlipModel<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        if model.omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("flip model weights".into()));
        }
        Ok(model)
    }
}

/// Free-function form of [`FlipModel::epsilon`] over a dynamically sized feature slice.
pub fn epsilon<T: Scalar>(model: &FlipModel<T>, h: &[T]) -> Result<T> {
    Ok(model.epsilon(&fixed(h)?))
}

pub fn grad_epsilon<T: Scalar>(model: &FlipModel<T>, h: &[T]) -> Result<Weights<T>> {
    Ok(model.grad_epsilon(&fixed(h)?))
}

fn fixed<T: Scalar>(h: &[T]) -> Result<FeatureVector<T>> {
    let arr: [T; FEATURE_DIM] = h.try_into().map_err(|_| Error::Dimension {
        expected: FEATURE_DIM,
        got: h.len(),
    })?;
    Ok(FeatureVector(arr))
}

fn check_inputs<T: Scalar>(features: &[FeatureVector<T>], p: &[T]) -> Result<()> {
    if features.len() != p.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            got: p.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::arg("flip model needs at least one sample"));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > T::zero() && v < T::one())) {
        return Err(Error::arg(format!("clean preference probability {bad} outside (0, 1)")));
    }
    Ok(())
}

/// Corrupted-label likelihood `p + eps (1 - 2p)`.
fn mixture<T: Scalar>(p: T, eps: T) -> T {
    p + eps * (T::one() - T::two() * p)
}

pub fn flip_loss<T: Scalar>(model: &FlipModel<T>, features: &[FeatureVector<T>], p: &[T]) -> T {
    let n = T::of(features.len() as f64);
    features
        .iter()
        .zip(p)
        .map(|(h, &pi)| -clamped_ln(mixture(pi, model.epsilon(h))))
        .sum::<T>()
        / n
}

/// Gradient of [`flip_loss`] in `omega`.
pub fn flip_loss_grad<T: Scalar>(model: &FlipModel<T>, features: &[FeatureVector<T>], p: &[T]) -> Weights<T> {
    let n = T::of(features.len() as f64);
    let floor = T::of(LOG_FLOOR);
    let mut g = [T::zero(); FEATURE_DIM];
    for (h, &pi) in features.iter().zip(p) {
        let e = model.epsilon(h);
        let q = mixture(pi, e);
        if q < floor {
            continue;
        }
        let coef = -(T::one() - T::two() * pi) / q * e * (T::one() - e);
        for (gi, &hi) in g.iter_mut().zip(&h.0) {
            *gi = *gi + coef * hi;
        }
    }
    g.map(|v| v / n)
}

/// Analytic Hessian of [`flip_loss`] in `omega`.
pub fn flip_loss_hessian<T: Scalar>(
    model: &FlipModel<T>,
    features: &[FeatureVector<T>],
    p: &[T],
) -> [[T; FEATURE_DIM]; FEATURE_DIM] {
    let n = T::of(features.len() as f64);
    let mut hess = [[T::zero(); FEATURE_DIM]; FEATURE_DIM];
    for (h, &pi) in features.iter().zip(p) {
        let e = model.epsilon(h);
        let q = mixture(pi, e).max(T::of(LOG_FLOOR));
        let a = T::one() - T::two() * pi;
        let s = e * (T::one() - e);
        let coef = (a * a) / (q * q) * s * s - a / q * s * (T::one() - T::two() * e);
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                hess[i][j] = hess[i][j] + coef * h.0[i] * h.0[j];
            }
        }
    }
    hess.map(|row| row.map(|v| v / n))
}

/// Extreme eigenvalues `(min, max)` of a symmetric 7x7 matrix.
pub fn eigen_extremes<T: Scalar>(m: &[[T; FEATURE_DIM]; FEATURE_DIM]) -> (f64, f64) {
    let dm = DMatrix::from_fn(FEATURE_DIM, FEATURE_DIM, |i, j| m[i][j].to_f64_lossy());
    let eig = SymmetricEigen::new(dm);
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Local smoothness constant: the largest Hessian eigenvalue at `model`.
pub fn smoothness<T: Scalar>(model: &FlipModel<T>, features: &[FeatureVector<T>], p: &[T]) -> f64 {
    eigen_extremes(&flip_loss_hessian(model, features, p)).1
}

/// Distances below this are treated as converged when forming ratios.
pub const TRACE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace<T> {
    /// `||omega_t - omega*||`, starting with the initial iterate.
    pub iterate_distances: Vec<T>,
    /// `||omega_{t+1} - omega*||^2 / ||omega_t - omega*||^2` while the
    /// previous distance is above [`TRACE_FLOOR`].
    pub ratios: Vec<T>,
    /// Geometric mean of the last half of `ratios` (NaN when empty).
    pub estimated_rate: T,
}

impl<T: Scalar> ConvergenceTrace<T> {
    pub fn from_distances(iterate_distances: Vec<T>) -> Self {
        let floor = T::of(TRACE_FLOOR);
        let ratios: Vec<T> = iterate_distances
            .windows(2)
            .take_while(|w| w[0] > floor)
            .map(|w| (w[1] * w[1]) / (w[0] * w[0]))
            .collect();
        let estimated_rate = terminal_geometric_mean(&ratios).unwrap_or_else(T::nan);
        Self {
            iterate_distances,
            ratios,
            estimated_rate,
        }
    }

    pub fn terminal_ratios(&self) -> &[T] {
        &self.ratios[self.ratios.len() / 2..]
    }
}

/// Geometric mean over the second half of `ratios`.
pub fn terminal_geometric_mean<T: Scalar>(ratios: &[T]) -> Option<T> {
    let tail = &ratios[ratios.len() / 2..];
    if tail.is_empty() {
        return None;
    }
    let log_sum: T = tail.iter().map(|r| r.max(T::min_positive_value()).ln()).sum();
    Some((log_sum / T::of(tail.len() as f64)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions<T> {
    pub lr: T,
    pub steps: usize,
    /// Optimum used only to record a [`ConvergenceTrace`].
    pub reference: Option<Weights<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T> {
    /// Loss before the first step and after every step.
    pub losses: Vec<T>,
    pub trace: Option<ConvergenceTrace<T>>,
}

/// Full-batch gradient descent on [`flip_loss`] with `p` frozen.
pub fn fit<T: Scalar>(
    model: &FlipModel<T>,
    features: &[FeatureVector<T>],
    p: &[T],
    opts: &FitOptions<T>,
) -> Result<(FlipModel<T>, FitReport<T>)> {
    if !(opts.lr > T::zero()) {
        return Err(Error::arg("lr_flip must be > 0"));
    }
    check_inputs(features, p)?;
    let mut m = *model;
    let dist = |m: &FlipModel<T>, r: &Weights<T>| {
        let d: Vec<T> = m.omega.iter().zip(r).map(|(&a, &b)| a - b).collect();
        l2_norm(&d)
    };
    let mut losses = Vec::with_capacity(opts.steps + 1);
    let mut distances = Vec::new();
    losses.push(flip_loss(&m, features, p));
    if let Some(r) = &opts.reference {
        distances.push(dist(&m, r));
    }
    for _ in 0..opts.steps {
        let g = flip_loss_grad(&m, features, p);
        for (w, gi) in m.omega.iter_mut().zip(g) {
            *w = *w - opts.lr * gi;
        }
        m.project();
        losses.push(flip_loss(&m, features, p));
        if let Some(r) = &opts.reference {
            distances.push(dist(&m, r));
        }
    }
    if m.omega.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("flip model weights after fit".into()));
    }
    let trace = opts.reference.map(|_| ConvergenceTrace::from_distances(distances));
    Ok((m, FitReport { losses, trace }))
}
