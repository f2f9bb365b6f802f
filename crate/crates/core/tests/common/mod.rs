//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use fliplab::corruptor::reference_features;
use fliplab::features::{fit_scaler, FeatureVector, FEATURE_DIM, RAW_DIM};
use fliplab::flip_model::{flip_loss, flip_loss_grad, flip_loss_hessian, FlipModel};
use fliplab::{Dataset, FeatureSubset, FlipMode, Generator, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut m: [[f64; FEATURE_DIM]; FEATURE_DIM], mut b: [f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
    let n = FEATURE_DIM;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; FEATURE_DIM];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    x
}

/// Flip-model data with a known generator and the clean probabilities fixed at truth.
pub struct FlipProblem {
    pub features: Vec<FeatureVector<f64>>,
    /// Clean probability that the observed label is the preferred one.
    pub p: Vec<f64>,
    pub omega_star: [f64; FEATURE_DIM],
}

pub fn flip_problem(n: usize, omega_star: [f64; FEATURE_DIM], seed: u64) -> FlipProblem {
    let mut r = rng(seed);
    let truth = FlipModel::new(omega_star);
    let mut features = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: [f64; RAW_DIM] = std::array::from_fn(|_| normal(&mut r));
        let h = FeatureVector::from_raw(raw);
        let margin = r.random_range(0.02..0.3);
        let p_a = if r.random::<bool>() { margin } else { 1.0 - margin };
        let clean_a = r.random::<f64>() < p_a;
        let flipped = r.random::<f64>() < truth.epsilon(&h);
        let observed_a = clean_a != flipped;
        p.push(if observed_a { p_a } else { 1.0 - p_a });
        features.push(h);
    }
    FlipProblem { features, p, omega_star }
}

/// Exact minimizer of the empirical flip loss by damped Newton steps.
pub fn newton_minimizer(prob: &FlipProblem, start: [f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
    let mut m = FlipModel::new(start);
    for _ in 0..200 {
        let g = flip_loss_grad(&m, &prob.features, &prob.p);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-14 {
            break;
        }
        let step = solve(flip_loss_hessian(&m, &prob.features, &prob.p), g);
        let base = flip_loss(&m, &prob.features, &prob.p);
        let mut t = 1.0;
        loop {
            let cand = FlipModel::new(std::array::from_fn(|i| m.omega[i] - t * step[i]));
            if flip_loss(&cand, &prob.features, &prob.p) <= base || t < 1e-8 {
                m = cand;
                break;
            }
            t *= 0.5;
        }
    }
    m.omega
}

/// Bernoulli generator on the two length features with slope `k`, its bias
/// bisected so the mean flip probability on `clean` equals `target`.
pub fn sharp_length_generator(clean: &Dataset, world: &World, k: f64, target: f64) -> Generator {
    let raw = reference_features(&clean.triples, Some(world)).unwrap();
    let scaler = fit_scaler(&raw).unwrap();
    let mut gen = Generator {
        omega: [k, -k, 0.0, 0.0, 0.0, 0.0, 0.0],
        scaler,
        feature_subset: FeatureSubset::LengthOnly,
        tau: 0.8,
        mode: FlipMode::Bernoulli,
        fitted_ratio: 0.0,
        fit_steps: 0,
    };
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        gen.omega[FEATURE_DIM - 1] = mid;
        let eps = gen.epsilons(&clean.triples, Some(world)).unwrap();
        if eps.iter().sum::<f64>() / eps.len() as f64 > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    gen
}
