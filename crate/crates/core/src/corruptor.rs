//! Instance-dependent noise injection.
//!
//! A generator flip model is initialized at random, then trained so that the
//! fraction of triples with `eps >= tau` matches a target flip ratio. The
//! loss is the squared gap between the target and the flipped fraction, with
//! the indicator relaxed to `sigmoid((eps - tau) / temp)` so it has a
//! gradient. Every triple whose generator `eps` reaches `tau` is then flipped.
//!
//! Generator features are computed at the reference policy, since corruption
//! happens before any training.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CorruptionRecord, Dataset, PreferenceTriple};
use crate::error::{Error, Result};
use crate::features::{fit_scaler, reference_raw, FeatureScaler, FeatureVector, PolicyView, RawFeatures, BIAS, FEATURE_DIM, LEN_ABSDIFF, LEN_AVG};
use crate::flip_model::FlipModel;
use crate::policy::TabularPolicy;
use crate::scalar::sigmoid;
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    /// Only the two length coordinates (and the bias) may carry weight.
    LengthOnly,
    Full,
}

impl FeatureSubset {
    pub fn is_active(&self, coord: usize) -> bool {
        match self {
            FeatureSubset::Full => true,
            FeatureSubset::LengthOnly => matches!(coord, LEN_AVG | LEN_ABSDIFF | BIAS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// Flip iff `eps >= tau`.
    Threshold,
    /// Flip with probability `eps` (ablation mode).
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub tau: f64,
    pub flip_ratio_target: f64,
    pub feature_subset: FeatureSubset,
    pub seed: u64,
    pub surrogate_temp: f64,
    /// Standard deviation of the random initial generator weights.
    pub init_spread: f64,
    /// Accepted gap between realized and target flip ratio.
    pub tolerance: f64,
    pub max_steps: usize,
    /// Adam step size for the surrogate objective.
    pub lr: f64,
    pub mode: FlipMode,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            flip_ratio_target: 0.2,
            feature_subset: FeatureSubset::LengthOnly,
            seed: 0,
            surrogate_temp: 0.02,
            init_spread: 1.0,
            tolerance: 0.01,
            max_steps: 5000,
            lr: 0.05,
            mode: FlipMode::Threshold,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau > 0.5 && self.tau < 1.0) {
            problems.push(format!("tau must lie in (0.5, 1), got {}", self.tau));
        }
        if !(0.0..0.5).contains(&self.flip_ratio_target) {
            problems.push(format!("flip_ratio_target must lie in [0, 0.5), got {}", self.flip_ratio_target));
        }
        if !(self.surrogate_temp > 0.0) {
            problems.push("surrogate_temp must be > 0".to_string());
        }
        if !(self.init_spread >= 0.0) {
            problems.push("init_spread must be >= 0".to_string());
        }
        if !(self.tolerance > 0.0) {
            problems.push("tolerance must be > 0".to_string());
        }
        if !(self.lr > 0.0) {
            problems.push("generator lr must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::arg(problems.join("; ")))
        }
    }
}

/// A fitted noise generator together with the feature scaling it was fit under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub omega: [f64; FEATURE_DIM],
    pub scaler: FeatureScaler<f64>,
    pub feature_subset: FeatureSubset,
    pub tau: f64,
    pub mode: FlipMode,
    /// Realized flip ratio on the data the generator was fit on.
    pub fitted_ratio: f64,
    pub fit_steps: usize,
}

impl Generator {
    pub fn model(&self) -> FlipModel<f64> {
        FlipModel::new(self.omega)
    }

    pub fn epsilon_of(&self, raw: &RawFeatures<f64>) -> f64 {
        self.model().epsilon(&self.scaler.apply(raw))
    }

    pub fn epsilons(&self, triples: &[PreferenceTriple], world: Option<&World>) -> Result<Vec<f64>> {
        Ok(reference_features(triples, world)?
            .iter()
            .map(|r| self.epsilon_of(r))
            .collect())
    }

    /// Probability that the corruption process flipped a triple with generator output `eps`.
    pub fn flip_probability(&self, eps: f64) -> f64 {
        match self.mode {
            FlipMode::Threshold => {
                if eps >= self.tau {
                    1.0
                } else {
                    0.0
                }
            }
            FlipMode::Bernoulli => eps,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Raw features at the reference policy: stored log-probs when the triples
/// carry them, otherwise the world's reference policy.
pub fn reference_features(triples: &[PreferenceTriple], world: Option<&World>) -> Result<Vec<RawFeatures<f64>>> {
    match world {
        Some(w) if triples.iter().all(|t| t.logp_ref.is_none()) => {
            let reference = TabularPolicy::<f64>::reference(w);
            PolicyView::new(&reference, &reference, 1.0).raw_all(triples)
        }
        _ => triples.iter().map(reference_raw).collect(),
    }
}

fn hard_ratio(model: &FlipModel<f64>, feats: &[FeatureVector<f64>], tau: f64) -> f64 {
    let n = feats.iter().filter(|h| model.epsilon(h) >= tau).count();
    n as f64 / feats.len() as f64
}

fn ratio_reached(ratio: f64, cfg: &CorruptionConfig) -> bool {
    if cfg.flip_ratio_target == 0.0 {
        ratio == 0.0
    } else {
        (ratio - cfg.flip_ratio_target).abs() <= cfg.tolerance
    }
}

/// Trains a generator whose flipped fraction on `clean` matches the target ratio.
pub fn fit_generator(clean: &Dataset, world: Option<&World>, cfg: &CorruptionConfig) -> Result<Generator> {
    cfg.validate()?;
    if clean.len() < 2 {
        return Err(Error::arg("generator fitting needs at least 2 triples"));
    }
    let raw = reference_features(&clean.triples, world)?;
    let scaler = fit_scaler(&raw)?;
    let feats = scaler.apply_all(&raw);
    let active: Vec<bool> = (0..FEATURE_DIM).map(|i| cfg.feature_subset.is_active(i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, cfg.init_spread.max(f64::MIN_POSITIVE)).map_err(|e| Error::arg(e.to_string()))?;
    let mut omega = [0.0; FEATURE_DIM];
    for (w, &on) in omega.iter_mut().zip(&active) {
        let draw = init.sample(&mut rng);
        if on {
            *w = draw;
        }
    }

    let n = feats.len() as f64;
    let (tau, temp, target) = (cfg.tau, cfg.surrogate_temp, cfg.flip_ratio_target);
    let (b1, b2, adam_eps) = (0.9, 0.999, 1e-8);
    let mut m1 = [0.0; FEATURE_DIM];
    let mut m2 = [0.0; FEATURE_DIM];
    let mut ratio = hard_ratio(&FlipModel::new(omega), &feats, tau);

    for step in 0..cfg.max_steps {
        if ratio_reached(ratio, cfg) {
            return Ok(Generator {
                omega,
                scaler,
                feature_subset: cfg.feature_subset,
                tau,
                mode: cfg.mode,
                fitted_ratio: ratio,
                fit_steps: step,
            });
        }
        let model = FlipModel::new(omega);
        let mut soft = 0.0;
        let mut dsoft = [0.0; FEATURE_DIM];
        for h in &feats {
            let e = model.epsilon(h);
            let s = sigmoid((e - tau) / temp);
            soft += s;
            let k = s * (1.0 - s) / temp * e * (1.0 - e);
            for (d, &hi) in dsoft.iter_mut().zip(&h.0) {
                *d += k * hi;
            }
        }
        soft /= n;
        let gap = target - soft;
        let t = (step + 1) as i32;
        for i in 0..FEATURE_DIM {
            if !active[i] {
                continue;
            }
            let g = -2.0 * gap * dsoft[i] / n;
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let mh = m1[i] / (1.0 - b1.powi(t));
            let vh = m2[i] / (1.0 - b2.powi(t));
            omega[i] -= cfg.lr * mh / (vh.sqrt() + adam_eps);
        }
        ratio = hard_ratio(&FlipModel::new(omega), &feats, tau);
    }
    if ratio_reached(ratio, cfg) {
        return Ok(Generator {
            omega,
            scaler,
            feature_subset: cfg.feature_subset,
            tau,
            mode: cfg.mode,
            fitted_ratio: ratio,
            fit_steps: cfg.max_steps,
        });
    }
    Err(Error::GeneratorFit {
        achieved: ratio,
        target,
        tolerance: cfg.tolerance,
        steps: cfg.max_steps,
    })
}

/// Applies the generator to every triple, swapping the labels of flipped ones.
///
/// Already-corrupted input is refused: generator outputs are invariant to the
/// label order, so a second pass would flip the same triples back.
pub fn corrupt(clean: &Dataset, gen: &Generator, world: Option<&World>, seed: u64) -> Result<Dataset> {
    if clean.is_corrupted() {
        return Err(Error::AlreadyCorrupted);
    }
    let eps = gen.epsilons(&clean.triples, world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(clean.len());
    let mut records = Vec::with_capacity(clean.len());
    for (i, (t, &e)) in clean.triples.iter().zip(&eps).enumerate() {
        let flipped = match gen.mode {
            FlipMode::Threshold => e >= gen.tau,
            FlipMode::Bernoulli => rng.random::<f64>() < e,
        };
        triples.push(if flipped { t.swapped() } else { t.clone() });
        records.push(CorruptionRecord {
            triple_index: i,
            epsilon: e,
            flipped,
        });
    }
    Dataset::new(triples, clean.provenance).with_corruption(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{PPL_ABSDIFF, PPL_AVG, MARGIN_ABSDIFF, MARGIN_AVG};
    use crate::world::{make_world, sample_clean};

    fn setup(n: usize) -> (World, Dataset) {
        let w = make_world(40, 6, 1.0, 21).unwrap();
        let ds = sample_clean(&w, n, 22).unwrap();
        (w, ds)
    }

    #[test]
    fn zero_target_flips_nothing() {
        let (w, ds) = setup(2000);
        let cfg = CorruptionConfig {
            flip_ratio_target: 0.0,
            ..Default::default()
        };
        let gen = fit_generator(&ds, Some(&w), &cfg).unwrap();
        assert_eq!(gen.fitted_ratio, 0.0);
        let out = corrupt(&ds, &gen, Some(&w), 0).unwrap();
        assert_eq!(out.flip_ratio(), Some(0.0));
        assert_eq!(out.triples, ds.triples);
        assert!(out.corruption.unwrap().iter().all(|r| r.epsilon < 0.8));
    }

    #[test]
    fn length_only_generator_masks_other_weights() {
        let (w, ds) = setup(2000);
        let gen = fit_generator(&ds, Some(&w), &CorruptionConfig::default()).unwrap();
        for i in [PPL_AVG, PPL_ABSDIFF, MARGIN_AVG, MARGIN_ABSDIFF] {
            assert_eq!(gen.omega[i], 0.0);
        }
    }

    #[test]
    fn threshold_rule_decides_flips() {
        let (w, ds) = setup(3000);
        let gen = fit_generator(&ds, Some(&w), &CorruptionConfig::default()).unwrap();
        let out = corrupt(&ds, &gen, Some(&w), 0).unwrap();
        for ((c, o), r) in ds.triples.iter().zip(&out.triples).zip(out.corruption.as_ref().unwrap()) {
            assert_eq!(r.flipped, r.epsilon >= 0.8);
            if r.flipped {
                assert_eq!(*o, c.swapped());
            } else {
                assert_eq!(o, c);
            }
            assert_eq!(o.prompt_id, c.prompt_id);
        }
    }

    #[test]
    fn point_nine_flips_and_point_five_does_not() {
        let mut omega = [0.0; FEATURE_DIM];
        omega[BIAS] = 9.0_f64.ln();
        let mut gen = Generator {
            omega,
            scaler: FeatureScaler::identity(),
            feature_subset: FeatureSubset::LengthOnly,
            tau: 0.8,
            mode: FlipMode::Threshold,
            fitted_ratio: 1.0,
            fit_steps: 0,
        };
        let t = PreferenceTriple {
            logp_ref: Some((-1.0, -2.0)),
            ..PreferenceTriple::new(0, 0, 1, 10, 10)
        };
        // Bias-only generator ignores features; identity scaler keeps them raw.
        let clean = Dataset::new(vec![t.clone()], crate::dataset::Provenance::Ingested);
        let out = corrupt(&clean, &gen, None, 0).unwrap();
        let rec = out.corruption.as_ref().unwrap()[0];
        assert!((rec.epsilon - 0.9).abs() < 1e-12 && rec.flipped);
        assert_eq!(out.triples[0], t.swapped());

        gen.omega[BIAS] = 0.0;
        let out = corrupt(&clean, &gen, None, 0).unwrap();
        assert!(!out.corruption.as_ref().unwrap()[0].flipped);
        assert_eq!(out.triples[0], t);
    }

    #[test]
    fn double_corruption_is_refused() {
        let (w, ds) = setup(1000);
        let gen = fit_generator(&ds, Some(&w), &CorruptionConfig::default()).unwrap();
        let once = corrupt(&ds, &gen, Some(&w), 0).unwrap();
        assert!(matches!(corrupt(&once, &gen, Some(&w), 0), Err(Error::AlreadyCorrupted)));
        // Without the guard the same predicate fires again and undoes the flips.
        let stripped = Dataset::new(once.triples.clone(), once.provenance);
        let twice = corrupt(&stripped, &gen, Some(&w), 0).unwrap();
        assert_eq!(twice.triples, ds.triples);
    }

    #[test]
    fn bernoulli_mode_is_seeded() {
        let (w, ds) = setup(2000);
        let cfg = CorruptionConfig {
            mode: FlipMode::Bernoulli,
            ..Default::default()
        };
        let gen = fit_generator(&ds, Some(&w), &cfg).unwrap();
        let a = corrupt(&ds, &gen, Some(&w), 5).unwrap();
        assert_eq!(a, corrupt(&ds, &gen, Some(&w), 5).unwrap());
        let mean_eps: f64 = a.corruption.as_ref().unwrap().iter().map(|r| r.epsilon).sum::<f64>() / 2000.0;
        let ratio = a.flip_ratio().unwrap();
        assert!((ratio - mean_eps).abs() < 3.0 * (0.25 / 2000.0_f64).sqrt() + 1e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (w, ds) = setup(100);
        for cfg in [
            CorruptionConfig { tau: 0.4, ..Default::default() },
            CorruptionConfig { flip_ratio_target: 0.5, ..Default::default() },
            CorruptionConfig { surrogate_temp: 0.0, ..Default::default() },
        ] {
            assert!(fit_generator(&ds, Some(&w), &cfg).is_err());
        }
    }

    #[test]
    fn unreachable_target_reports_achieved_ratio() {
        let (w, ds) = setup(500);
        let cfg = CorruptionConfig {
            flip_ratio_target: 0.3,
            max_steps: 0,
            init_spread: 0.0,
            ..Default::default()
        };
        match fit_generator(&ds, Some(&w), &cfg) {
            Err(Error::GeneratorFit { achieved, target, .. }) => {
                assert_eq!(achieved, 0.0);
                assert_eq!(target, 0.3);
            }
            other => panic!("expected fit failure, got {other:?}"),
        }
    }
}
