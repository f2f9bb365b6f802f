//! Alternating training of the policy and the flip model.
//!
//! A warmup of plain DPO steps is followed by `n_outer` rounds. Each round
//! draws a batch from the corrupted data, takes `n_omega` flip-model steps
//! on it with `p_theta` and the features frozen at the round's policy, then
//! takes `n_theta` policy steps with the flip probabilities frozen at the
//! updated flip model.
//!
//! For a tabular policy the log-partition terms cancel in the margin, so
//! `dlog pi(y_w) - dlog pi(y_l)` is `e_w - e_l` and every pair touches two
//! logits.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PreferenceTriple};
use crate::error::{DivergenceSnapshot, Error, Result};
use crate::features::{coverage_lambda_min, fit_scaler, FeatureScaler, FeatureVector, PolicyView, FEATURE_DIM};
use crate::flip_model::{flip_loss, flip_loss_grad, FlipModel};
use crate::losses::{loss, zeta, LossKind, PairEval};
use crate::metrics::{accuracy, recovery_from_predictions, EvalRecord};
use crate::policy::TabularPolicy;
use crate::scalar::{sigmoid, Scalar};
use crate::world::World;

/// Floor keeping `p_theta` inside the open unit interval for the flip loss.
const P_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub warmup: bool,
    /// `None` means one pass over the data.
    pub warmup_steps: Option<usize>,
    pub n_outer: usize,
    pub n_omega: usize,
    pub n_theta: usize,
    pub batch_size: usize,
    /// Inner mini-batch size; `None` means `batch_size / 4`.
    pub minibatch_size: Option<usize>,
    pub lr_policy: f64,
    pub lr_flip: f64,
    pub beta: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub refit_scaler: bool,
    /// Initial flip-model weights.
    pub flip_init: [f64; FEATURE_DIM],
    pub flip_max_norm: Option<f64>,
    /// Evaluate every this many rounds; 0 evaluates once at the end.
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup: true,
            warmup_steps: None,
            n_outer: 200,
            n_omega: 20,
            n_theta: 20,
            batch_size: 1024,
            minibatch_size: None,
            lr_policy: 1000.0,
            lr_flip: 0.5,
            beta: 0.1,
            seed: 0,
            loss_kind: LossKind::Fadpo,
            refit_scaler: false,
            flip_init: [0.0; FEATURE_DIM],
            flip_max_norm: None,
            eval_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.minibatch_size == Some(0) {
            problems.push("minibatch_size must be >= 1".to_string());
        }
        for (name, v) in [("lr_policy", self.lr_policy), ("lr_flip", self.lr_flip), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(b) = self.flip_max_norm {
            if !(b > 0.0) {
                problems.push(format!("flip_max_norm must be > 0, got {b}"));
            }
        }
        if self.flip_init.iter().any(|w| !w.is_finite()) {
            problems.push("flip_init must be finite".to_string());
        }
        if let Err(e) = self.loss_kind.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::arg(problems.join("; ")))
        }
    }

    pub fn minibatch(&self) -> usize {
        self.minibatch_size.unwrap_or((self.batch_size / 4).max(1))
    }

    pub fn warmup_len(&self, n: usize) -> usize {
        if !self.warmup {
            return 0;
        }
        self.warmup_steps.unwrap_or_else(|| n.div_ceil(self.minibatch()))
    }

    /// Rounds after which an evaluation is recorded.
    pub fn eval_rounds(&self) -> Vec<usize> {
        if self.eval_every == 0 || self.n_outer == 0 {
            return vec![self.n_outer];
        }
        let mut out: Vec<usize> = (1..=self.n_outer).filter(|r| r % self.eval_every == 0).collect();
        if out.last() != Some(&self.n_outer) {
            out.push(self.n_outer);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Omega,
    Theta,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Omega => "omega",
            Phase::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub round: usize,
    pub phase: Phase,
    /// Mini-batch loss before the update.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<T> {
    pub steps: Vec<StepRecord>,
    /// Flip model at the end of every round.
    pub flip_snapshots: Vec<FlipModel<T>>,
    /// Policy at every evaluation point, paired with its round.
    pub policy_snapshots: Vec<(usize, TabularPolicy<T>)>,
    pub history: Vec<EvalRecord>,
    pub policy: TabularPolicy<T>,
    pub flip_model: FlipModel<T>,
    pub scaler: FeatureScaler<T>,
    /// Norm of the full-data objective gradient at the final parameters.
    pub final_grad_norm: f64,
}

impl<T: Scalar> TrainReport<T> {
    /// Step losses followed by evaluation rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "step,round,phase,loss,acc,flip_corr,flip_separation,flip_auc,coverage_lambda_min")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{},,,,,", s.step, s.round, s.phase.name(), s.loss)?;
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.history {
            writeln!(
                out,
                ",{},eval,,{},{},{},{},{}",
                e.round,
                e.accuracy,
                opt(e.flip_corr),
                opt(e.flip_separation),
                opt(e.flip_auc),
                opt(e.coverage_lambda_min)
            )?;
        }
        Ok(())
    }
}

/// Draws indices without replacement, reshuffling after each pass.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for component `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    stream_rng(seed, 1 << 32 | tag).random()
}

/// `p_theta` of a triple in its labeled order, via the logit margin.
pub fn pair_eval<T: Scalar>(policy: &TabularPolicy<T>, reference: &TabularPolicy<T>, t: &PreferenceTriple, beta: T) -> PairEval<T> {
    let (row, r0) = (policy.row(t.prompt_id), reference.row(t.prompt_id));
    let rw = beta * (row[t.chosen_id] - r0[t.chosen_id]);
    let rl = beta * (row[t.rejected_id] - r0[t.rejected_id]);
    PairEval {
        p_theta: sigmoid(rw - rl),
        rhat_w: rw,
        rhat_l: rl,
        epsilon: T::zero(),
    }
}

/// Mean loss over `idx` and its gradient with respect to the logits, as a
/// sparse list. `eps` is indexed by position within `idx`.
fn policy_objective<T: Scalar>(
    kind: LossKind,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    triples: &[PreferenceTriple],
    idx: &[usize],
    eps: &dyn Fn(usize) -> T,
    beta: T,
) -> Result<(T, Vec<(usize, T)>)> {
    let n_r = policy.n_responses();
    let scale = T::one() / T::of(idx.len().max(1) as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(2 * idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let t = &triples[i];
        let ev = pair_eval(policy, reference, t, beta).with_epsilon(eps(k));
        // Clamped logs would hide a NaN margin.
        if !(ev.rhat_w.is_finite() && ev.rhat_l.is_finite()) {
            return Ok((T::nan(), Vec::new()));
        }
        total = total + loss(kind, &ev)?;
        let g = zeta(kind, &ev)? * beta * scale;
        grad.push((t.prompt_id * n_r + t.chosen_id, -g));
        grad.push((t.prompt_id * n_r + t.rejected_id, g));
    }
    Ok((total * scale, grad))
}

fn snapshot<T: Scalar>(policy: &TabularPolicy<T>, flip: &FlipModel<T>) -> Box<DivergenceSnapshot> {
    Box::new(DivergenceSnapshot {
        logits: policy.logits().iter().map(|v| v.to_f64_lossy()).collect(),
        omega: flip.omega.iter().map(|v| v.to_f64_lossy()).collect(),
    })
}

/// Full-data objective gradient norm for `kind` with per-triple `eps`.
pub fn objective_grad_norm<T: Scalar>(
    kind: LossKind,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &Dataset,
    eps: &dyn Fn(usize) -> T,
    beta: T,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, sparse) = policy_objective(kind, policy, reference, &data.triples, &idx, eps, beta)?;
    let mut dense = vec![T::zero(); policy.logits().len()];
    for (k, g) in sparse {
        dense[k] = dense[k] + g;
    }
    Ok(dense.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullBatchOptions {
    pub beta: f64,
    /// Step size; `None` uses the inverse of a Gershgorin curvature bound.
    pub lr: Option<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FullBatchOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lr: None,
            max_iters: 20_000,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullBatchFit<T> {
    pub policy: TabularPolicy<T>,
    /// Objective gradient norm at `policy`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One distinct (prompt, chosen, rejected, eps) cell and its multiplicity.
struct Cell<T> {
    w: usize,
    l: usize,
    eps: T,
    weight: T,
}

fn aggregate<T: Scalar>(data: &Dataset, n_r: usize, eps: Option<&[f64]>) -> Vec<Cell<T>> {
    let mut counts: BTreeMap<(usize, usize, u64), usize> = BTreeMap::new();
    for (i, t) in data.triples.iter().enumerate() {
        let e = eps.map_or(0.0, |e| e[i]);
        *counts
            .entry((t.prompt_id * n_r + t.chosen_id, t.prompt_id * n_r + t.rejected_id, e.to_bits()))
            .or_default() += 1;
    }
    let n = data.len() as f64;
    counts
        .into_iter()
        .map(|((w, l, e), c)| Cell {
            w,
            l,
            eps: T::of(f64::from_bits(e)),
            weight: T::of(c as f64 / n),
        })
        .collect()
}

fn cells_objective<T: Scalar>(kind: LossKind, cells: &[Cell<T>], logits: &[T], r0: &[T], beta: T, grad: &mut [T]) -> Result<T> {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut total = T::zero();
    for c in cells {
        let m = beta * ((logits[c.w] - r0[c.w]) - (logits[c.l] - r0[c.l]));
        if !m.is_finite() {
            return Ok(T::nan());
        }
        let ev = PairEval {
            p_theta: sigmoid(m),
            rhat_w: m,
            rhat_l: T::zero(),
            epsilon: c.eps,
        };
        total = total + c.weight * loss(kind, &ev)?;
        let g = zeta(kind, &ev)? * beta * c.weight;
        grad[c.w] = grad[c.w] - g;
        grad[c.l] = grad[c.l] + g;
    }
    Ok(total)
}

/// Accelerated full-batch gradient descent from the reference policy, with
/// momentum restarts, until the objective gradient norm falls below
/// `grad_tol` or `max_iters` is reached. Identical triples are merged.
pub fn fit_full_batch<T: Scalar>(
    world: &World,
    data: &Dataset,
    kind: LossKind,
    eps: Option<&[f64]>,
    opts: &FullBatchOptions,
) -> Result<FullBatchFit<T>> {
    kind.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training data is empty"));
    }
    if !(opts.beta > 0.0) || opts.lr.is_some_and(|lr| !(lr > 0.0)) {
        return Err(Error::arg("beta and lr must be > 0"));
    }
    if let Some(e) = eps {
        if e.len() != data.len() {
            return Err(Error::Dimension { expected: data.len(), got: e.len() });
        }
    }
    let reference = TabularPolicy::<T>::reference(world);
    let n_r = reference.n_responses();
    let cells = aggregate::<T>(data, n_r, eps);
    let lr = match opts.lr {
        Some(lr) => lr,
        None => {
            let mut degree = vec![0.0; reference.logits().len()];
            for c in &cells {
                degree[c.w] += c.weight.to_f64_lossy();
                degree[c.l] += c.weight.to_f64_lossy();
            }
            let curvature = match kind {
                LossKind::Rdpo { eps } => 0.25 / (1.0 - 2.0 * eps),
                _ => 0.25,
            };
            let max_degree = degree.iter().cloned().fold(0.0, f64::max);
            1.0 / (2.0 * opts.beta * opts.beta * curvature * max_degree)
        }
    };
    let (beta, lr_t) = (T::of(opts.beta), T::of(lr));
    let r0 = reference.logits().to_vec();
    let mut x = r0.clone();
    let mut y = r0.clone();
    let mut grad = vec![T::zero(); x.len()];
    let mut k = 0usize;
    for it in 0..=opts.max_iters {
        let l = cells_objective(kind, &cells, &y, &r0, beta, &mut grad)?;
        if !l.is_finite() {
            let mut policy = reference.clone();
            policy.logits_mut().copy_from_slice(&y);
            return Err(Error::Diverged {
                step: it,
                phase: "full_batch",
                loss: l.to_f64_lossy(),
                snapshot: snapshot(&policy, &FlipModel::zeros()),
            });
        }
        let norm = grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if norm <= opts.grad_tol || it == opts.max_iters {
            let mut policy = reference.clone();
            policy.logits_mut().copy_from_slice(&y);
            return Ok(FullBatchFit {
                policy,
                grad_norm: norm,
                iterations: it,
                converged: norm <= opts.grad_tol,
            });
        }
        let x_next: Vec<T> = y.iter().zip(&grad).map(|(&v, &g)| v - lr_t * g).collect();
        let uphill: T = grad.iter().zip(x_next.iter().zip(&x)).map(|(&g, (&a, &b))| g * (a - b)).sum();
        if uphill > T::zero() {
            k = 0;
        }
        let mom = T::of(k as f64 / (k as f64 + 3.0));
        y = x_next.iter().zip(&x).map(|(&a, &b)| a + mom * (a - b)).collect();
        x = x_next;
        k += 1;
    }
    unreachable!("loop returns on its last iteration")
}

/// Runs the alternating schedule on a corrupted (or clean) dataset.
pub struct Trainer<'a, T: Scalar> {
    world: &'a World,
    data: &'a Dataset,
    sched: TrainSchedule,
    oracle_eps: Option<Vec<T>>,
    test: Option<&'a Dataset>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(world: &'a World, data: &'a Dataset, sched: TrainSchedule) -> Self {
        Self { world, data, sched, oracle_eps: None, test: None }
    }

    /// Replaces the learned flip model with fixed per-triple flip probabilities.
    pub fn with_oracle_epsilon(mut self, eps: &[f64]) -> Self {
        self.oracle_eps = Some(eps.iter().map(|&e| T::of(e)).collect());
        self
    }

    /// Clean test set used at every evaluation point.
    pub fn with_test_set(mut self, test: &'a Dataset) -> Self {
        self.test = Some(test);
        self
    }

    fn check(&self) -> Result<()> {
        self.sched.validate()?;
        if self.data.is_empty() {
            return Err(Error::arg("training data is empty"));
        }
        for t in &self.data.triples {
            self.world.check_index(t.prompt_id, t.chosen_id)?;
            self.world.check_index(t.prompt_id, t.rejected_id)?;
        }
        if let Some(e) = &self.oracle_eps {
            if e.len() != self.data.len() {
                return Err(Error::Dimension { expected: self.data.len(), got: e.len() });
            }
        }
        if let Some(test) = self.test {
            if test.is_corrupted() {
                return Err(Error::arg("test set must be clean"));
            }
        }
        Ok(())
    }

    fn features(
        &self,
        policy: &TabularPolicy<T>,
        reference: &TabularPolicy<T>,
        scaler: &FeatureScaler<T>,
        idx: &[usize],
    ) -> Result<Vec<FeatureVector<T>>> {
        let view = PolicyView::new(policy, reference, T::of(self.sched.beta));
        idx.iter().map(|&i| Ok(scaler.apply(&view.raw(&self.data.triples[i])?))).collect()
    }

    fn fit_scaler_at(&self, policy: &TabularPolicy<T>, reference: &TabularPolicy<T>) -> Result<FeatureScaler<T>> {
        if self.data.len() < 2 {
            return Ok(FeatureScaler::identity());
        }
        let view = PolicyView::new(policy, reference, T::of(self.sched.beta));
        fit_scaler(&view.raw_all(&self.data.triples)?)
    }

    pub fn evaluate_round(
        &self,
        round: usize,
        policy: &TabularPolicy<T>,
        reference: &TabularPolicy<T>,
        flip: &FlipModel<T>,
        scaler: &FeatureScaler<T>,
        test: &Dataset,
    ) -> Result<EvalRecord> {
        let acc = accuracy(policy, reference, test, T::of(self.sched.beta))?;
        let all: Vec<usize> = (0..self.data.len()).collect();
        let feats = self.features(policy, reference, scaler, &all)?;
        let coverage = coverage_lambda_min(&feats).ok();
        let (mut corr, mut sep, mut auc) = (None, None, None);
        if let (Some(recs), true) = (&self.data.corruption, self.sched.loss_kind.uses_flip_model()) {
            let pred: Vec<f64> = match &self.oracle_eps {
                Some(e) => e.iter().map(|v| v.to_f64_lossy()).collect(),
                None => feats.iter().map(|h| flip.epsilon(h).to_f64_lossy()).collect(),
            };
            let rec = recovery_from_predictions(&pred, recs.iter().map(|r| (r.epsilon, r.flipped)));
            corr = Some(rec.flip_corr);
            sep = Some(rec.flip_separation);
            auc = rec.flip_auc;
        }
        Ok(EvalRecord {
            round,
            accuracy: acc,
            flip_corr: corr,
            flip_separation: sep,
            flip_auc: auc,
            coverage_lambda_min: coverage,
            consistency_gap: None,
        })
    }

    pub fn run(&self) -> Result<TrainReport<T>> {
        self.check()?;
        let s = &self.sched;
        let kind = s.loss_kind;
        let learn_flip = kind.uses_flip_model() && self.oracle_eps.is_none();
        let (beta, lr_p, lr_f) = (T::of(s.beta), T::of(s.lr_policy), T::of(s.lr_flip));
        let triples = &self.data.triples;
        let reference = TabularPolicy::<T>::reference(self.world);
        let mut policy = reference.clone();
        let mut flip = FlipModel::new(s.flip_init.map(T::of));
        if let Some(b) = s.flip_max_norm {
            flip = flip.with_max_norm(T::of(b));
        }
        flip.project();

        let mut outer = EpochSampler::new(self.data.len(), stream_rng(s.seed, 0));
        let mut omega_rng = stream_rng(s.seed, 1);
        let mut theta_rng = stream_rng(s.seed, 2);
        let mb = s.minibatch();
        let mut steps = Vec::new();
        let mut step = 0usize;

        let apply = |policy: &mut TabularPolicy<T>, grad: Vec<(usize, T)>| {
            let logits = policy.logits_mut();
            for (k, g) in grad {
                logits[k] = logits[k] - lr_p * g;
            }
        };
        let diverged = |step: usize, phase: Phase, l: T, p: &TabularPolicy<T>, f: &FlipModel<T>| Error::Diverged {
            step,
            phase: phase.name(),
            loss: l.to_f64_lossy(),
            snapshot: snapshot(p, f),
        };

        let warm_kind = if kind.uses_flip_model() { LossKind::Dpo } else { kind };
        for _ in 0..s.warmup_len(self.data.len()) {
            let idx = outer.next_batch(mb);
            let (l, g) = policy_objective(warm_kind, &policy, &reference, triples, &idx, &|_| T::zero(), beta)?;
            if !l.is_finite() {
                return Err(diverged(step, Phase::Warmup, l, &policy, &flip));
            }
            steps.push(StepRecord { step, round: 0, phase: Phase::Warmup, loss: l.to_f64_lossy() });
            apply(&mut policy, g);
            step += 1;
        }

        let mut scaler = if learn_flip { self.fit_scaler_at(&policy, &reference)? } else { FeatureScaler::identity() };
        let eval_rounds = s.eval_rounds();
        let mut history = Vec::new();
        let mut policy_snapshots = Vec::new();
        let mut flip_snapshots = Vec::with_capacity(s.n_outer);
        let mut evaluate = |round: usize, policy: &TabularPolicy<T>, flip: &FlipModel<T>, scaler: &FeatureScaler<T>| -> Result<()> {
            if let Some(test) = self.test {
                history.push(self.evaluate_round(round, policy, &reference, flip, scaler, test)?);
            }
            policy_snapshots.push((round, policy.clone()));
            Ok(())
        };
        if s.n_outer == 0 {
            evaluate(0, &policy, &flip, &scaler)?;
        }

        for round in 1..=s.n_outer {
            let batch = outer.next_batch(s.batch_size);
            let inner = mb.min(batch.len());

            if learn_flip {
                if s.refit_scaler {
                    scaler = self.fit_scaler_at(&policy, &reference)?;
                }
                let feats = self.features(&policy, &reference, &scaler, &batch)?;
                let lo = T::of(P_CLAMP);
                let p: Vec<T> = batch
                    .iter()
                    .map(|&i| pair_eval(&policy, &reference, &triples[i], beta).p_theta.max(lo).min(T::one() - lo))
                    .collect();
                let mut sampler = EpochSampler::new(batch.len(), ChaCha8Rng::seed_from_u64(omega_rng.random()));
                for _ in 0..s.n_omega {
                    let pos = sampler.next_batch(inner);
                    let f: Vec<FeatureVector<T>> = pos.iter().map(|&j| feats[j]).collect();
                    let pp: Vec<T> = pos.iter().map(|&j| p[j]).collect();
                    let l = flip_loss(&flip, &f, &pp);
                    if !l.is_finite() {
                        return Err(diverged(step, Phase::Omega, l, &policy, &flip));
                    }
                    steps.push(StepRecord { step, round, phase: Phase::Omega, loss: l.to_f64_lossy() });
                    let g = flip_loss_grad(&flip, &f, &pp);
                    for (w, gi) in flip.omega.iter_mut().zip(g) {
                        *w = *w - lr_f * gi;
                    }
                    flip.project();
                    step += 1;
                }
            }

            let eps: Vec<T> = match (&self.oracle_eps, learn_flip) {
                (Some(e), _) => batch.iter().map(|&i| e[i]).collect(),
                (None, true) => {
                    let feats = self.features(&policy, &reference, &scaler, &batch)?;
                    feats.iter().map(|h| flip.epsilon(h)).collect()
                }
                (None, false) => vec![T::zero(); batch.len()],
            };
            let mut sampler = EpochSampler::new(batch.len(), ChaCha8Rng::seed_from_u64(theta_rng.random()));
            for _ in 0..s.n_theta {
                let pos = sampler.next_batch(inner);
                let idx: Vec<usize> = pos.iter().map(|&j| batch[j]).collect();
                let eps_of = |k: usize| eps[pos[k]];
                let (l, g) = policy_objective(kind, &policy, &reference, triples, &idx, &eps_of, beta)?;
                if !l.is_finite() {
                    return Err(diverged(step, Phase::Theta, l, &policy, &flip));
                }
                steps.push(StepRecord { step, round, phase: Phase::Theta, loss: l.to_f64_lossy() });
                apply(&mut policy, g);
                step += 1;
            }

            flip_snapshots.push(flip);
            if eval_rounds.contains(&round) {
                evaluate(round, &policy, &flip, &scaler)?;
            }
        }

        let final_eps: Vec<T> = match (&self.oracle_eps, learn_flip) {
            (Some(e), _) => e.clone(),
            (None, true) => {
                let all: Vec<usize> = (0..self.data.len()).collect();
                self.features(&policy, &reference, &scaler, &all)?.iter().map(|h| flip.epsilon(h)).collect()
            }
            (None, false) => vec![T::zero(); self.data.len()],
        };
        let final_grad_norm = objective_grad_norm(kind, &policy, &reference, self.data, &|i| final_eps[i], beta)?;
        Ok(TrainReport {
            steps,
            flip_snapshots,
            policy_snapshots,
            history,
            policy,
            flip_model: flip,
            scaler,
            final_grad_norm,
        })
    }
}
