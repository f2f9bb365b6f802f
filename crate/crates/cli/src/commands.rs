//! The five subcommands. Each reads its inputs from the run directory and
//! writes its outputs next to them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fliplab::corruptor::reference_features;
use fliplab::features::{FeatureScaler, PolicyView, LEN_ABSDIFF, LEN_AVG};
use fliplab::metrics::{accuracy, flip_recovery, mean_abs_p_difference, EvalRecord};
use fliplab::trainer::{derive_seed, fit_full_batch, FullBatchOptions};
use fliplab::world::make_world_with;
use fliplab::{
    corrupt, fit_generator, read_jsonl, sample_clean, write_jsonl, Dataset, FlipModel, Generator, LossKind, Policy, Report, Trainer,
    World,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{tag, ExperimentConfig};

pub const WORLD: &str = "world.json";
pub const CLEAN: &str = "clean.jsonl";
pub const CORRUPTED: &str = "corrupted.jsonl";
pub const GENERATOR: &str = "generator.json";
pub const REPORT: &str = "report.csv";
pub const POLICY: &str = "policy.json";
pub const FLIP_MODEL: &str = "flip_model.json";
pub const SCALER: &str = "scaler.json";
pub const EVAL: &str = "eval.csv";
pub const SWEEP: &str = "sweep.csv";

/// Gradient-norm threshold for the clean-data reference optimum.
const CLEAN_OPT_TOL: f64 = 1e-9;
const CLEAN_OPT_ITERS: usize = 100_000;

fn input(dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        bail!("missing input file {} (produced by `fliplab {producer}`)", path.display());
    }
    Ok(path)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_csv_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_world(dir: &Path) -> Result<World> {
    Ok(World::load(input(dir, WORLD, "generate")?)?)
}

fn load_dataset(dir: &Path, name: &str, producer: &str) -> Result<Dataset> {
    Ok(read_jsonl(input(dir, name, producer)?)?)
}

/// Clean test split, sampled from the world with its own derived seed.
pub fn test_split(cfg: &ExperimentConfig, world: &World, seed: u64) -> Result<Dataset> {
    Ok(sample_clean(world, cfg.world.n_test, derive_seed(seed, tag::TEST))?)
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<(World, Dataset)> {
    let world = make_world_with(&cfg.world_config(seed))?;
    let clean = sample_clean(&world, cfg.world.n_samples, derive_seed(seed, tag::CLEAN))?;
    Ok((world, clean))
}

pub fn cmd_generate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (world, clean) = build_world(cfg, cfg.seed)?;
    world.save(dir.join(WORLD))?;
    write_jsonl(&clean, dir.join(CLEAN))?;
    let back = read_jsonl(dir.join(CLEAN))?;
    if back != clean {
        bail!("{} did not read back identically", dir.join(CLEAN).display());
    }
    println!(
        "generated world {}x{} and {} clean triples in {}",
        world.n_prompts,
        world.n_responses,
        clean.len(),
        dir.display()
    );
    Ok(())
}

pub fn corrupt_with(cfg: &ExperimentConfig, world: &World, clean: &Dataset, seed: u64, eta: f64) -> Result<(Generator, Dataset)> {
    let ccfg = cfg.corruption_config(seed, eta);
    let gen = fit_generator(clean, Some(world), &ccfg)?;
    let data = corrupt(clean, &gen, Some(world), derive_seed(seed, tag::CORRUPT))?;
    Ok((gen, data))
}

pub fn cmd_corrupt(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let world = load_world(dir)?;
    let clean = load_dataset(dir, CLEAN, "generate")?;
    let (gen, data) = corrupt_with(cfg, &world, &clean, cfg.seed, cfg.corruption.eta)?;
    write_jsonl(&data, dir.join(CORRUPTED))?;
    gen.save(dir.join(GENERATOR))?;
    if read_jsonl(dir.join(CORRUPTED))? != data {
        bail!("{} did not read back identically", dir.join(CORRUPTED).display());
    }
    let flipped = data.corruption.as_ref().map_or(0, |r| r.iter().filter(|c| c.flipped).count());
    println!(
        "realized flip ratio {:.4} (target {}, tau {}): {} of {} triples flipped",
        data.flip_ratio().unwrap_or(0.0),
        cfg.corruption.eta,
        gen.tau,
        flipped,
        data.len()
    );
    Ok(())
}

pub fn train_with(cfg: &ExperimentConfig, world: &World, data: &Dataset, test: &Dataset, seed: u64, loss: LossKind) -> Result<Report> {
    let sched = cfg.schedule(seed, loss);
    Ok(Trainer::<f64>::new(world, data, sched).with_test_set(test).run()?)
}

#[derive(Serialize)]
struct FlipRow {
    triple_index: usize,
    len_avg: f64,
    len_absdiff: f64,
    true_eps: f64,
    pred_eps: f64,
    flipped: bool,
}

/// Per-triple learned vs generator flip probabilities.
fn flip_rows(cfg: &ExperimentConfig, world: &World, data: &Dataset, report: &Report) -> Result<Vec<FlipRow>> {
    let Some(recs) = &data.corruption else {
        return Ok(Vec::new());
    };
    let reference = Policy::reference(world);
    let view = PolicyView::new(&report.policy, &reference, cfg.trainer.beta);
    let raw = view.raw_all(&data.triples)?;
    let lengths = reference_features(&data.triples, Some(world))?;
    Ok(recs
        .iter()
        .zip(&raw)
        .zip(&lengths)
        .map(|((r, x), l)| FlipRow {
            triple_index: r.triple_index,
            len_avg: l[LEN_AVG],
            len_absdiff: l[LEN_ABSDIFF],
            true_eps: r.epsilon,
            pred_eps: report.flip_model.epsilon(&report.scaler.apply(x)),
            flipped: r.flipped,
        })
        .collect())
}

fn write_flip_tables(dir: &Path, rows: &[FlipRow]) -> Result<()> {
    let mut a = csv::Writer::from_writer(create(&dir.join("fig2a.csv"))?);
    a.write_record(["true_eps", "pred_eps"])?;
    let mut b = csv::Writer::from_writer(create(&dir.join("fig2b.csv"))?);
    b.write_record(["flipped", "pred_eps"])?;
    for r in rows {
        a.write_record([r.true_eps.to_string(), r.pred_eps.to_string()])?;
        b.write_record([r.flipped.to_string(), r.pred_eps.to_string()])?;
    }
    a.flush()?;
    b.flush()?;
    write_csv_rows(&dir.join("fig2c.csv"), rows)
}

fn write_train_outputs(cfg: &ExperimentConfig, dir: &Path, world: &World, data: &Dataset, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = create(&dir.join(REPORT))?;
    report.write_csv(&mut out)?;
    out.flush()?;
    report.policy.save(dir.join(POLICY))?;
    report.flip_model.save(dir.join(FLIP_MODEL))?;
    fs::write(dir.join(SCALER), serde_json::to_string(&report.scaler)? + "\n")?;
    if cfg.trainer.eval_every > 0 {
        let snaps = dir.join("snapshots");
        fs::create_dir_all(&snaps)?;
        for (round, policy) in &report.policy_snapshots {
            policy.save(snaps.join(format!("round_{round:05}_policy.json")))?;
            if let Some(f) = round.checked_sub(1).and_then(|r| report.flip_snapshots.get(r)) {
                f.save(snaps.join(format!("round_{round:05}_flip_model.json")))?;
            }
        }
    }
    if report.flip_model != FlipModel::zeros() || cfg.loss_kind(&cfg.trainer.loss)?.uses_flip_model() {
        write_flip_tables(dir, &flip_rows(cfg, world, data, report)?)?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let world = load_world(dir)?;
    let data = load_dataset(dir, CORRUPTED, "corrupt")?;
    let test = test_split(cfg, &world, cfg.seed)?;
    let loss = cfg.loss_kind(&cfg.trainer.loss)?;
    let report = train_with(cfg, &world, &data, &test, cfg.seed, loss)?;
    write_train_outputs(cfg, dir, &world, &data, &report)?;
    let last = report.history.last();
    println!(
        "trained {loss} for {} steps: test accuracy {:.4}, final gradient norm {:.3e}",
        report.steps.len(),
        last.map_or(f64::NAN, |h| h.accuracy),
        report.final_grad_norm
    );
    Ok(())
}

/// Clean-data DPO optimum used as the consistency reference.
pub fn clean_optimum(cfg: &ExperimentConfig, world: &World, clean: &Dataset) -> Result<Policy> {
    let opts = FullBatchOptions {
        beta: cfg.trainer.beta,
        lr: None,
        max_iters: CLEAN_OPT_ITERS,
        grad_tol: CLEAN_OPT_TOL,
    };
    Ok(fit_full_batch::<f64>(world, clean, LossKind::Dpo, None, &opts)?.policy)
}

#[derive(Serialize)]
struct EvalRow {
    accuracy: f64,
    flip_corr: Option<f64>,
    flip_separation: Option<f64>,
    coverage_lambda_min: Option<f64>,
    consistency_gap: Option<f64>,
}

impl From<EvalRecord> for EvalRow {
    fn from(e: EvalRecord) -> Self {
        Self {
            accuracy: e.accuracy,
            flip_corr: e.flip_corr,
            flip_separation: e.flip_separation,
            coverage_lambda_min: e.coverage_lambda_min,
            consistency_gap: e.consistency_gap,
        }
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let world = load_world(dir)?;
    let policy = Policy::load(input(dir, POLICY, "train")?)?;
    let test = test_split(cfg, &world, cfg.seed)?;
    let reference = Policy::reference(&world);
    let beta = cfg.trainer.beta;
    let mut rec = EvalRecord {
        round: 0,
        accuracy: accuracy(&policy, &reference, &test, beta)?,
        flip_corr: None,
        flip_separation: None,
        flip_auc: None,
        coverage_lambda_min: None,
        consistency_gap: None,
    };
    let corrupted = dir.join(CORRUPTED);
    if corrupted.is_file() {
        let data = read_jsonl(&corrupted)?;
        let scaler: FeatureScaler<f64> = match fs::read_to_string(dir.join(SCALER)) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => FeatureScaler::identity(),
        };
        let feats = scaler.apply_all(&PolicyView::new(&policy, &reference, beta).raw_all(&data.triples)?);
        rec.coverage_lambda_min = fliplab::features::coverage_lambda_min(&feats).ok();
        let flip_path = dir.join(FLIP_MODEL);
        if flip_path.is_file() && data.is_corrupted() {
            let flip = FlipModel::<f64>::load(&flip_path)?;
            let r = flip_recovery(&flip, &feats, &data)?;
            rec.flip_corr = Some(r.flip_corr);
            rec.flip_separation = Some(r.flip_separation);
            rec.flip_auc = r.flip_auc;
        }
    }
    let clean = dir.join(CLEAN);
    if clean.is_file() {
        let opt = clean_optimum(cfg, &world, &read_jsonl(&clean)?)?;
        rec.consistency_gap = Some(mean_abs_p_difference(&policy, &opt, &reference, &test, beta)?);
    }
    let acc = rec.accuracy;
    write_csv_rows(&dir.join(EVAL), &[EvalRow::from(rec)])?;
    println!("test accuracy {acc:.4} on {} clean pairs", test.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub loss: String,
    pub seed: u64,
    pub acc: f64,
    pub flip_corr: Option<f64>,
    pub consistency_gap: f64,
}

fn cell_dir(out: &Path, eta: f64, loss: &str, seed: u64) -> PathBuf {
    out.join("cells").join(format!("eta{eta}_{loss}_seed{seed}"))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let exp = &cfg.experiment;
    let losses: Vec<(String, LossKind)> = exp
        .losses
        .iter()
        .map(|l| Ok((l.clone(), cfg.loss_kind(l)?)))
        .collect::<Result<_>>()?;

    let per_seed: Vec<Vec<SweepRow>> = exp
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<SweepRow>> {
            let (world, clean) = build_world(cfg, seed)?;
            let test = test_split(cfg, &world, seed)?;
            let reference = Policy::reference(&world);
            let opt = clean_optimum(cfg, &world, &clean)?;
            let cells: Vec<(f64, &(String, LossKind))> =
                exp.etas.iter().flat_map(|&eta| losses.iter().map(move |l| (eta, l))).collect();
            let datasets: Vec<(Generator, Dataset)> = exp
                .etas
                .par_iter()
                .map(|&eta| corrupt_with(cfg, &world, &clean, seed, eta))
                .collect::<Result<_>>()?;
            cells
                .par_iter()
                .map(|&(eta, (name, kind))| {
                    let i = exp.etas.iter().position(|&e| e == eta).unwrap_or(0);
                    let data = &datasets[i].1;
                    let report = train_with(cfg, &world, data, &test, seed, *kind)?;
                    write_train_outputs(cfg, &cell_dir(dir, eta, name, seed), &world, data, &report)?;
                    let last = report.history.last().context("training recorded no evaluation")?;
                    Ok(SweepRow {
                        eta,
                        loss: name.clone(),
                        seed,
                        acc: last.accuracy,
                        flip_corr: last.flip_corr,
                        consistency_gap: mean_abs_p_difference(&report.policy, &opt, &reference, &test, cfg.trainer.beta)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<SweepRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.eta
            .total_cmp(&b.eta)
            .then_with(|| exp.losses.iter().position(|l| *l == a.loss).cmp(&exp.losses.iter().position(|l| *l == b.loss)))
            .then(a.seed.cmp(&b.seed))
    });
    write_csv_rows(&dir.join(SWEEP), &rows)?;
    println!("sweep wrote {} rows to {}", rows.len(), dir.join(SWEEP).display());
    Ok(())
}
