//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{central_diff, flip_problem, newton_minimizer, normal, rel_err, rng, sharp_length_generator};
use fliplab::dataset::{read_lines, write_lines};
use fliplab::features::{FeatureScaler, PolicyView};
use fliplab::flip_model::{fit, flip_loss_grad, smoothness, FitOptions};
use fliplab::losses::{grad_policy_direction, loss, p_theta, zeta};
use fliplab::metrics::{flip_recovery, mean_abs_p_difference, qlinear_rate};
use fliplab::policy::{closed_form_policy, grad_log_prob, implicit_reward};
use fliplab::trainer::{fit_full_batch, FullBatchOptions};
use fliplab::{
    corrupt, fit_generator, make_world, sample_clean, CorruptionConfig, FlipModel, Generator, LossKind, PairEval, Policy,
    PreferenceTriple, TabularPolicy, World,
};
use fliplab_cli::commands::{build_world, corrupt_with, test_split, train_with, SweepRow};
use fliplab_cli::ExperimentConfig;
use rand::Rng;

type Check = Result<String, String>;

const GRAD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const CLOSED_FORM_TOL: f64 = 1e-10;
const FA_GAP_MAX: f64 = 0.02;
const DPO_GAP_FACTOR: f64 = 3.0;
const RATIO_TOL: f64 = 0.01;
const NOISE_SE: f64 = 3.0;
const CORR_MIN: f64 = 0.5;
const SEPARATION_Z: f64 = 3.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const OMEGA_STAR: [f64; 7] = [0.8, -0.6, 0.4, 0.0, 0.3, -0.2, -1.0];

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(start.elapsed() <= limit, format!("took {:.1?}, limit {limit:?}", start.elapsed()))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn row(x: &[f64]) -> TabularPolicy<f64> {
    TabularPolicy::from_rows(&[x.to_vec()]).unwrap()
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = r.random_range(2..9);
        let logits: Vec<f64> = (0..k).map(|_| normal(&mut r)).collect();
        let reference = row(&(0..k).map(|_| normal(&mut r)).collect::<Vec<_>>());
        let beta = r.random_range(0.1..2.0);
        let w = r.random_range(0..k);
        let l = (w + r.random_range(1..k)) % k;
        let eps_fixed = r.random_range(0.0..0.45);
        let eps = r.random_range(0.0..1.0);
        for kind in [LossKind::Dpo, LossKind::Cdpo { eps: eps_fixed }, LossKind::Rdpo { eps: eps_fixed }, LossKind::Fadpo] {
            let pol = row(&logits);
            let ev = p_theta(&pol, &reference, 0, w, l, beta).map_err(err)?.with_epsilon(eps);
            let gw = grad_log_prob(&pol, 0, w).map_err(err)?.values;
            let gl = grad_log_prob(&pol, 0, l).map_err(err)?.values;
            let analytic = grad_policy_direction(kind, &ev, &gw, &gl, beta).map_err(err)?;
            let fd = central_diff(
                |x| loss(kind, &p_theta(&row(x), &reference, 0, w, l, beta).unwrap().with_epsilon(eps)).unwrap(),
                &logits,
                FD_STEP,
            );
            worst = worst.max(rel_err(&analytic, &fd));
        }
    }
    ensure(worst <= GRAD_TOL, format!("worst relative error {worst:.2e}"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("worst relative error {worst:.2e} over 100 instances x 4 losses"))
}

fn zeta_endpoints() -> Check {
    let mut r = rng(2);
    for _ in 0..1000 {
        let ev = PairEval::from_scores(r.random_range(-8.0..8.0), r.random_range(-8.0..8.0));
        let dpo = zeta(LossKind::Dpo, &ev).map_err(err)?;
        ensure(zeta(LossKind::Fadpo, &ev.with_epsilon(0.0)).map_err(err)? == dpo, "eps=0 differs from DPO")?;
        ensure(zeta(LossKind::Fadpo, &ev.with_epsilon(0.5)).map_err(err)? == 0.0, "eps=0.5 is not zero")?;
    }
    let ev = PairEval::from_scores(9f64.ln(), 0.0);
    ensure((ev.p_theta - 0.9).abs() < 1e-15, "p_theta is not 0.9")?;
    let fa = zeta(LossKind::Fadpo, &ev.with_epsilon(0.6)).map_err(err)?;
    let dpo = zeta(LossKind::Dpo, &ev).map_err(err)?;
    ensure(fa.signum() != dpo.signum() && fa != 0.0, format!("zeta FA {fa} vs DPO {dpo}"))?;
    Ok(format!("endpoints exact on 1000 pairs; at eps=0.6, p=0.9 zeta FA {fa:.4} vs DPO {dpo:.4}"))
}

fn closed_form() -> Check {
    let world = make_world(50, 10, 2.0, 7).map_err(err)?;
    let beta = 0.5;
    let pol = closed_form_policy::<f64>(&world, &world.true_reward, beta).map_err(err)?;
    let reference = TabularPolicy::reference(&world);
    let mut worst = 0.0f64;
    for x in 0..world.n_prompts {
        let d: Vec<f64> = (0..world.n_responses)
            .map(|y| implicit_reward(&pol, &reference, x, y, beta).unwrap() - world.true_reward[x][y])
            .collect();
        worst = d.iter().fold(worst, |m, v| m.max((v - d[0]).abs()));
    }
    ensure(worst <= CLOSED_FORM_TOL, format!("max deviation {worst:.2e}"))?;
    Ok(format!("max deviation {worst:.2e} on a 50x10 world"))
}

fn consistency() -> Check {
    let start = Instant::now();
    let opts = FullBatchOptions { beta: 1.0, lr: None, max_iters: 100_000, grad_tol: 1e-9 };
    let mut lines = Vec::new();
    for seed in SEEDS {
        let world = make_world(200, 8, 2.0, seed).map_err(err)?;
        let clean = sample_clean(&world, 50_000, seed + 1).map_err(err)?;
        let test = sample_clean(&world, 5_000, seed + 2).map_err(err)?;
        let gen = sharp_length_generator(&clean, &world, 8.0, 0.3);
        let data = corrupt(&clean, &gen, Some(&world), seed + 3).map_err(err)?;
        let eps: Vec<f64> = data.corruption.as_ref().unwrap().iter().map(|c| gen.flip_probability(c.epsilon)).collect();
        let c = fit_full_batch::<f64>(&world, &clean, LossKind::Dpo, None, &opts).map_err(err)?;
        let f = fit_full_batch::<f64>(&world, &data, LossKind::Fadpo, Some(&eps), &opts).map_err(err)?;
        let d = fit_full_batch::<f64>(&world, &data, LossKind::Dpo, None, &opts).map_err(err)?;
        ensure(c.converged && f.converged && d.converged, format!("seed {seed}: a fit did not converge"))?;
        let reference = Policy::reference(&world);
        let fa = mean_abs_p_difference(&f.policy, &c.policy, &reference, &test, 1.0).map_err(err)?;
        let dpo = mean_abs_p_difference(&d.policy, &c.policy, &reference, &test, 1.0).map_err(err)?;
        let line = format!("seed {seed}: ratio {:.3} FA {fa:.4} DPO {dpo:.4}", data.flip_ratio().unwrap_or(0.0));
        ensure(fa < FA_GAP_MAX && dpo >= DPO_GAP_FACTOR * fa, line.clone())?;
        lines.push(line);
    }
    within(Duration::from_secs(600), start)?;
    Ok(lines.join("; "))
}

fn convergence() -> Check {
    let start = Instant::now();
    let prob = flip_problem(4000, OMEGA_STAR, 11);
    let opt = newton_minimizer(&prob, OMEGA_STAR);
    let gnorm = flip_loss_grad(&FlipModel::new(opt), &prob.features, &prob.p).iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure(gnorm < 1e-12, format!("Newton optimum gradient {gnorm:.1e}"))?;
    let l_hat = smoothness(&FlipModel::new(opt), &prob.features, &prob.p);
    let opts = FitOptions { lr: 1.0 / l_hat, steps: 300, reference: Some(opt) };
    let (_, report) = fit(&FlipModel::zeros(), &prob.features, &prob.p, &opts).map_err(err)?;
    let trace = report.trace.ok_or("no trace recorded")?;
    let worst = trace.terminal_ratios().iter().copied().fold(0.0, f64::max);
    ensure(worst < 1.0, format!("terminal ratio {worst}"))?;
    let rate = qlinear_rate(&trace).map_err(err)?;
    ensure(rate.contracting && rate.rate < 1.0, format!("rate {}", rate.rate))?;

    let fast = FitOptions { lr: 2.0 * (2.0 / l_hat), steps: 300, reference: Some(opt) };
    let flagged = match fit(&FlipModel::new(opt.map(|w| w + 0.01)), &prob.features, &prob.p, &fast) {
        Err(_) => true,
        Ok((_, r)) => !r.trace.and_then(|t| qlinear_rate(&t).ok()).is_some_and(|q| q.contracting),
    };
    ensure(flagged, "lr 4/L was not flagged")?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("rate {:.3}, worst terminal ratio {worst:.3}; lr 4/L flagged", rate.rate))
}

fn injection() -> Check {
    let world = make_world(100, 8, 2.0, 1).map_err(err)?;
    let clean = sample_clean(&world, 10_000, 2).map_err(err)?;
    let mut out = Vec::new();
    for eta in [0.1, 0.2, 0.3, 0.4] {
        let cfg = CorruptionConfig { flip_ratio_target: eta, seed: 3, ..Default::default() };
        ensure(cfg.tau == 0.8, "default tau is not 0.8")?;
        let gen = fit_generator(&clean, Some(&world), &cfg).map_err(err)?;
        let ratio = corrupt(&clean, &gen, Some(&world), 4).map_err(err)?.flip_ratio().unwrap_or(0.0);
        ensure((ratio - eta).abs() <= RATIO_TOL, format!("eta {eta}: realized {ratio:.4}"))?;
        out.push(format!("{eta}->{ratio:.4}"));
    }
    Ok(out.join(" "))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fliplab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), format!("fliplab {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn se(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64 / xs.len() as f64).sqrt()
}

fn table_trend() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    run_cli(dir.path(), &["sweep"])?;
    let cfg = ExperimentConfig::default();
    let rows: Vec<SweepRow> = csv::Reader::from_path(dir.path().join("sweep.csv"))
        .map_err(err)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let exp = &cfg.experiment;
    ensure(rows.len() == exp.etas.len() * exp.losses.len() * exp.seeds.len(), "sweep grid is incomplete")?;
    let acc = |eta: f64, loss: &str| -> Vec<f64> {
        exp.seeds
            .iter()
            .map(|&s| rows.iter().find(|r| r.eta == eta && r.loss == loss && r.seed == s).unwrap().acc)
            .collect()
    };
    let mut fails = Vec::new();
    for loss in &exp.losses {
        for w in exp.etas.windows(2) {
            let d: Vec<f64> = acc(w[1], loss).iter().zip(acc(w[0], loss)).map(|(b, a)| b - a).collect();
            if mean(&d) > NOISE_SE * se(&d) {
                fails.push(format!("(a) {loss} rises {:.3} from eta {} to {}", mean(&d), w[0], w[1]));
            }
        }
    }
    let drop = |loss: &str| -> Vec<f64> { acc(0.0, loss).iter().zip(acc(0.4, loss)).map(|(a, b)| a - b).collect() };
    let (fa, dpo) = (drop("fadpo"), drop("dpo"));
    for (i, (f, d)) in fa.iter().zip(&dpo).enumerate() {
        if f >= d {
            fails.push(format!("(b) seed {}: FA-DPO drop {f:.3} vs DPO drop {d:.3}", exp.seeds[i]));
        }
    }
    for eta in [0.3, 0.4] {
        let ours = mean(&acc(eta, "fadpo"));
        for base in exp.losses.iter().filter(|l| *l != "fadpo") {
            let theirs = mean(&acc(eta, base));
            if ours <= theirs {
                fails.push(format!("(c) eta {eta}: FA-DPO {ours:.3} vs {base} {theirs:.3}"));
            }
        }
    }
    let summary = format!(
        "mean acc at eta 0/0.4: FA-DPO {:.3}/{:.3}, DPO {:.3}/{:.3}; drops FA {:?} DPO {:?}",
        mean(&acc(0.0, "fadpo")),
        mean(&acc(0.4, "fadpo")),
        mean(&acc(0.0, "dpo")),
        mean(&acc(0.4, "dpo")),
        fa.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        dpo.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
    );
    if fails.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", fails.join("; ")))
    }
}

fn warmup_ablation() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.n_omega = 20;
    cfg.trainer.n_theta = 20;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let (world, clean) = build_world(&cfg, seed).map_err(err)?;
        let test = test_split(&cfg, &world, seed).map_err(err)?;
        let (_, data) = corrupt_with(&cfg, &world, &clean, seed, 0.2).map_err(err)?;
        let mut final_acc = [0.0; 2];
        for (i, on) in [true, false].into_iter().enumerate() {
            cfg.trainer.warmup = on;
            let report = train_with(&cfg, &world, &data, &test, seed, LossKind::Fadpo).map_err(err)?;
            final_acc[i] = report.history.last().ok_or("no evaluation")?.accuracy;
        }
        if final_acc[0] > final_acc[1] {
            wins += 1;
        }
        pairs.push(format!("{:.3}/{:.3}", final_acc[0], final_acc[1]));
    }
    let line = format!("warmup on/off {}; on wins {wins} of {}", pairs.join(" "), SEEDS.len());
    ensure(2 * wins > SEEDS.len(), line.clone())?;
    Ok(line)
}

fn flip_recovery_check() -> Check {
    let cfg = ExperimentConfig::default();
    let beta = cfg.trainer.beta;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (world, clean) = build_world(&cfg, seed).map_err(err)?;
        let test = test_split(&cfg, &world, seed).map_err(err)?;
        let (_, data) = corrupt_with(&cfg, &world, &clean, seed, 0.2).map_err(err)?;
        let report = train_with(&cfg, &world, &data, &test, seed, LossKind::Fadpo).map_err(err)?;
        let reference = Policy::reference(&world);
        let view = PolicyView::new(&report.policy, &reference, beta);
        let feats = report.scaler.apply_all(&view.raw_all(&data.triples).map_err(err)?);
        let rec = flip_recovery(&report.flip_model, &feats, &data).map_err(err)?;
        let line = format!("seed {seed}: corr {:.3} z {:.1}", rec.flip_corr, rec.separation_z);
        ensure(rec.flip_corr > CORR_MIN && rec.flip_separation > 0.0 && rec.separation_z >= SEPARATION_Z, line.clone())?;
        lines.push(line);

        if seed == SEEDS[0] {
            permutation_invariance(&world, &report.policy, &reference, beta)?;
        }
    }
    Ok(format!("{}; swap-invariant on 1000 triples", lines.join(", ")))
}

fn permutation_invariance(world: &World, policy: &Policy, reference: &Policy, beta: f64) -> Result<(), String> {
    let view = PolicyView::new(policy, reference, beta);
    let mut r = rng(9);
    for _ in 0..1000 {
        let x = r.random_range(0..world.n_prompts);
        let w = r.random_range(0..world.n_responses);
        let l = (w + r.random_range(1..world.n_responses)) % world.n_responses;
        let mut t = PreferenceTriple::new(x, w, l, world.response_len[x][w], world.response_len[x][l]);
        if r.random::<bool>() {
            t.logp_ref = Some((-r.random_range(0.1..50.0), -r.random_range(0.1..50.0)));
        }
        ensure(view.raw(&t).map_err(err)? == view.raw(&t.swapped()).map_err(err)?, format!("features differ on {t:?}"))?;
    }
    Ok(())
}

const SMALL: &str = "[world]\nn_prompts = 20\nn_responses = 4\nn_samples = 1500\nn_test = 300\n\n[trainer]\nn_outer = 4\nbatch_size = 256\neval_every = 2\n\n[experiment]\netas = [0.0, 0.3]\nlosses = [\"dpo\", \"cdpo\", \"rdpo\", \"fadpo\"]\nseeds = [0, 1]\n";

fn files(dir: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

fn reproducibility() -> Check {
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        let cfg = d.path().join("cfg.toml");
        fs::write(&cfg, SMALL).map_err(err)?;
        let cfg = cfg.to_str().unwrap();
        for cmd in ["generate", "corrupt", "train", "eval", "sweep"] {
            run_cli(d.path(), &[cmd, "--config", cfg, "--seed", "3", "--eta", "0.2"])?;
        }
    }
    let mut names = Vec::new();
    files(dirs[0].path(), dirs[0].path(), &mut names);
    let mut other = Vec::new();
    files(dirs[1].path(), dirs[1].path(), &mut other);
    names.sort();
    other.sort();
    ensure(names == other, "runs wrote different file sets")?;
    for n in &names {
        ensure(
            fs::read(dirs[0].path().join(n)).map_err(err)? == fs::read(dirs[1].path().join(n)).map_err(err)?,
            format!("{} differs between runs", n.display()),
        )?;
    }

    let d = dirs[0].path();
    let text = |name: &str| fs::read_to_string(d.join(name)).unwrap();
    for name in ["clean.jsonl", "corrupted.jsonl"] {
        let ds = read_lines(text(name).as_bytes()).map_err(err)?;
        let mut buf = Vec::new();
        write_lines(&ds, &mut buf).map_err(err)?;
        ensure(buf == text(name).into_bytes(), format!("{name} does not round-trip"))?;
    }
    let world = World::load(d.join("world.json")).map_err(err)?;
    world.save(d.join("world2.json")).map_err(err)?;
    ensure(text("world2.json") == text("world.json"), "world.json does not round-trip")?;
    let pol = Policy::load(d.join("policy.json")).map_err(err)?;
    ensure(pol.to_json().map_err(err)? == text("policy.json").trim_end(), "policy.json does not round-trip")?;
    let flip = FlipModel::<f64>::load(d.join("flip_model.json")).map_err(err)?;
    flip.save(d.join("flip2.json")).map_err(err)?;
    ensure(text("flip2.json") == text("flip_model.json"), "flip_model.json does not round-trip")?;
    let gen = Generator::load(d.join("generator.json")).map_err(err)?;
    gen.save(d.join("generator2.json")).map_err(err)?;
    ensure(text("generator2.json") == text("generator.json"), "generator.json does not round-trip")?;
    let scaler: FeatureScaler<f64> = serde_json::from_str(&text("scaler.json")).map_err(err)?;
    ensure(serde_json::from_str::<FeatureScaler<f64>>(&serde_json::to_string(&scaler).map_err(err)?).map_err(err)? == scaler, "scaler.json does not round-trip")?;
    let cfg: ExperimentConfig = toml::from_str(SMALL).map_err(err)?;
    ensure(toml::from_str::<ExperimentConfig>(&cfg.to_toml().map_err(err)?).map_err(err)? == cfg, "config does not round-trip")?;
    let rows: Vec<SweepRow> = csv::Reader::from_path(d.join("sweep.csv")).map_err(err)?.deserialize().collect::<Result<_, _>>().map_err(err)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(err)?;
    }
    ensure(w.into_inner().map_err(err)? == text("sweep.csv").into_bytes(), "sweep.csv does not round-trip")?;
    Ok(format!("{} files byte-identical across two runs; all formats round-trip", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", gradients),
        ("gradient-weight degeneracies", zeta_endpoints),
        ("closed-form reward oracle", closed_form),
        ("consistency with oracle flip rates", consistency),
        ("Q-linear flip-model convergence", convergence),
        ("noise-injection ratio", injection),
        ("accuracy trend across flip ratios", table_trend),
        ("warmup ablation", warmup_ablation),
        ("flip-model recovery", flip_recovery_check),
        ("reproducibility and round trips", reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
