//! Acceptance gate. One sequential test prints a PASS/FAIL line per
//! criterion with its runtime budget, then fails if any criterion failed.
//!
//! Run with `cargo test -p entroshape-cli --test acceptance -- --nocapture`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use entroshape::analysis::{coupling_ratio, msr_identity_check, taylor_potential, TaskPartition};
use entroshape::gradients::{
    default_bulk, finite_difference_oracle, influence_curve, relative_error, tmee_gradient, weighted_tmee_gradient,
    DEFAULT_FD_STEP, INFLUENCE_BULK_SEED,
};
use entroshape::kernel::{information_potential, ErrorSet};
use entroshape::losses::{tmee_loss, weighted_tmee_loss, LossConfig, Variant};
use entroshape::trainer::{read_summary, run_imbalance_sweep, run_noise_bench, ImbalanceConfig, NoiseBenchConfig};
use entroshape_cli::{run, Cli};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

const SIGMAS: [f64; 3] = [0.5, 1.0, 2.0];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> ErrorSet {
    let data = (0..n * dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ErrorSet::from_flat(data, dim).unwrap()
}

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("entroshape").chain(args.iter().copied())).unwrap()
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=64);
        let dim = rng.random_range(1..=8);
        let sigma = SIGMAS[rng.random_range(0..3)];
        let e = random_set(&mut rng, n, dim, 0.5 * sigma);
        let g = tmee_gradient(&e, sigma).unwrap();
        let fd = finite_difference_oracle(|x| tmee_loss(x, sigma), &e, DEFAULT_FD_STEP).unwrap();
        worst = worst.max(relative_error(g.as_flat(), fd.as_flat()));
    }
    verdict(
        worst <= 1e-6,
        format!("worst relative error {worst:.2e} over 100 instances (limit 1e-6)"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 2];
    for (slot, variant) in [Variant::CwTmee, Variant::EwTmee].into_iter().enumerate() {
        for _ in 0..100 {
            let n = rng.random_range(2..=16);
            let dim = rng.random_range(1..=4);
            let sigma = SIGMAS[rng.random_range(0..3)];
            let cfg = LossConfig {
                sigma,
                sigma_w: sigma,
                variant,
                ..LossConfig::default()
            };
            let e = random_set(&mut rng, n, dim, 0.5 * sigma);
            let g = weighted_tmee_gradient(&e, &cfg).unwrap();
            let fd = finite_difference_oracle(|x| weighted_tmee_loss(x, &cfg), &e, DEFAULT_FD_STEP).unwrap();
            worst[slot] = worst[slot].max(relative_error(g.as_flat(), fd.as_flat()));
        }
    }
    verdict(
        worst.iter().all(|w| *w <= 1e-5),
        format!(
            "worst relative error Cw {:.2e}, Ew {:.2e} (limit 1e-5)",
            worst[0], worst[1]
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let mut worst_invariance: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(2..=32);
        let dim = rng.random_range(1..=4);
        let sigma = SIGMAS[rng.random_range(0..3)];
        let e = random_set(&mut rng, n, dim, sigma);
        let base = tmee_loss(&e, sigma).unwrap();

        let point: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let collapsed = ErrorSet::new(vec![point; n]).unwrap();
        if tmee_loss(&collapsed, sigma).unwrap() != 0.0 || base <= 0.0 {
            failures.push(format!("case {case}: zero iff collapsed"));
        }

        let ew = LossConfig {
            sigma,
            variant: Variant::EwTmee,
            ..LossConfig::default()
        };
        let cw = LossConfig {
            variant: Variant::CwTmee,
            ..ew
        };
        let (lew, lcw) = (
            weighted_tmee_loss(&e, &ew).unwrap(),
            weighted_tmee_loss(&e, &cw).unwrap(),
        );
        if lew < 0.0 || lcw < (n as f64).ln() {
            failures.push(format!("case {case}: weighted lower bounds ({lew}, {lcw})"));
        }

        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = e.select(&perm).unwrap();
        let deltas = [
            tmee_loss(&e.translated(&shift).unwrap(), sigma).unwrap() - base,
            tmee_loss(&permuted, sigma).unwrap() - base,
            weighted_tmee_loss(&permuted, &ew).unwrap() - lew,
            weighted_tmee_loss(&permuted, &cw).unwrap() - lcw,
        ];
        let d = deltas.iter().map(|x| x.abs()).fold(0.0, f64::max);
        worst_invariance = worst_invariance.max(d);
        if d > 1e-12 {
            failures.push(format!("case {case}: invariance off by {d:e}"));
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "1000 instances, {} violations, worst invariance gap {worst_invariance:.1e}{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let e = random_set(&mut rng, 32, 3, 0.5);
    let err = |s: f64| (information_potential(&e, s).unwrap() - taylor_potential(&e, s, 2).unwrap().approx).abs();
    let ratios: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&s| err(s) / err(2.0 * s)).collect();
    let identity = msr_identity_check(&e);
    let scaling_ok = ratios.iter().all(|r| *r >= 8.0);
    verdict(
        scaling_ok && identity.residual < 1e-10,
        format!(
            "order-2 error ratios on doubling sigma from 1, 2, 4: {:.1}, {:.1}, {:.1} (need >= 8); identity residual {:.1e}",
            ratios[0], ratios[1], ratios[2], identity.residual
        ),
    )
}

fn criterion_5() -> Verdict {
    let sigma = 0.5;
    let cs: Vec<f64> = (1..=100).map(|i| i as f64 / 10.0).collect();
    let bulk = default_bulk(2, sigma, INFLUENCE_BULK_SEED).unwrap();
    let points = influence_curve(&bulk, &cs, sigma).unwrap();
    let at = |c: f64| points.iter().find(|p| (p.c - c).abs() < 1e-9).unwrap();
    let peak = points
        .iter()
        .max_by(|a, b| a.tmee_grad_norm.total_cmp(&b.tmee_grad_norm))
        .unwrap();
    let tail = at(5.0).tmee_grad_norm / peak.tmee_grad_norm;
    let mse_growth = at(5.0).mse_grad_norm / at(1.0).mse_grad_norm;
    verdict(
        (0.5..=2.0).contains(&peak.c) && tail < 0.01 && mse_growth >= 4.5,
        format!(
            "peak at c = {}, value at c = 5 is {tail:.2e} of peak, MSE growth 1 -> 5 is {mse_growth:.2}",
            peak.c
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n_a = rng.random_range(1..=30);
        let n_b = rng.random_range(1..=30);
        let dim = rng.random_range(1..=4);
        let sigma = SIGMAS[rng.random_range(0..3)];
        let e = random_set(&mut rng, n_a + n_b, dim, sigma);
        let r = coupling_ratio(&e, &TaskPartition::split(n_a, n_b).unwrap(), sigma).unwrap();
        worst = worst.max(r.decomposition_residual);
    }
    let sigma = 0.5;
    let same = ErrorSet::new(vec![vec![0.3, -0.2]; 20]).unwrap();
    let r_same = coupling_ratio(&same, &TaskPartition::split(10, 10).unwrap(), sigma)
        .unwrap()
        .r_b;
    let cluster = random_set(&mut rng, 20, 2, 0.1 * sigma);
    let offset = 100.0 * sigma;
    let apart = ErrorSet::new(
        cluster
            .samples()
            .enumerate()
            .map(|(i, x)| x.iter().map(|v| if i < 10 { *v } else { v + offset }).collect())
            .collect(),
    )
    .unwrap();
    let r_apart = coupling_ratio(&apart, &TaskPartition::split(10, 10).unwrap(), sigma)
        .unwrap()
        .r_b;
    verdict(
        worst < 1e-10 && (r_same - 2.0).abs() < 1e-9 && r_apart < 1e-6,
        format!("worst decomposition residual {worst:.1e}; identical R_B = {r_same}; separated R_B = {r_apart:.1e}"),
    )
}

fn criterion_7(tmp: &Path) -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let mut finals = [0.0; 2];
        for (arm, alpha) in [0.0, 0.1].into_iter().enumerate() {
            let cfg = tmp.join(format!("c7_{seed}_{arm}.json"));
            let json = format!(
                r#"{{"policy": "LINEAR",
                    "loss": {{"alpha": {alpha}, "warmup_fraction": 0.3333333333333333}},
                    "noise": {{"kind": "CAUCHY", "gamma": 0.02, "seed": {}}},
                    "train": {{"steps": 3000, "learning_rate": 0.1, "snapshot_every": 1000}}}}"#,
                seed + 7
            );
            fs::write(&cfg, json).unwrap();
            let out = tmp.join(format!("c7_{seed}_{arm}"));
            let seed_arg = seed.to_string();
            let args = [
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                &seed_arg,
            ];
            run(&cli(&args)).unwrap();
            finals[arm] = read_summary(&out).unwrap().final_entropy;
        }
        if finals[1] < finals[0] {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", finals[1], finals[0]));
    }
    verdict(
        wins >= 4,
        format!(
            "T-MEE arm lower in {wins}/5 seeds (T-MEE/MSE-only final entropy: {})",
            pairs.join(", ")
        ),
    )
}

fn criterion_8() -> Verdict {
    let cfg = NoiseBenchConfig::default();
    let report = run_noise_bench(&cfg).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (i, noise) in cfg.noises.iter().enumerate() {
        pass &= report.improved_for(i);
        let best = report
            .comparisons
            .iter()
            .filter(|c| c.noise_index == i)
            .min_by(|a, b| a.median_tmee.total_cmp(&b.median_tmee))
            .unwrap();
        lines.push(format!(
            "{:?}: best alpha {} median {:.3e} vs MSE-only {:.3e}",
            noise.kind, best.alpha, best.median_tmee, best.median_mse_only
        ));
    }
    verdict(pass, lines.join("; "))
}

fn criterion_9() -> Verdict {
    let cfg = ImbalanceConfig::default();
    let report = run_imbalance_sweep(&cfg).unwrap();
    let high = report.cell(40, 0.25).unwrap();
    let zero = report.cell(40, 100.0).unwrap();
    let a = high.min_r_b > 10.0 && high.mean_delta > 0.0 && high.significant_degradation;
    let b = zero.max_r_b < 0.1 && !zero.significant_degradation;
    verdict(
        a && b,
        format!(
            "(a) overlap: R_B {:.1}..{:.1}, minority mse delta {:.2e}, significant {}; (b) separated: R_B max {:.1e}, delta {:.1e}, significant {}",
            high.min_r_b,
            high.max_r_b,
            high.mean_delta,
            high.significant_degradation,
            zero.max_r_b,
            zero.mean_delta,
            zero.significant_degradation
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn criterion_10(tmp: &Path) -> Verdict {
    let cfg = tmp.join("c10.json");
    fs::write(
        &cfg,
        r#"{"task": {"name": "paired", "trajectories": 3, "minority": 1, "horizon": 8, "chunk": 2},
            "loss": {"alpha": 0.1, "variant": "EW_TMEE"},
            "noise": {"kind": "IMPULSE", "p": 0.05, "seed": 3},
            "train": {"steps": 300, "snapshot_every": 100},
            "grad_check": {"sizes": [4, 16], "dims": [2], "instances": 2},
            "noise_bench": {"train": {"steps": 100, "learning_rate": 0.2}, "seeds": [0, 1]},
            "imbalance": {"train": {"steps": 100, "learning_rate": 1.0}, "ratios": [1, 4], "seeds": [0, 1]}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for rep in ["a", "b"] {
        let root = tmp.join(format!("c10_{rep}"));
        let dir = |name: &str| root.join(name).to_str().unwrap().to_string();
        for cmd in ["grad-check", "train", "influence", "noise-bench", "imbalance"] {
            run(&cli(&[cmd, "--config", cfg, "--out", &dir(cmd), "--seed", "11"])).unwrap();
        }
        run(&cli(&[
            "entropy-curve",
            "--run",
            &dir("train"),
            "--out",
            &dir("entropy-curve"),
        ]))
        .unwrap();
        run(&cli(&[
            "pca",
            "--run",
            &dir("train"),
            "--task",
            "A",
            "--out",
            &dir("pca"),
        ]))
        .unwrap();
    }
    let (a, b) = (tmp.join("c10_a"), tmp.join("c10_b"));
    let files = csv_files(&a);
    for fa in &files {
        let fb = b.join(fa.strip_prefix(&a).unwrap());
        compared += 1;
        if fs::read(fa).unwrap() != fs::read(&fb).unwrap() {
            mismatches.push(fa.strip_prefix(&a).unwrap().display().to_string());
        }
    }
    let same_count = csv_files(&b).len() == files.len();
    verdict(
        mismatches.is_empty() && same_count && compared >= 7,
        format!(
            "{compared} CSVs across 7 commands, {} differ {:?}",
            mismatches.len(),
            mismatches
        ),
    )
}

type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Verdict + 'a>);

#[test]
fn acceptance() {
    let tmp = TempDir::new().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient exactness", Duration::from_secs(5), Box::new(criterion_1)),
        (
            "2 weighted-variant gradients",
            Duration::from_secs(10),
            Box::new(criterion_2),
        ),
        ("3 loss identities", Duration::from_secs(5), Box::new(criterion_3)),
        ("4 Taylor expansion", Duration::from_secs(2), Box::new(criterion_4)),
        ("5 bounded influence", Duration::from_secs(2), Box::new(criterion_5)),
        (
            "6 coupling decomposition",
            Duration::from_secs(2),
            Box::new(criterion_6),
        ),
        (
            "7 entropy dynamics",
            Duration::from_secs(60),
            Box::new(|| criterion_7(tmp.path())),
        ),
        ("8 noise robustness", Duration::from_secs(300), Box::new(criterion_8)),
        (
            "9 imbalance operating range",
            Duration::from_secs(600),
            Box::new(criterion_9),
        ),
        (
            "10 determinism",
            Duration::from_secs(60),
            Box::new(|| criterion_10(tmp.path())),
        ),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = v.pass && in_time;
        println!(
            "{} criterion {name}: {} [{:.2}s / {}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
