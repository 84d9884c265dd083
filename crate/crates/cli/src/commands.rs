//! One function per subcommand. Each writes its outputs plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use entroshape::analysis::{entropy_curve, pca_project};
use entroshape::gradients::{
    default_bulk, finite_difference_oracle, influence_curve, relative_error, variant_gradient, write_influence_csv,
    GradientField,
};
use entroshape::kernel::{ErrorSet, Reduction};
use entroshape::losses::{variant_loss, LossConfig, Variant};
use entroshape::trainer::{
    generate_tasks, read_metrics_csv, read_snapshots, read_summary, run_imbalance_sweep, run_noise_bench,
    snapshot_path, train, write_run_dir, Architecture, Policy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ExperimentConfig, GradCheckConfig, PcaConfig};
use crate::manifest::Manifest;
use crate::{Cli, CliError, Command};

/// Default tolerance when checking a recomputed entropy curve.
pub const ENTROPY_CURVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug)]
pub struct Outcome {
    pub out: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub message: String,
}

/// Analytic gradient hook used by `grad-check`; tests swap in a faulty one.
pub type GradientFn<'a> = &'a dyn Fn(&ErrorSet, &LossConfig) -> entroshape::Result<GradientField>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Resolves the config, runs the command and writes the manifest.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    run_with(cli, &variant_gradient_deterministic)
}

fn variant_gradient_deterministic(e: &ErrorSet, loss: &LossConfig) -> entroshape::Result<GradientField> {
    variant_gradient(e, loss, Reduction::Deterministic)
}

pub fn run_with(cli: &Cli, gradient: GradientFn<'_>) -> Result<Outcome, CliError> {
    configure_threads(cli.threads)?;
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seed_override = cli.seed;
    let seed = seed_override.or(config.seed).unwrap_or(0);
    config.seed = Some(seed);
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("entroshape-{}", cli.command.name())));
    config.output_dir = Some(out.clone());
    let reduction = if cli.deterministic {
        Reduction::Deterministic
    } else {
        Reduction::Parallel
    };

    match &cli.command {
        Command::EntropyCurve { run: Some(dir) } => {
            config.entropy_curve.get_or_insert_with(Default::default).run_dir = Some(dir.clone());
        }
        Command::Pca {
            run,
            input,
            components,
            task,
        } => {
            let pca = config.pca.get_or_insert_with(Default::default);
            if let Some(dir) = run {
                pca.run_dir = Some(dir.clone());
            }
            if let Some(path) = input {
                pca.input = Some(path.clone());
            }
            if let Some(c) = components {
                pca.components = *c;
            }
            if task.is_some() {
                pca.task = *task;
            }
        }
        _ => {}
    }
    if let Some(s) = seed_override {
        for seeds in [
            config.noise_bench.as_mut().map(|c| &mut c.seeds),
            config.imbalance.as_mut().map(|c| &mut c.seeds),
        ]
        .into_iter()
        .flatten()
        {
            seeds.iter_mut().for_each(|x| *x = x.wrapping_add(s));
        }
    }

    ensure_dir(&out)?;
    let result = match &cli.command {
        Command::GradCheck => grad_check(&config, seed, &out, gradient),
        Command::Train => cmd_train(&config, seed, reduction, &out),
        Command::NoiseBench => noise_bench(&config, seed, reduction, &out),
        Command::Imbalance => imbalance(&config, seed, reduction, &out),
        Command::Influence => influence(&config, &out),
        Command::EntropyCurve { .. } => cmd_entropy_curve(&config, &out),
        Command::Pca { .. } => pca(&config, &out),
    };
    // verification failures still leave their evidence and a manifest behind
    let (outputs, message, failure) = match result {
        Ok((outputs, message)) => (outputs, message, None),
        Err(Failure::Verified(outputs, err)) => (outputs, String::new(), Some(err)),
        Err(Failure::Fatal(err)) => return Err(err),
    };
    let manifest = Manifest::build(cli.command.name(), seed, cli.deterministic, &config, &out, &outputs)?;
    let manifest_path = manifest.write(&out)?;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(Outcome {
        out,
        outputs,
        manifest: manifest_path,
        message,
    })
}

enum Failure {
    /// Outputs were written; the run still failed verification.
    Verified(Vec<PathBuf>, CliError),
    Fatal(CliError),
}

impl<E: Into<CliError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Fatal(e.into())
    }
}

type CmdResult = Result<(Vec<PathBuf>, String), Failure>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub variant: Variant,
    pub n: usize,
    pub dim: usize,
    pub sigma: f64,
    pub instance: usize,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn validate_grad_check(cfg: &GradCheckConfig) -> Result<(), CliError> {
    if cfg.sizes.is_empty() || cfg.dims.is_empty() || cfg.sigmas.is_empty() || cfg.variants.is_empty() {
        return Err(CliError::Config("grad_check grid is empty".into()));
    }
    if cfg.instances == 0 {
        return Err(CliError::Config(
            "grad_check needs at least one instance per grid point".into(),
        ));
    }
    if cfg.sizes.contains(&0) || cfg.dims.contains(&0) {
        return Err(CliError::Config("grad_check sizes and dims must be positive".into()));
    }
    for (name, v) in [
        ("h", cfg.h),
        ("spread", cfg.spread),
        ("tmee_tolerance", cfg.tmee_tolerance),
        ("weighted_tolerance", cfg.weighted_tolerance),
    ]
    .into_iter()
    .chain(cfg.sigmas.iter().map(|s| ("sigma", *s)))
    {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::Config(format!("grad_check {name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Every grid instance with its analytic/FD relative error.
pub fn grad_check_rows(
    cfg: &GradCheckConfig,
    seed: u64,
    gradient: GradientFn<'_>,
) -> Result<Vec<(GradCheckRow, ErrorSet)>, CliError> {
    validate_grad_check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        for &n in &cfg.sizes {
            for &dim in &cfg.dims {
                for &sigma in &cfg.sigmas {
                    let loss = LossConfig {
                        sigma,
                        variant,
                        ..LossConfig::default()
                    };
                    for instance in 0..cfg.instances {
                        let scale = cfg.spread * sigma;
                        let data = (0..n * dim)
                            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let errors = ErrorSet::from_flat(data, dim)?;
                        let analytic = gradient(&errors, &loss)?;
                        let fd = finite_difference_oracle(|e| variant_loss(e, &loss), &errors, cfg.h)?;
                        let rel_err = relative_error(analytic.as_flat(), fd.as_flat());
                        let tolerance = if variant.is_weighted() {
                            cfg.weighted_tolerance
                        } else {
                            cfg.tmee_tolerance
                        };
                        rows.push((
                            GradCheckRow {
                                variant,
                                n,
                                dim,
                                sigma,
                                instance,
                                rel_err,
                                tolerance,
                                pass: rel_err <= tolerance,
                            },
                            errors,
                        ));
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn grad_check(config: &ExperimentConfig, seed: u64, out: &Path, gradient: GradientFn<'_>) -> CmdResult {
    let cfg = config.grad_check.clone().unwrap_or_default();
    let checked = grad_check_rows(&cfg, seed, gradient)?;
    let path = out.join("grad_check.csv");
    let rows: Vec<&GradCheckRow> = checked.iter().map(|(r, _)| r).collect();
    write_csv(&rows, &path)?;
    let mut outputs = vec![path];
    let failures: Vec<(usize, &GradCheckRow, &ErrorSet)> = checked
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| !r.pass)
        .map(|(i, (r, e))| (i, r, e))
        .collect();
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    if failures.is_empty() {
        return Ok((
            outputs,
            format!(
                "{} instances within tolerance (worst relative error {worst:.3e})",
                rows.len()
            ),
        ));
    }
    let dump = out.join("failures");
    ensure_dir(&dump)?;
    for (i, _, errors) in &failures {
        let p = dump.join(format!("instance_{i:04}.csv"));
        errors.save_csv(&p)?;
        outputs.push(p);
    }
    let (i, r, _) = failures[0];
    let err = CliError::Verification(format!(
        "{} of {} instances exceed tolerance; first is #{i} ({:?}, N={}, D={}, sigma={}): relative error {:.3e} > {:.1e}, dumped to {}",
        failures.len(),
        rows.len(),
        r.variant,
        r.n,
        r.dim,
        r.sigma,
        r.rel_err,
        r.tolerance,
        dump.display()
    ));
    Err(Failure::Verified(outputs, err))
}

fn cmd_train(config: &ExperimentConfig, seed: u64, reduction: Reduction, out: &Path) -> CmdResult {
    let recipe = config.task.clone().unwrap_or_default();
    let batch = generate_tasks(&recipe, seed)?;
    let arch = config.policy.unwrap_or(Architecture::Linear);
    let train_cfg = config.resolved_train(seed, reduction);
    let policy = Policy::new(arch, batch.input_dim(), batch.output_dim(), seed)?;
    let (_, report) = train(&batch, policy, &train_cfg)?;
    let outputs = write_run_dir(&report, out)?;
    let s = &report.summary;
    Ok((
        outputs,
        format!(
            "{} steps, final mse {:.4e}, clean mse {:.4e}, entropy {:.4e}",
            s.steps,
            report.final_metrics().mse,
            s.clean_mse,
            s.final_entropy
        ),
    ))
}

fn noise_bench(config: &ExperimentConfig, _seed: u64, reduction: Reduction, out: &Path) -> CmdResult {
    let mut cfg = config.noise_bench.clone().unwrap_or_default();
    cfg.train.reduction = reduction;
    let report = run_noise_bench(&cfg)?;
    let outputs = report.write(out)?;
    let lines: Vec<String> = report
        .comparisons
        .iter()
        .map(|c| {
            format!(
                "{:?} alpha={}: median clean mse {:.4e} (mse only) vs {:.4e} (entropy), wins {}/{}",
                c.noise.kind,
                c.alpha,
                c.median_mse_only,
                c.median_tmee,
                c.tmee_wins,
                cfg.seeds.len()
            )
        })
        .collect();
    Ok((outputs, lines.join("\n")))
}

fn imbalance(config: &ExperimentConfig, _seed: u64, reduction: Reduction, out: &Path) -> CmdResult {
    let mut cfg = config.imbalance.clone().unwrap_or_default();
    cfg.train.reduction = reduction;
    let report = run_imbalance_sweep(&cfg)?;
    let outputs = report.write(out)?;
    let lines: Vec<String> = report
        .cells
        .iter()
        .map(|c| {
            format!(
                "ratio {} overlap {}: R_B {:.3e}, minority mse {:.4e} (baseline {:.4e}), significant degradation {}",
                c.ratio,
                c.overlap,
                c.mean_r_b,
                c.mean_minority_clean_mse,
                c.mean_baseline_minority_clean_mse,
                c.significant_degradation
            )
        })
        .collect();
    Ok((outputs, lines.join("\n")))
}

#[derive(Serialize)]
struct InfluenceSummary {
    sigma: f64,
    bulk_size: usize,
    peak_c: f64,
    peak_tmee_grad_norm: f64,
}

fn influence(config: &ExperimentConfig, out: &Path) -> CmdResult {
    let cfg = config.influence.clone().unwrap_or_default();
    if cfg.cs.is_empty() {
        return Err(CliError::Config("influence needs at least one distance".into()).into());
    }
    let bulk = default_bulk(cfg.dim, cfg.sigma, cfg.bulk_seed)?;
    let points = influence_curve(&bulk, &cfg.cs, cfg.sigma)?;
    let path = out.join("influence.csv");
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write_influence_csv(&points, file)?;
    let peak = points
        .iter()
        .max_by(|a, b| a.tmee_grad_norm.total_cmp(&b.tmee_grad_norm))
        .expect("nonempty");
    let summary = InfluenceSummary {
        sigma: cfg.sigma,
        bulk_size: bulk.len(),
        peak_c: peak.c,
        peak_tmee_grad_norm: peak.tmee_grad_norm,
    };
    let spath = out.join("summary.json");
    write_json(&summary, &spath)?;
    Ok((vec![path, spath], format!("T-MEE influence peaks at c = {}", peak.c)))
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    entropy: f64,
    logged_entropy: Option<f64>,
    abs_diff: Option<f64>,
}

fn cmd_entropy_curve(config: &ExperimentConfig, out: &Path) -> CmdResult {
    let cfg = config.entropy_curve.clone().unwrap_or_default();
    let dir = cfg.run_dir.ok_or_else(|| {
        CliError::Config("entropy-curve needs a run directory (--run or entropy_curve.run_dir)".into())
    })?;
    let summary = read_summary(&dir)?;
    let sigma = cfg.sigma.unwrap_or(summary.loss.sigma);
    let tolerance = cfg.tolerance.unwrap_or(ENTROPY_CURVE_TOLERANCE);
    let metrics = read_metrics_csv(&dir.join(entroshape::trainer::METRICS_FILE))?;
    let snapshots = read_snapshots(&dir)?;
    let curve = entropy_curve(&snapshots, sigma)?;
    let rows: Vec<CurveRow> = curve
        .iter()
        .map(|&(step, entropy)| {
            let logged = metrics.iter().find(|m| m.step == step).map(|m| m.entropy);
            CurveRow {
                step,
                entropy,
                logged_entropy: logged,
                abs_diff: logged.map(|l| (l - entropy).abs()),
            }
        })
        .collect();
    let path = out.join("entropy_curve.csv");
    write_csv(&rows, &path)?;
    let outputs = vec![path];
    let bad: Vec<&CurveRow> = rows
        .iter()
        .filter(|r| r.abs_diff.is_none_or(|d| d > tolerance))
        .collect();
    if let Some(first) = bad.first() {
        let err = CliError::Verification(format!(
            "{} of {} snapshots disagree with metrics.csv; first at step {} (recomputed {}, logged {:?})",
            bad.len(),
            rows.len(),
            first.step,
            first.entropy,
            first.logged_entropy
        ));
        return Err(Failure::Verified(outputs, err));
    }
    Ok((
        outputs,
        format!(
            "{} snapshots reproduce the logged entropy within {tolerance:e}",
            rows.len()
        ),
    ))
}

#[derive(Serialize)]
struct PcaSummary {
    samples: usize,
    dim: usize,
    explained: Vec<f64>,
    axes: Vec<Vec<f64>>,
}

fn load_pca_input(cfg: &PcaConfig) -> Result<ErrorSet, CliError> {
    match (&cfg.input, &cfg.run_dir) {
        (Some(_), Some(_)) => Err(CliError::Config("pca takes either input or run_dir, not both".into())),
        (None, None) => Err(CliError::Config("pca needs an input CSV or a run directory".into())),
        (Some(path), None) => {
            if cfg.task.is_some() {
                return Err(CliError::Config("pca task filtering needs run_dir".into()));
            }
            Ok(ErrorSet::load_csv(path)?)
        }
        (None, Some(dir)) => {
            let snapshots = read_snapshots(dir)?;
            let set = match cfg.step {
                Some(step) => {
                    let path = snapshot_path(dir, step);
                    ErrorSet::load_csv(&path)?
                }
                None => snapshots
                    .into_iter()
                    .last()
                    .map(|(_, s)| s)
                    .ok_or_else(|| CliError::Config(format!("{} has no snapshots", dir.display())))?,
            };
            let Some(task) = cfg.task else { return Ok(set) };
            let labels = read_summary(dir)?.task_labels;
            let prov = set
                .provenance()
                .ok_or_else(|| CliError::Config("snapshot has no provenance to filter by task".into()))?;
            let keep: Vec<usize> = (0..set.len())
                .filter(|&i| labels.get(prov[i].b) == Some(&task))
                .collect();
            if keep.is_empty() {
                return Err(CliError::Config(format!("no samples of task {task:?} in the snapshot")));
            }
            Ok(set.select(&keep)?)
        }
    }
}

fn pca(config: &ExperimentConfig, out: &Path) -> CmdResult {
    let cfg = config.pca.clone().unwrap_or_default();
    let set = load_pca_input(&cfg)?;
    let proj = pca_project(&set, cfg.components)?;
    let path = out.join("pca.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.to_string()))?;
    let mut header = vec!["b".to_string(), "t".to_string(), "k".to_string()];
    header.extend((0..cfg.components).map(|c| format!("pc_{c}")));
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for (i, coords) in proj.coords.iter().enumerate() {
        let mut rec = match set.provenance() {
            Some(p) => vec![p[i].b.to_string(), p[i].t.to_string(), p[i].k.to_string()],
            None => vec![String::new(); 3],
        };
        rec.extend(coords.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let spath = out.join("pca_summary.json");
    write_json(
        &PcaSummary {
            samples: set.len(),
            dim: set.dim(),
            explained: proj.explained.clone(),
            axes: proj.axes,
        },
        &spath,
    )?;
    Ok((vec![path, spath], format!("explained variance {:?}", proj.explained)))
}
