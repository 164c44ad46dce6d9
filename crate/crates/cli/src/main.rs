//! `rewardlab` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 correlation undefined because a reward column has zero variance.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rewardlab::analysis::{correlation_samples, pearson, run_sweep, CorrelationOptions, SweepAxis};
use rewardlab::io::{
    self, checkpoint_name, load_benchmark, load_checkpoint, read_json, roc_csv, save_benchmark, save_checkpoint,
    scores_csv, sweep_checkpoint_name, sweep_csv, table_csv, training_curve_csv, write_atomic, write_json,
    CheckpointFile, DetectRun, ExperimentConfig, LogHeader, ManifestCheckpoint, RolloutLog, RunManifest, SweepSidecar,
};
use rewardlab::polynomaly::{bench_eval, bench_generate, DetectorConfig};
use rewardlab::rewards::{RewardPair, RewardSample};
use rewardlab::rollout::{rollout, RolloutOptions};
use rewardlab::trainer::{train, CheckpointTag};
use rewardlab::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ZERO_VARIANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "rewardlab", version, about = "Reward misspecification experiments")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisName {
    ModelSize,
    TrainSteps,
    ActionResolution,
    ObsFidelity,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy on the configured proxy reward.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one policy per value of a capability axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisName,
        /// JSON array, e.g. `[[],[4],[16,16]]` for model sizes or `0.1,0.01,0`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Proxy/true correlation of a trained checkpoint and its early sibling.
    Correlate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Early checkpoint; defaults to `checkpoint-early.json` next to `--checkpoint`.
        #[arg(long)]
        early: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the misweighting proxy at the true coefficients instead of the configured proxy.
        #[arg(long)]
        degenerate: bool,
        /// Directory for the sample CSVs; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build or score an anomaly-detection benchmark.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Collate `bench detect` outputs into one table; summarize sweep sidecars.
    Report {
        /// `detect.json` files or `sweep.json` sidecars.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record one episode of a checkpoint as a JSON log.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Train the trusted and candidate policies and label the candidates.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every manifest entry with all four detectors.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Incompatible(_)) => EXIT_USAGE,
        Some(Error::ZeroVariance(_)) => EXIT_ZERO_VARIANCE,
        Some(_) => EXIT_FAILURE,
        None if e.downcast_ref::<Usage>().is_some() => EXIT_USAGE,
        None => EXIT_FAILURE,
    }
}

/// Marks a bad command line that clap could not catch.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { cfg, out } => cmd_train(&cfg.load()?, &out),
        Command::Sweep { axis, values, cfg, out } => cmd_sweep(axis, &values, &cfg.load()?, &out),
        Command::Correlate {
            checkpoint,
            early,
            cfg,
            degenerate,
            out,
        } => cmd_correlate(&checkpoint, early.as_deref(), &cfg.load()?, degenerate, out.as_deref()),
        Command::Bench {
            command: BenchCommand::Gen { cfg, out },
        } => cmd_bench_gen(&cfg.load()?, &out),
        Command::Bench {
            command: BenchCommand::Detect { manifest, seed, out },
        } => cmd_bench_detect(&manifest, seed, &out),
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
        Command::Rollout {
            checkpoint,
            cfg,
            deterministic,
            out,
        } => cmd_rollout(&checkpoint, &cfg.load()?, deterministic, &out),
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let spec = cfg.policy_spec();
    let run = train(&spec, &cfg.env, &cfg.rewards()?, &cfg.train_config(), cfg.eval.epsilon)?;
    let mut listed = Vec::new();
    for c in run.checkpoints.iter().filter(|c| !c.tags.is_empty()) {
        let file = checkpoint_name(c);
        save_checkpoint(&out.join(&file), &spec, c)?;
        listed.push(ManifestCheckpoint {
            file,
            generation: c.generation,
            tags: c.tags.clone(),
            mean_proxy: c.mean_proxy,
            mean_true: c.mean_true,
        });
    }
    let curve = "training_curve.csv";
    write_atomic(&out.join(curve), &training_curve_csv(&run.curve)?)?;
    write_json(
        &out.join("manifest.json"),
        &RunManifest {
            command: "train".into(),
            seed: cfg.seed,
            config: cfg.clone(),
            checkpoints: listed,
            training_curve: curve.into(),
        },
    )?;
    let t = run.trained();
    println!(
        "trained generation {}: proxy {:.6} true {:.6}",
        t.generation, t.mean_proxy, t.mean_true
    );
    Ok(())
}

fn parse_axis(axis: AxisName, values: &str) -> anyhow::Result<SweepAxis> {
    let text = values.trim();
    let text = if text.starts_with('[') {
        text.to_string()
    } else {
        format!("[{text}]")
    };
    let bad = |e: serde_json::Error| Usage(format!("cannot parse --values `{values}`: {e}"));
    Ok(match axis {
        AxisName::ModelSize => SweepAxis::ModelSize(serde_json::from_str(&text).map_err(bad)?),
        AxisName::TrainSteps => SweepAxis::TrainingSteps(serde_json::from_str(&text).map_err(bad)?),
        AxisName::ActionResolution => SweepAxis::ActionResolution(serde_json::from_str(&text).map_err(bad)?),
        AxisName::ObsFidelity => SweepAxis::ObservationFidelity(serde_json::from_str(&text).map_err(bad)?),
    })
}

fn cmd_sweep(axis: AxisName, values: &str, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let axis = parse_axis(axis, values)?;
    let base = cfg.sweep_base();
    let rewards = cfg.rewards()?;
    let result = run_sweep(&axis, &base, &rewards, cfg.seed)?;
    for (i, row) in result.rows.iter().enumerate() {
        if let (Some(run), Some(spec)) = (&row.run, &row.spec) {
            save_checkpoint(&out.join(sweep_checkpoint_name(i)), spec, run.trained())?;
        }
    }
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&result)?)?;
    let theta = cfg.theta();
    let phase = result.phase_transition(theta);
    write_json(
        &out.join("sweep.json"),
        &SweepSidecar {
            axis: axis.clone(),
            base,
            rewards,
            seed: cfg.seed,
            theta,
            phase_transition: phase,
            result: result.clone(),
        },
    )?;
    for row in &result.rows {
        match (&row.eval, &row.error) {
            (Some(e), _) => println!("{}: proxy {:.6} true {:.6}", row.axis_value, e.mean_proxy, e.mean_true),
            (None, Some(err)) => println!("{}: failed: {err}", row.axis_value),
            (None, None) => {}
        }
    }
    match phase {
        Some(i) => println!(
            "phase transition: row {i} ({}) at theta {theta}",
            result.rows[i].axis_value
        ),
        None => println!("phase transition: none at theta {theta}"),
    }
    Ok(())
}

fn samples_csv(samples: &[RewardSample]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["rollout", "proxy", "true"])?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([i.to_string(), s.proxy.to_string(), s.truth.to_string()])?;
    }
    Ok(w.into_inner()?)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn cmd_correlate(
    checkpoint: &Path,
    early: Option<&Path>,
    cfg: &ExperimentConfig,
    degenerate: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let early = match early {
        Some(p) => Some(p.to_path_buf()),
        None => Some(dir.join("checkpoint-early.json")).filter(|p| p.exists() && p != checkpoint),
    };
    let out = out.unwrap_or(dir);
    let rewards = if degenerate {
        RewardPair::degenerate(cfg.kind())
    } else {
        cfg.rewards()?
    };
    let opts = CorrelationOptions {
        epsilon: cfg.eval.epsilon,
        rollouts: cfg
            .eval
            .correlation_rollouts
            .unwrap_or(CorrelationOptions::default().rollouts),
        ..CorrelationOptions::default()
    };
    let mut targets = vec![("trained", checkpoint.to_path_buf())];
    targets.extend(early.map(|p| ("early", p)));
    let mut undefined = None;
    for (name, path) in targets {
        let file: CheckpointFile = load_checkpoint(&path)?;
        if file.policy.env != cfg.kind() {
            return Err(Error::Incompatible(format!(
                "{} holds a {} policy but the config describes {}",
                path.display(),
                file.policy.env,
                cfg.kind()
            ))
            .into());
        }
        if name == "trained" && !file.tags.contains(&CheckpointTag::Trained) {
            eprintln!("note: {} is not tagged as the trained checkpoint", path.display());
        }
        let samples = correlation_samples(&file.policy, &file.params, &cfg.env, &rewards, cfg.seed, &opts)?;
        let csv_path = out.join(format!("correlation-{name}.csv"));
        write_atomic(&csv_path, &samples_csv(&samples)?)?;
        let xs: Vec<f64> = samples.iter().map(|s| s.proxy).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.truth).collect();
        match pearson(&xs, &ys) {
            Ok(rho) => println!("rho {name} {rho:.9}"),
            Err(e @ Error::ZeroVariance(_)) => {
                println!("rho {name} undefined ({e})");
                undefined.get_or_insert(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    match undefined {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_bench_gen(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let bench = bench_generate(&cfg.bench_config()?, cfg.seed)?;
    let path = save_benchmark(out, &bench)?;
    let m = &bench.manifest;
    println!("trusted {} true {:.6}", m.trusted.checkpoint, m.trusted.mean_true);
    for e in &m.entries {
        println!("{} {:?} true {:.6}", e.checkpoint, e.label, e.mean_true);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bench_detect(manifest: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let bench = load_benchmark(manifest)?;
    let mut reports = Vec::new();
    for d in DetectorConfig::all() {
        let report = bench_eval(&bench, &d, seed)?;
        let name = report.detector.clone();
        write_atomic(&out.join(format!("scores-{name}.csv")), &scores_csv(&report)?)?;
        match &report.roc {
            Some(roc) => {
                write_atomic(&out.join(format!("roc-{name}.csv")), &roc_csv(roc)?)?;
                println!("{name}: auroc {:.6} max_f1 {:.6}", roc.auroc, roc.max_f1);
            }
            None => println!("{name}: single-class manifest, no ROC"),
        }
        reports.push(report);
    }
    write_json(
        &out.join("detect.json"),
        &DetectRun {
            manifest: manifest.display().to_string(),
            seed,
            reports,
        },
    )?;
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for path in inputs {
        if let Ok(run) = read_json::<DetectRun>(path) {
            reports.extend(run.reports);
        } else {
            let sweep: SweepSidecar =
                read_json(path).with_context(|| format!("{} is neither a detect run nor a sweep", path.display()))?;
            let flag = sweep
                .phase_transition
                .map(|i| format!("row {i} ({})", sweep.result.rows[i].axis_value))
                .unwrap_or_else(|| "none".into());
            println!(
                "{}: {} sweep, {} rows, phase transition {flag}",
                path.display(),
                sweep.axis.name(),
                sweep.result.rows.len()
            );
        }
    }
    if reports.is_empty() {
        return Ok(());
    }
    let table = table_csv(&reports)?;
    match out {
        Some(p) => write_atomic(p, &table)?,
        None => print!("{}", String::from_utf8_lossy(&table)),
    }
    Ok(())
}

fn cmd_rollout(checkpoint: &Path, cfg: &ExperimentConfig, deterministic: bool, out: &Path) -> anyhow::Result<()> {
    let file = load_checkpoint(checkpoint)?;
    if file.policy.env != cfg.kind() {
        bail!(Error::Incompatible(format!(
            "checkpoint is a {} policy, config is {}",
            file.policy.env,
            cfg.kind()
        )));
    }
    let mut opts = RolloutOptions::sampled(cfg.seed)
        .with_epsilon(cfg.eval.epsilon)
        .recording(1);
    if deterministic {
        opts = opts.deterministic();
    }
    let outcome = rollout(&file.policy, &file.params, &cfg.env, &cfg.rewards()?, &opts)?;
    let log = RolloutLog::from_outcome(
        LogHeader {
            env: cfg.kind(),
            checkpoint: checkpoint.display().to_string(),
            seed: cfg.seed,
            horizon: cfg.env.horizon(),
        },
        &outcome,
    );
    io::write_json(out, &log)?;
    println!(
        "{} steps: proxy {:.6} true {:.6}",
        outcome.steps, outcome.totals.proxy, outcome.totals.truth
    );
    Ok(())
}
