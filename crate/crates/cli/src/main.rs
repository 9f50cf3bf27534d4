mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use toksel::checkpoint::Checkpoint;
use toksel::evaluation::{bench_forward, budget_sweep, dump_scores, EvalSetup};
use toksel::gradcheck::run_suite;
use toksel::pipeline::{pretrain_backbone, FrozenBackbone};
use toksel::scorer::ScorerParams;
use toksel::synth::Dataset;
use toksel::training::{LogRecord, Trainer};
use toksel::Error;

use config::{Overrides, RunConfig};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  usage or configuration error
  2  I/O, format or integrity error
  3  numeric failure (gradient check, backbone pretraining)

Log verbosity is read from RUST_LOG (default: info).";

#[derive(Debug, Parser)]
#[command(name = "toksel", version, about = "Learned token selection on a planted-signal task", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Token budget in (0, 1); overrides train.budget and eval.budget.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Output path (a file stem for reports written as .json and .csv).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Input dataset.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset (--out).
    GenData,
    /// Pretrain and freeze the backbone (--dataset, --out).
    PretrainBackbone,
    /// Train the scorer against a frozen backbone (--dataset, --checkpoint, --out).
    /// A checkpoint that already holds a scorer resumes from its step.
    TrainScorer,
    /// Evaluate every selector at one budget (--dataset, --checkpoint, --out).
    Eval,
    /// Evaluate every selector across the budget grid (--dataset, --checkpoint, --out).
    Sweep,
    /// Run the finite-difference gradient suite (optional --out).
    Gradcheck,
    /// Time pruned against full inference (--checkpoint, optional --out).
    Bench,
    /// Write per-token scores for the validation split (--dataset, --checkpoint, --out).
    DumpScores,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} gradient checks failed")]
    Gradcheck { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Gradcheck { .. } => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Spec(_) | Error::Budget(_) | Error::Input(_) => 1,
                Error::Io { .. }
                | Error::Format { .. }
                | Error::Integrity { .. }
                | Error::Csv(_)
                | Error::Json(_) => 2,
                Error::Dimension { .. }
                | Error::Axis { .. }
                | Error::Domain { .. }
                | Error::Pretrain { .. } => 3,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn required<'a>(flag: &str, value: &'a Option<PathBuf>) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required for this command")))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> CliResult<Dataset> {
    let data = Dataset::load(path)?;
    if data.spec.feature_dim != cfg.task.feature_dim || data.spec.classes != cfg.task.classes {
        return Err(Error::Config(format!(
            "{}: dataset has D={} C={}, config expects D={} C={}",
            path.display(),
            data.spec.feature_dim,
            data.spec.classes,
            cfg.task.feature_dim,
            cfg.task.classes
        ))
        .into());
    }
    Ok(data)
}

fn missing_section(path: &Path, what: &str) -> CliError {
    Error::Format {
        path: path.to_path_buf(),
        detail: format!("checkpoint has no {what} section"),
    }
    .into()
}

fn load_models(path: &Path) -> CliResult<(FrozenBackbone, ScorerParams)> {
    let ck = Checkpoint::load(path)?;
    let bb = ck
        .backbone
        .ok_or_else(|| missing_section(path, "backbone"))?;
    let sc = ck.scorer.ok_or_else(|| missing_section(path, "scorer"))?;
    Ok((bb, sc))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = Dataset::generate(&cfg.task, cfg.data.train, cfg.data.val)?;
    data.save(out)?;
    info!(
        "wrote {} train / {} val sequences to {}",
        data.train.len(),
        data.val.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<()> {
    let data = load_dataset(dataset, cfg)?;
    let (bb, report) = pretrain_backbone(&data, &cfg.pretrain)?;
    info!(
        "backbone val accuracy {:.4} after {} steps",
        report.val_accuracy, report.steps
    );
    let ck = Checkpoint {
        config: serde_json::json!({ "run": cfg.echo(), "pretrain": report }),
        backbone: Some(bb),
        ..Default::default()
    };
    ck.save(out)?;
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(())
}

fn train(cfg: &RunConfig, dataset: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let data = load_dataset(dataset, cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let bb = ck
        .backbone
        .clone()
        .ok_or_else(|| missing_section(checkpoint, "backbone"))?;
    let mut trainer = if ck.scorer.is_some() {
        info!("resuming from step {}", ck.step);
        Trainer::resume(cfg.train.clone(), &data, &bb, &ck)?
    } else {
        Trainer::new(cfg.train.clone(), &data, &bb)?
    };
    let log_path = with_extension(out, ".log.jsonl");
    let mut lines = String::new();
    let total = trainer.total_steps();
    trainer.run_until(total, &mut |r: &LogRecord| {
        if let LogRecord::Eval {
            step,
            val_accuracy,
            recall,
            ..
        } = r
        {
            info!("step {step}/{total}: val accuracy {val_accuracy:.4}, recall {recall:.4}");
        }
        lines.push_str(&r.to_json_line()?);
        lines.push('\n');
        Ok(())
    })?;
    std::fs::write(&log_path, lines).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    trainer.checkpoint(cfg.echo()).save(out)?;
    info!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn sweep(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
    budgets: &[f64],
) -> CliResult<()> {
    let data = load_dataset(dataset, cfg)?;
    let (bb, sc) = load_models(checkpoint)?;
    let mut setup = EvalSetup::new(&data.val, &bb, Some(&sc), cfg.seed);
    setup.timing = cfg.eval.timing;
    let mut report = budget_sweep(&setup, &cfg.eval.selectors, budgets)?;
    report.config = cfg.echo();
    report.save(out)?;
    for r in &report.rows {
        println!(
            "{:<8} b={:<5} accuracy {:.4} retention {:.4} recall {:.4}",
            r.selector.name(),
            r.budget,
            r.accuracy,
            r.retention,
            r.recall
        );
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let cases = run_suite(&cfg.gradcheck)?;
    for c in &cases {
        println!(
            "{} {:<32} rel_err {:.3e} (tol {:.0e})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.rel_error,
            c.tolerance
        );
    }
    if let Some(out) = out {
        write_json(
            out,
            &serde_json::json!({ "config": cfg.echo(), "cases": cases }),
        )?;
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Gradcheck {
            failed,
            total: cases.len(),
        });
    }
    Ok(())
}

fn bench(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> CliResult<()> {
    let (bb, sc) = load_models(checkpoint)?;
    let b = &cfg.bench;
    let report = bench_forward(
        &bb,
        &sc,
        cfg.eval.budget,
        b.seq_len,
        b.sequences,
        b.repeats,
        cfg.seed,
    )?;
    println!(
        "N={} k={}: backbone {:.3} ms -> {:.3} ms ({:.2}x), selection {:.3} ms, token FLOP ratio {:.4}",
        report.seq_len,
        report.kept,
        report.full.median_ms,
        report.pruned.median_ms,
        report.speedup,
        report.selection.median_ms,
        report.token_flop_ratio
    );
    if let Some(out) = out {
        write_json(
            out,
            &serde_json::json!({ "config": cfg.echo(), "bench": report }),
        )?;
    }
    Ok(())
}

fn scores(cfg: &RunConfig, dataset: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let data = load_dataset(dataset, cfg)?;
    let (_, sc) = load_models(checkpoint)?;
    dump_scores(&sc, &data.val, cfg.eval.budget, out)?;
    info!(
        "wrote scores for {} sequences to {}",
        data.val.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let overrides = Overrides {
        seed: cli.seed,
        budget: cli.budget,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = || required("out", &cli.out);
    let dataset = || required("dataset", &cli.dataset);
    let checkpoint = || required("checkpoint", &cli.checkpoint);
    match cli.command {
        Command::GenData => gen_data(&cfg, out()?),
        Command::PretrainBackbone => pretrain(&cfg, dataset()?, out()?),
        Command::TrainScorer => train(&cfg, dataset()?, checkpoint()?, out()?),
        Command::Eval => sweep(&cfg, dataset()?, checkpoint()?, out()?, &[cfg.eval.budget]),
        Command::Sweep => sweep(&cfg, dataset()?, checkpoint()?, out()?, &cfg.eval.budgets),
        Command::Gradcheck => gradcheck(&cfg, cli.out.as_deref()),
        Command::Bench => bench(&cfg, checkpoint()?, cli.out.as_deref()),
        Command::DumpScores => scores(&cfg, dataset()?, checkpoint()?, out()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
