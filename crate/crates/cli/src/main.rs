//! `flmd`: generate synthetic cohorts, run the two-stage pipeline and the
//! sweep experiments, and aggregate their reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flmd::experiments::{self, ExperimentConfig};
use flmd::FlmdError;

#[derive(Parser)]
#[command(
    name = "flmd",
    version,
    about = "Fair longitudinal deconfounder experiments"
)]
struct Cli {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for replicates and sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, its ground truth and schema.
    Generate,
    /// Normalize, fit both stages and evaluate on the test split.
    Pipeline,
    /// Sweep the fraction of undisturbed training demographics.
    Q2Disturb,
    /// Sweep group ratios of the training split.
    Q2Imbalance,
    /// Sweep the latent width on semi-synthetic data with the confounder hidden.
    Q3Sweep,
    /// Aggregate report rows into summary.csv and plotdata.json.
    Report,
}

fn config(cli: &Cli) -> flmd::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            FlmdError::Io { .. } | FlmdError::Parse { .. } => FlmdError::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.jobs == 0 {
        return Err(FlmdError::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[experiments::ReportRow]) {
    for r in rows {
        let probe = r
            .probe_auc
            .map(|p| format!(" probe_auc={p:.4}"))
            .unwrap_or_default();
        println!(
            "{} {} r{}: auc={:.4} hd={:.2} cf_gap={:.4}{probe} ({:.1}s)",
            r.experiment, r.sweep, r.replicate, r.auc, r.hd, r.cf_gap, r.wall_seconds
        );
    }
}

fn run(cli: &Cli) -> flmd::Result<()> {
    let cfg = config(cli)?;
    let jobs = cli.jobs;
    match cli.command {
        Command::Generate => {
            let source = experiments::cmd_generate(&cfg)?;
            println!(
                "wrote {} patients to {}",
                source.dataset.len(),
                cfg.out_dir.display()
            );
        }
        Command::Pipeline => print_rows(&experiments::cmd_pipeline(&cfg, jobs)?),
        Command::Q2Disturb => print_rows(&experiments::cmd_q2_disturb(&cfg, jobs)?),
        Command::Q2Imbalance => print_rows(&experiments::cmd_q2_imbalance(&cfg, jobs)?),
        Command::Q3Sweep => print_rows(&experiments::cmd_q3_sweep(&cfg, jobs)?),
        Command::Report => {
            let lines = experiments::cmd_report(&cfg.out_dir)?;
            println!(
                "summarized {} series into {}",
                lines.len(),
                cfg.out_dir.join("summary.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
