//! Command-line driver: synthesize datasets, train single models, run the
//! Vanilla-vs-matching comparison protocol, sweep ablation suites, evaluate
//! checkpoints, and grid-search the loss weight.
//!
//! Exit codes: 0 success, 2 configuration problems, 3 training divergence
//! (non-finite loss), 4 I/O failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flac_core::config::ExperimentConfig;
use flac_core::data::{generate, read_dataset, write_dataset, write_manifest, DatasetSpec};
use flac_core::experiment::{
    ablate, gridsearch_alpha, run_protocol, run_variant, AblationSuite, ExperimentError,
    DEFAULT_ALPHA_GRID,
};
use flac_core::metrics::{evaluate, EvalReport, QmiConfig};
use flac_core::train::{load_checkpoint, save_checkpoint, write_history};

#[derive(Parser)]
#[command(
    name = "flac",
    version,
    about = "Fairness-aware representation learning on a synthetic biased benchmark"
)]
struct Cli {
    /// Experiment configuration file (INI-style key = value sections).
    /// Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the configuration's base seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Override the configuration's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Emit machine-readable JSON on stdout instead of text tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset and write it (binary + JSON manifest) to the
    /// output directory.
    Generate,
    /// Train a single model under the configured settings and write its
    /// history, checkpoint, and evaluation report.
    Train,
    /// Full comparison protocol: Vanilla (α = 0) and the matching-loss model,
    /// repeated over seeds, with summary tables.
    Run,
    /// Run one ablation suite against the base configuration.
    Ablate {
        /// One of: condition_terms, kernels, divergences, alpha_grid, q_sweep.
        #[arg(long, value_name = "NAME")]
        suite: String,
    },
    /// Evaluate a checkpoint against a dataset file.
    Eval {
        /// Checkpoint written by `train` or `run`.
        checkpoint: PathBuf,
        /// Dataset file written by `generate`.
        dataset: PathBuf,
    },
    /// Try each α under the full repetition protocol and report the best by
    /// mean unbiased accuracy.
    GridsearchAlpha {
        /// Comma-separated α values (default: 0.25,0.5,1,2,4).
        #[arg(long, value_delimiter = ',', value_name = "A,B,..")]
        alphas: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_text(report: &EvalReport) -> String {
    format!(
        "acc_overall       {:.4}\n\
         acc_unbiased      {:.4}\n\
         acc_bias_conflict {:.4}\n\
         qmi               {:.6}\n\
         p_rule            {:.4}\n\
         dfpr              {:.4}\n\
         dfnr              {:.4}\n\
         mistreatment      {:.4}",
        report.acc_overall,
        report.acc_unbiased,
        report.acc_bias_conflict,
        report.qmi,
        report.p_rule,
        report.dfpr,
        report.dfnr,
        report.mistreatment
    )
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| ExperimentError::Io(std::io::Error::other(e)))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Generate => {
            let cfg = load_config(&cli)?;
            let spec = DatasetSpec {
                seed: cfg.base_seed,
                ..cfg.dataset
            };
            let ds = generate(&spec)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let data_path = cfg.output_dir.join("colorgrid.cgrd");
            let manifest_path = cfg.output_dir.join("manifest.json");
            write_dataset(&data_path, &ds)?;
            write_manifest(&manifest_path, &ds)?;
            if cli.json {
                print_json(&serde_json::json!({
                    "dataset": data_path,
                    "manifest": manifest_path,
                    "n_samples": ds.len(),
                    "spec": spec,
                }))?;
            } else {
                println!("wrote {} samples to {}", ds.len(), data_path.display());
                println!("manifest at {}", manifest_path.display());
            }
            Ok(())
        }
        Command::Train => {
            let mut cfg = load_config(&cli)?;
            cfg.repetitions = 1;
            let (rows, artifacts) = run_variant(&cfg, "model", &cfg.train.clone())?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            for artifact in &artifacts {
                write_history(
                    &cfg.output_dir
                        .join(format!("history_{}.csv", artifact.label)),
                    &artifact.history,
                )?;
                save_checkpoint(
                    &cfg.output_dir
                        .join(format!("checkpoint_{}.flck", artifact.label)),
                    &artifact.model,
                    &artifact.train_config,
                )?;
            }
            if cli.json {
                print_json(&rows)?;
            } else {
                println!("{}", report_text(&rows[0].report));
                println!("artifacts in {}", cfg.output_dir.display());
            }
            Ok(())
        }
        Command::Run => {
            let cfg = load_config(&cli)?;
            let output = run_protocol(&cfg)?;
            output.write_all()?;
            if cli.json {
                print_json(&output.record)?;
            } else {
                print!("{}", output.record.summary_table());
                println!("artifacts in {}", cfg.output_dir.display());
            }
            Ok(())
        }
        Command::Ablate { suite } => {
            let cfg = load_config(&cli)?;
            let suite: AblationSuite = suite.parse()?;
            let table = ablate(suite, &cfg)?;
            table.write_to(&cfg.output_dir)?;
            if cli.json {
                print_json(&table)?;
            } else {
                print!("{}", table.table());
                println!("artifacts in {}", cfg.output_dir.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
        } => {
            let (model, _train_cfg) = load_checkpoint(checkpoint)?;
            let ds = read_dataset(dataset)?;
            let report = evaluate(&model, &ds, &QmiConfig::default())?;
            if cli.json {
                print_json(&report)?;
            } else {
                println!("{}", report_text(&report));
            }
            Ok(())
        }
        Command::GridsearchAlpha { alphas } => {
            let cfg = load_config(&cli)?;
            let grid = alphas
                .clone()
                .unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec());
            let outcome = gridsearch_alpha(&cfg, &grid)?;
            outcome.table.write_to(&cfg.output_dir)?;
            if cli.json {
                print_json(&outcome)?;
            } else {
                print!("{}", outcome.table.table());
                println!("best alpha: {}", outcome.best_alpha);
            }
            Ok(())
        }
    }
}
