//! `stockrank`: label, train, evaluate, backtest and reproduce from the command line.
//!
//! Exit codes: 0 on success, 1 for a bad config or arguments (nothing is
//! written), 2 for a failure while running.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stockrank::backbone::BackboneParams;
use stockrank::backtest::{cumulative_return, write_ledger_csv};
use stockrank::config::{ExperimentConfig, KEYS};
use stockrank::cqb::write_epoch_log;
use stockrank::experiment::{
    backtest_test, evaluate_days, load_panel, prepare, reproduce, train_on, training_ks,
    write_ablation_table, write_labels, ABLATIONS,
};
use stockrank::metrics::write_k_histogram;
use stockrank::Error;

#[derive(Parser)]
#[command(
    name = "stockrank",
    version,
    about = "Multi-task stock ranking with momentum labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file; later sources override earlier ones.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write momentum (or rise/fall) labels for every labelled cell.
    Label {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.json and epoch_log.csv into `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split; writes report.json and k_histogram.csv.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-N daily backtest of a checkpoint on the test split; writes ledger.csv.
    Backtest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation cell and write ablation.csv.
    Reproduce {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of cells (default: all).
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List config keys with their defaults.
    Keys,
}

enum Failure {
    Config(Error),
    Run(Error),
}

fn resolve(
    args: &ConfigArgs,
    base: Option<BTreeMap<String, String>>,
) -> Result<ExperimentConfig, Failure> {
    let inner = || -> stockrank::Result<ExperimentConfig> {
        let mut map = base.unwrap_or_else(ExperimentConfig::defaults);
        if let Some(p) = &args.config {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            ExperimentConfig::apply_text(&mut map, &text)?;
        }
        for kv in &args.set {
            ExperimentConfig::apply_override(&mut map, kv)?;
        }
        ExperimentConfig::from_map(map)
    };
    inner().map_err(Failure::Config)
}

fn load_checkpoint(path: &Path) -> Result<(BackboneParams, BTreeMap<String, String>), Failure> {
    BackboneParams::load(path).map_err(Failure::Config)
}

fn run_err(e: Error) -> Failure {
    Failure::Run(e)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(Error::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes `header` followed by whatever `body` emits.
fn write_with_header(
    path: &Path,
    header: &str,
    body: impl FnOnce(&mut Vec<u8>) -> stockrank::Result<()>,
) -> Result<(), Failure> {
    let mut buf = header.as_bytes().to_vec();
    body(&mut buf).map_err(run_err)?;
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| run_err(e.into()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Keys => {
            for (k, v, desc) in KEYS {
                println!("{k:<24} {v:<16} {desc}");
            }
        }
        Command::Label { cfg, out } => {
            let cfg = resolve(&cfg, None)?;
            let panel = load_panel(&cfg).map_err(run_err)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let mut n = 0;
            write_with_header(&out, &cfg.provenance_header(), |buf| {
                n = write_labels(&cfg, &panel, buf)?;
                Ok(())
            })?;
            println!("wrote {n} labels to {}", out.display());
        }
        Command::Train { cfg, out } => {
            let cfg = resolve(&cfg, None)?;
            let data = prepare(&cfg, load_panel(&cfg).map_err(run_err)?).map_err(run_err)?;
            let fit = train_on(&cfg, &data).map_err(run_err)?;
            create_dir(&out)?;
            fit.params
                .save(out.join("model.json"), cfg.resolved())
                .map_err(run_err)?;
            write_with_header(
                &out.join("epoch_log.csv"),
                &cfg.provenance_header(),
                |buf| write_epoch_log(&fit.log, buf),
            )?;
            println!(
                "trained {} epochs; best epoch {} with validation IC {:.4}",
                fit.epochs_run, fit.best_epoch, fit.best_valid_ic
            );
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            out,
        } => {
            let (params, stored) = load_checkpoint(&checkpoint)?;
            let cfg = resolve(&cfg, Some(stored))?;
            let data = prepare(&cfg, load_panel(&cfg).map_err(run_err)?).map_err(run_err)?;
            let ks = training_ks(&cfg, &data).map_err(run_err)?;
            let report =
                evaluate_days(&params, &data.test, &cfg.precision_ns, &ks).map_err(run_err)?;
            create_dir(&out)?;
            write_json(
                &out.join("report.json"),
                &serde_json::json!({ "config": cfg.resolved(), "report": report }),
            )?;
            write_with_header(
                &out.join("k_histogram.csv"),
                &cfg.provenance_header(),
                |buf| write_k_histogram(&report.k_histogram, buf),
            )?;
            println!(
                "test IC {:.4} RankIC {:.4} over {} days",
                report.ic, report.rank_ic, report.days
            );
        }
        Command::Backtest {
            cfg,
            checkpoint,
            out,
        } => {
            let (params, stored) = load_checkpoint(&checkpoint)?;
            let cfg = resolve(&cfg, Some(stored))?;
            let data = prepare(&cfg, load_panel(&cfg).map_err(run_err)?).map_err(run_err)?;
            let ledger = backtest_test(&cfg, &params, &data).map_err(run_err)?;
            let total = cumulative_return(&ledger).map_err(run_err)?;
            create_dir(&out)?;
            write_with_header(&out.join("ledger.csv"), &cfg.provenance_header(), |buf| {
                write_ledger_csv(&ledger, buf)
            })?;
            println!(
                "top-{} cumulative return {:.4} over {} days",
                cfg.backtest_n,
                total,
                ledger.dates.len()
            );
        }
        Command::Reproduce { cfg, cells, out } => {
            let cfg = resolve(&cfg, None)?;
            let cells: Vec<&str> = if cells.is_empty() {
                ABLATIONS.to_vec()
            } else {
                cells.iter().map(String::as_str).collect()
            };
            if let Some(bad) = cells.iter().find(|c| !ABLATIONS.contains(c)) {
                return Err(Failure::Config(Error::config(
                    "--cells",
                    format!(
                        "unknown cell `{bad}`; expected one of {}",
                        ABLATIONS.join(", ")
                    ),
                )));
            }
            let rows = reproduce(&cfg, &cells).map_err(run_err)?;
            create_dir(&out)?;
            write_with_header(&out.join("ablation.csv"), &cfg.provenance_header(), |buf| {
                write_ablation_table(&rows, buf)
            })?;
            for r in &rows {
                println!("{:<12} IC {:.4} RankIC {:.4}", r.name, r.ic, r.rank_ic);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
