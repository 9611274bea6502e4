use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbp::config::RunConfig;
use sbp::data::{generate_synthetic, load_dataset, save_dataset, SyntheticData, SyntheticSpec};
use sbp::experiment::{ablation, seed_datasets, sweep, write_sweep_csv, SweepParam, Variant};
use sbp::metrics::{evaluate, CSV_HEADER};
use sbp::trainer::{history_csv, load_checkpoint, save_checkpoint, Trainer};
use sbp::{Error, Result};

#[derive(Parser)]
#[command(name = "sbp", version, about = "Two-branch bilinear classifier with a hierarchy-penalized loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into <out>/train and <out>/eval.
    GenData {
        /// JSON generator spec; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network, writing checkpoint.json and history.csv to <out>.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, keeping its configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Set the end-to-end epoch budget (also applies when resuming).
        #[arg(long)]
        epochs: Option<usize>,
        /// Config override, e.g. train.penalty.b=2.5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the eval split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and the full pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Perturb one check's analytic gradient; it must then fail.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Sweep the penalty b or the loss ratio r over several seeds.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use this dataset for every seed instead of generating one per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the baseline, both single-component variants and the full model.
    Ablation {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Subset of baseline, no-gce, no-two-branch, full (default: all).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Write the per-seed reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
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
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(overrides)
}

fn load_splits(dir: &Path) -> Result<SyntheticData> {
    let train = load_dataset(&dir.join("train"))?;
    let eval = load_dataset(&dir.join("eval"))?;
    if train.tree != eval.tree || train.shape != eval.shape {
        return Err(Error::InconsistentLabels("train and eval splits disagree on tree or shape".into()));
    }
    Ok(SyntheticData { train, eval })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `Ok(false)` signals a failed numerical check.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            let data = generate_synthetic(&spec)?;
            save_dataset(&data.train, &out.join("train"))?;
            save_dataset(&data.eval, &out.join("eval"))?;
            println!(
                "train {} eval {} coarse {} fine {}",
                data.train.len(),
                data.eval.len(),
                data.tree().num_coarse(),
                data.tree().num_fine()
            );
            Ok(true)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            epochs,
            overrides,
        } => {
            let splits = load_splits(&data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    ckpt.check_dataset(&splits.train)?;
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => {
                    let cfg = run_config(config.as_deref(), &overrides)?;
                    Trainer::new(cfg.trunk, splits.train.tree.clone(), cfg.train)?
                }
            };
            if let Some(n) = epochs {
                trainer.set_epochs(n)?;
            }
            create_dir(&out)?;
            let total = trainer.config().total_epochs();
            while !trainer.is_finished() {
                let r = trainer.train_epoch(&splits.train, &splits.eval)?;
                println!(
                    "epoch {}/{total} loss {:.6} fine {:.4} coarse {:.4} violations {:.4}",
                    r.epoch + 1,
                    r.train_loss,
                    r.fine_acc,
                    r.coarse_acc,
                    r.violation_rate
                );
            }
            save_checkpoint(&trainer.checkpoint(), &out.join("checkpoint.json"))?;
            write(&out.join("history.csv"), &history_csv(trainer.history()))?;
            Ok(true)
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let eval = load_dataset(&data.join("eval"))?;
            ckpt.check_dataset(&eval)?;
            let net = ckpt.network()?;
            let report = evaluate(&net, &eval.samples, &eval.tree)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("report.json"), &(json + "\n"))?;
                write(&dir.join("report.csv"), &format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
            }
            Ok(true)
        }
        Command::Gradcheck { tol, seeds, corrupt } => {
            let entries = sbp::checks::run_suite(tol, seeds, corrupt.as_deref())?;
            for e in &entries {
                println!(
                    "{} {:<22} checked {:>3} skipped {:>3} max_rel_error {:.3e}",
                    if e.passed { "PASS" } else { "FAIL" },
                    e.name,
                    e.checked,
                    e.skipped,
                    e.max_rel_error
                );
            }
            Ok(entries.iter().all(|e| e.passed))
        }
        Command::Sweep {
            param,
            values,
            seeds,
            config,
            data,
            overrides,
            out,
        } => {
            let param: SweepParam = param.parse()?;
            let cfg = run_config(config.as_deref(), &overrides)?;
            let datasets = match data {
                Some(dir) => vec![load_splits(&dir)?; seeds],
                None => seed_datasets(&cfg, seeds)?,
            };
            let rows = sweep(&cfg, param, &values, &datasets)?;
            for r in &rows {
                println!(
                    "{}={:<6} fine {:.4} ± {:.4} violations {:.4}",
                    r.param, r.value, r.summary.mean_fine_top1, r.summary.std_fine_top1, r.summary.mean_violation_rate
                );
            }
            write_sweep_csv(&rows, &out)?;
            Ok(true)
        }
        Command::Ablation {
            seeds,
            variants,
            config,
            overrides,
            out,
        } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            let data = seed_datasets(&cfg, seeds)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
            };
            let rows = ablation(&cfg, &variants, &data)?;
            for r in &rows {
                let fine: Vec<String> = r.reports.iter().map(|x| format!("{:.3}", x.fine_top1)).collect();
                println!(
                    "{:<14} fine {:.4} ± {:.4} violations {:.4}  [{}]",
                    r.variant.to_string(),
                    r.summary.mean_fine_top1,
                    r.summary.std_fine_top1,
                    r.summary.mean_violation_rate,
                    fine.join(" ")
                );
            }
            if let Some(path) = out {
                write(&path, &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?;
            }
            Ok(true)
        }
    }
}
