//! Command-line front end. The `spcon` binary is a thin wrapper around
//! [`run`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{
    pace_report, prepare_run_dir, probe_batches, run_ablation, write_pace_csv, RunSummary, Variant,
};
use crate::model::ParamModel;
use crate::synth::{generate_dataset, misaligned_pair_fraction, Dataset};
use crate::train::{evaluate_dice, pretrain, train_segmentation, write_history_csv, ContrastiveObjective};
use crate::verify::{run_all, VerifyContext};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } => EXIT_DATA,
        Error::VerificationFailure(_) => EXIT_VERIFY,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "spcon", version, about = "Self-paced meta-label contrastive learning at desk scale")]
pub struct Cli {
    /// TOML configuration file; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set data.noise_level=0.5`.
    /// Applied after the file; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenerateData {
        /// Dataset directory (default: `<output root>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pre-training of the encoder and projection head.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Disable self-paced weighting.
        #[arg(long)]
        no_self_paced: bool,
    },
    /// Segmentation training, optionally from a pre-trained checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint whose encoder and head initialize the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the ablation ladder over the configured seeds.
    Ablation {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated variant names (default: the full ladder).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Run the property suites.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pace and weight trajectories on a frozen model.
    PaceReport {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frozen model (default: a fresh model from the run seed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dice of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Unsup,
    Meta,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?.with_env_output_root())
}

fn data_dir(cfg: &ExperimentConfig, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.output.root.join("data"))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Data(format!(
            "no dataset at {} (run `spcon generate-data` first)",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable progress to stdout.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::InvalidConfig(e.to_string())),
    };
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let root = cfg.output.root.clone();
    match &cli.command {
        Command::GenerateData { out } => {
            let dir = data_dir(&cfg, out);
            let data = generate_dataset(&cfg.data, cfg.seed)?;
            data.save(&dir)?;
            prepare_run_dir(&cfg, &dir)?;
            let mut s = RunSummary::new("generate-data", cfg.seed);
            s.metrics.insert("patients".into(), cfg.data.num_patients() as f64);
            s.metrics.insert(
                "misaligned_pair_fraction".into(),
                misaligned_pair_fraction(&data, &data.splits.train, 0.5),
            );
            s.files.push("manifest.json".into());
            s.write(&dir)?;
            println!("wrote {} volumes to {}", data.volumes.len(), dir.display());
        }
        Command::Pretrain {
            data,
            out,
            objective,
            no_self_paced,
        } => {
            let dataset = load_data(&data_dir(&cfg, data))?;
            let mut pcfg = cfg.pretrain.clone();
            if let Some(o) = objective {
                pcfg.objective = match o {
                    ObjectiveArg::Unsup => ContrastiveObjective::Unsup,
                    ObjectiveArg::Meta => ContrastiveObjective::Meta,
                };
            }
            if *no_self_paced {
                pcfg.self_paced = false;
            }
            let dir = out.clone().unwrap_or_else(|| root.join("pretrain"));
            prepare_run_dir(&cfg, &dir)?;
            let model = ParamModel::new(cfg.model.clone(), cfg.seed)?;
            let state = pretrain(model, &dataset, &pcfg, &cfg.self_paced, cfg.seed)?;
            state.model.save(&dir.join("checkpoint.json"))?;
            write_history_csv(&state.history, &dir.join("loss_history.csv"))?;
            let mut s = RunSummary::new("pretrain", cfg.seed);
            if let Some(last) = state.history.last() {
                s.metrics.insert("final_loss".into(), last.total);
                s.metrics.insert("final_mean_w".into(), last.mean_w);
            }
            s.metrics.insert("final_gamma".into(), state.gamma);
            s.files = vec!["checkpoint.json".into(), "loss_history.csv".into()];
            s.write(&dir)?;
            println!("pre-trained {} epochs; checkpoint in {}", pcfg.epochs, dir.display());
        }
        Command::Train { data, out, init } => {
            let dataset = load_data(&data_dir(&cfg, data))?;
            let mut model = ParamModel::new(cfg.model.clone(), cfg.seed)?;
            if let Some(path) = init {
                model.copy_encoder_from(&ParamModel::load(path)?)?;
            }
            let dir = out.clone().unwrap_or_else(|| root.join("train"));
            prepare_run_dir(&cfg, &dir)?;
            let state = train_segmentation(model, &dataset, &cfg.semisup, &cfg.self_paced, cfg.seed)?;
            state.model.save(&dir.join("checkpoint.json"))?;
            write_history_csv(&state.history, &dir.join("loss_history.csv"))?;
            let mut s = RunSummary::new("train", cfg.seed);
            if !dataset.splits.val.is_empty() {
                s.metrics.insert("val_dice".into(), evaluate_dice(&state.model, &dataset, &dataset.splits.val)?.mean);
            }
            let test = evaluate_dice(&state.model, &dataset, &dataset.splits.test)?;
            s.metrics.insert("test_dice".into(), test.mean);
            s.files = vec!["checkpoint.json".into(), "loss_history.csv".into()];
            s.write(&dir)?;
            println!("test Dice {:.4}; outputs in {}", test.mean, dir.display());
        }
        Command::Ablation { data, out, variants } => {
            let dataset = load_data(&data_dir(&cfg, data))?;
            let mut variants: Vec<Variant> = if variants.is_empty() {
                Variant::LADDER.to_vec()
            } else {
                variants
                    .iter()
                    .map(|n| {
                        Variant::from_name(n.trim())
                            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{n}`")))
                    })
                    .collect::<Result<_>>()?
            };
            variants.sort();
            variants.dedup();
            let dir = out.clone().unwrap_or_else(|| root.join("ablation"));
            prepare_run_dir(&cfg, &dir)?;
            let (table, _) = run_ablation(&cfg, &dataset, &variants)?;
            table.write_csv(&dir.join("ablation.csv"))?;
            let text = table.to_string();
            std::fs::write(dir.join("ablation.txt"), &text).map_err(|e| Error::io(dir.join("ablation.txt"), e))?;
            let mut s = RunSummary::new("ablation", cfg.seed);
            for r in &table.rows {
                s.metrics.insert(format!("{}.mean", r.variant), r.mean);
                s.metrics.insert(format!("{}.std", r.variant), r.std);
            }
            if let Some(full) = table.row(Variant::FullSupervision) {
                let dominates = table.rows.iter().all(|r| r.mean <= full.mean);
                s.metrics.insert("full_supervision_dominates".into(), f64::from(u8::from(dominates)));
                if !dominates {
                    println!("note: a variant's mean Dice exceeds full supervision");
                }
            }
            s.files = vec!["ablation.csv".into(), "ablation.txt".into()];
            s.write(&dir)?;
            print!("{text}");
        }
        Command::Verify { out } => {
            let dir = out.clone().unwrap_or_else(|| root.join("verify"));
            prepare_run_dir(&cfg, &dir)?;
            let report = run_all(&VerifyContext {
                seed: cfg.seed,
                ..Default::default()
            });
            for s in &report.suites {
                let status = if s.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<22} {:>6} checks {:>8.2}s", s.name, s.checks, s.seconds);
                for f in &s.failures {
                    println!("    {f}");
                }
            }
            let path = dir.join("verify.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
            report.into_result()?;
        }
        Command::PaceReport { data, out, checkpoint } => {
            let dataset = load_data(&data_dir(&cfg, data))?;
            let model = match checkpoint {
                Some(p) => ParamModel::load(p)?,
                None => ParamModel::new(cfg.model.clone(), cfg.seed)?,
            };
            let dir = out.clone().unwrap_or_else(|| root.join("pace_report"));
            prepare_run_dir(&cfg, &dir)?;
            let batches = probe_batches(&cfg, &dataset, &model)?;
            let rows = pace_report(&cfg, &batches)?;
            write_pace_csv(&rows, &dir.join("pace_report.csv"))?;
            let mut s = RunSummary::new("pace-report", cfg.seed);
            s.metrics.insert("rows".into(), rows.len() as f64);
            s.files = vec!["pace_report.csv".into()];
            s.write(&dir)?;
            let mid = cfg.pace_report.max_epoch / 2;
            for r in rows.iter().filter(|r| r.epoch == mid) {
                println!(
                    "epoch {mid:>3} {:<6} p={:<4} gamma={:>8.4} mean_w={:.4}",
                    r.regularizer.name(),
                    r.p,
                    r.gamma,
                    r.mean_w
                );
            }
        }
        Command::Eval { checkpoint, data, split } => {
            let dataset = load_data(&data_dir(&cfg, data))?;
            let model = ParamModel::load(checkpoint)?;
            let patients = match split {
                SplitArg::Train => &dataset.splits.train,
                SplitArg::Val => &dataset.splits.val,
                SplitArg::Test => &dataset.splits.test,
            };
            if patients.is_empty() {
                return Err(Error::Data("selected split is empty".into()));
            }
            let report = evaluate_dice(&model, &dataset, patients)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
