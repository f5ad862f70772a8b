//! `cldl` subcommands. `main.rs` only parses arguments and maps errors to exit codes.

pub mod compare;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cldl_core::attacks::{blackbox_transfer_eval, write_results_csv, AttackConfig, AttackFamily};
use cldl_core::data::{load_cifar10, load_idx_dir, Dataset};
use cldl_core::trainer::{train, write_log_csv, TrainConfig};
use cldl_core::{diversity_probe, Checkpoint, Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Parser, Debug)]
#[command(
    name = "cldl",
    version,
    about = "Diverse ensemble training and transfer-attack evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an ensemble; writes model.ckpt and train_log.csv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Craft attacks on the surrogate and score the target on them.
    Attack {
        /// Config naming the dataset and evaluation size.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        /// Results CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "fgsm,bim,pgd,mim")]
        families: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.15,0.2,0.25")]
        epsilons: Vec<String>,
        /// Overrides the config's seed (PGD starts).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clean accuracy and diversity probes of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Optional CSV; the row is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge results CSVs into one table: rows by family then ε, one column per run.
    Compare {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Merged CSV; the aligned table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Attack {
            config,
            target,
            surrogate,
            out,
            families,
            epsilons,
            seed,
        } => {
            let sweep = parse_sweep(&families, &epsilons)?;
            cmd_attack(&config, &target, &surrogate, &out, &sweep, seed)
        }
        Command::Eval {
            config,
            target,
            out,
        } => cmd_eval(&config, &target, out.as_deref()),
        Command::Compare { results, out } => {
            let table = compare::merge_files(&results)?;
            print!("{}", table.to_text());
            if let Some(path) = out {
                table.write_csv(&path)?;
            }
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads a split of the configured dataset.
pub fn load_dataset(cfg: &TrainConfig, split: &str) -> Result<Dataset> {
    let dir = &cfg.data_dir;
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "data_dir {} does not exist",
            dir.display()
        )));
    }
    match cfg.dataset.as_str() {
        "mnist" | "fashion-mnist" => load_idx_dir(dir, split),
        "cifar10" => {
            let files: Vec<PathBuf> = if split == "train" {
                (1..=5)
                    .map(|k| dir.join(format!("data_batch_{k}.bin")))
                    .collect()
            } else {
                vec![dir.join("test_batch.bin")]
            };
            if let Some(missing) = files.iter().find(|p| !p.is_file()) {
                return Err(Error::Config(format!("missing {}", missing.display())));
            }
            load_cifar10(&files, split)
        }
        other => Err(Error::Config(format!(
            "unknown dataset `{other}` (expected mnist, fashion-mnist or cifar10)"
        ))),
    }
}

fn eval_split(cfg: &TrainConfig) -> Result<Dataset> {
    let test = load_dataset(cfg, "test")?;
    if cfg.eval_size > test.len() {
        return Err(Error::Config(format!(
            "eval_size {} exceeds the {} test examples",
            cfg.eval_size,
            test.len()
        )));
    }
    test.subset(cfg.eval_size)
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = load_dataset(&cfg, "train")?;
    log::info!(
        "training {} x {} on {} examples for {} epochs",
        cfg.members,
        cfg.arch,
        cfg.train_size,
        cfg.epochs
    );
    let result = train(&cfg, &data)?;
    fs::create_dir_all(out)?;
    Checkpoint::new(result.ensemble, result.lcm)?.save(&out.join(CHECKPOINT_FILE))?;
    write_log_csv(&out.join(TRAIN_LOG_FILE), &result.log)?;
    if let Some(last) = result.log.last() {
        log::info!("final batch loss {:.5}", last.total);
    }
    Ok(())
}

/// Families × ε, validated. An empty list on either axis is a config error.
pub fn parse_sweep(families: &[String], epsilons: &[String]) -> Result<Vec<(AttackFamily, f64)>> {
    let families: Vec<AttackFamily> = families
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let epsilons: Vec<f64> = epsilons
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|e| *e > 0.0 && e.is_finite())
                .ok_or_else(|| Error::Config(format!("bad epsilon `{s}`")))
        })
        .collect::<Result<_>>()?;
    if families.is_empty() || epsilons.is_empty() {
        return Err(Error::Config("empty attack sweep".into()));
    }
    Ok(families
        .iter()
        .flat_map(|&f| epsilons.iter().map(move |&e| (f, e)))
        .collect())
}

pub fn cmd_attack(
    config: &Path,
    target: &Path,
    surrogate: &Path,
    out: &Path,
    sweep: &[(AttackFamily, f64)],
    seed: Option<u64>,
) -> Result<()> {
    if sweep.is_empty() {
        return Err(Error::Config("empty attack sweep".into()));
    }
    let cfg = load_config(config, seed)?;
    let target = Checkpoint::load(target)?;
    let surrogate = Checkpoint::load(surrogate)?;
    let data = eval_split(&cfg)?;
    let configs = sweep
        .iter()
        .map(|&(family, eps)| {
            Ok(AttackConfig {
                seed: cfg.seed,
                ..AttackConfig::new(family, eps)?
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = blackbox_transfer_eval(
        &target.ensemble,
        &surrogate.ensemble,
        &data,
        &cfg.dataset,
        &configs,
    )?;
    write_results_csv(out, &rows)?;
    for r in &rows {
        log::info!(
            "{} eps={} accuracy {:.2}%",
            r.family,
            r.epsilon,
            r.adversarial_accuracy
        );
    }
    Ok(())
}

/// One `eval` result.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub n_examples: usize,
    pub clean_accuracy: f64,
    /// Present when the checkpoint has an LCM and at least two members.
    pub mean_jsd: Option<f64>,
    pub mean_abs_cos: Option<f64>,
}

pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset, dataset: &str) -> Result<EvalRow> {
    let pred = checkpoint.ensemble.predict_labels(data.images())?;
    let correct = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    let probe = match &checkpoint.lcm {
        Some(lcm) if checkpoint.ensemble.len() >= 2 => Some(diversity_probe(
            &checkpoint.ensemble.views(),
            &lcm.view(),
            data.images(),
            data.labels(),
        )?),
        _ => None,
    };
    Ok(EvalRow {
        dataset: dataset.to_string(),
        n_examples: data.len(),
        clean_accuracy: 100.0 * correct as f64 / data.len() as f64,
        mean_jsd: probe.map(|p| p.mean_jsd),
        mean_abs_cos: probe.map(|p| p.mean_abs_cos),
    })
}

pub fn cmd_eval(config: &Path, target: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None)?;
    let ck = Checkpoint::load(target)?;
    let data = eval_split(&cfg)?;
    let row = evaluate(&ck, &data, &cfg.dataset)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let fields = [
        row.dataset.clone(),
        row.n_examples.to_string(),
        format!("{:.4}", row.clean_accuracy),
        opt(row.mean_jsd),
        opt(row.mean_abs_cos),
    ];
    let header = [
        "dataset",
        "n_examples",
        "clean_accuracy",
        "mean_jsd",
        "mean_abs_cos",
    ];
    println!("{}", header.join(","));
    println!("{}", fields.join(","));
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        w.write_record(&fields)?;
        w.flush()?;
    }
    Ok(())
}

/// Exit status for an error: 2 for configuration problems, 3 for numerical aborts, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NumericalAbort { .. } => 3,
        _ => 1,
    }
}
