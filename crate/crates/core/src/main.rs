//! `cfnet`: stage-by-stage access to the confusion-subnet pipeline.
//!
//! Exit codes: 0 success, 1 usage error (bad flag, bad config, missing
//! input file), 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use confusion_subnets::confusion::{ConfusionCsv, CsvKind, DEFAULT_THRESHOLD};
use confusion_subnets::data::{generate, load_dataset, save_dataset};
use confusion_subnets::loss::{run_gradcheck, GradcheckConfig};
use confusion_subnets::pipeline::{
    arm_seed, evaluate_arm, head0_confusion, retrain_head0, run_experiment, train_baseline, train_subnets,
    DataSource, HeadLoss, CONFIG_KEYS,
};
use confusion_subnets::{Arm, ConfusionMatrix, Dataset, Error, ExperimentConfig, GroupPartition, ModelState};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "cfnet", version, about = "Confusing-group subnets: train, fuse, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (.cfds)
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train encoder + head 0 with cross-entropy
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Confusion matrix of head 0 on a dataset, as CSV
    Confusion {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write row-normalized rates instead of counts
        #[arg(long)]
        normalized: bool,
    },
    /// Confusing groups of a confusion CSV, as a partition file
    Groups {
        #[arg(long)]
        confusion: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Train one head per group on the frozen encoder
    TrainSubnets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LossKind::Ce)]
        loss: LossKind,
        /// Counts CSV the improved loss derives its weights from
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// With `--loss newce`: only retrain head 0
        #[arg(long)]
        head0_only: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fuse all heads and score against the labels
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Groups to measure intra-group mass on; defaults to the model's own
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class IoU as two columns
        #[arg(long)]
        plot_data: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// The four-arm ablation, end to end
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic vs finite-difference gradient of the improved loss
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Inclusive class-count range, `a..b`
        #[arg(long, default_value = "2..12")]
        k: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,5")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossKind {
    Ce,
    Newce,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Subcommands whose settings come from an experiment config.
const CONFIGURABLE: &[&str] = &["generate", "train-baseline", "train-subnets", "evaluate", "ablate"];

fn command() -> clap::Command {
    CONFIGURABLE.iter().fold(Cli::command(), |cmd, name| {
        cmd.mut_subcommand(*name, |sub| {
            CONFIG_KEYS.iter().fold(sub, |sub, key| {
                sub.arg(
                    Arg::new(*key)
                        .long(*key)
                        .value_name("VALUE")
                        .allow_negative_numbers(true)
                        .help_heading("Config overrides"),
                )
            })
        })
    })
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let overrides = matches.subcommand().map(|(_, m)| m);
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn input(path: &Path) -> CliResult<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("input file not found: {}", path.display())))
    }
}

/// Defaults, then the config file, then flags.
fn experiment_config(file: Option<&Path>, overrides: Option<&ArgMatches>) -> CliResult<ExperimentConfig> {
    let mut cfg = match file {
        Some(path) => ExperimentConfig::load(input(path)?).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = overrides {
        for key in CONFIG_KEYS {
            if let Some(value) = m.get_one::<String>(key) {
                cfg.set(key, value).map_err(|e| Failure::Usage(format!("--{key}: {e}")))?;
            }
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(input(path)?)?)
}

fn load_model(path: &Path) -> CliResult<ModelState> {
    Ok(ModelState::load(input(path)?)?)
}

fn counts_csv(path: &Path) -> CliResult<ConfusionMatrix> {
    match ConfusionCsv::load(input(path)?)? {
        ConfusionCsv::Counts { matrix, .. } => Ok(matrix),
        ConfusionCsv::Normalized { .. } => Err(Failure::Usage(format!(
            "{} holds normalized rates; the improved loss needs counts",
            path.display()
        ))),
    }
}

fn parse_class_range(text: &str) -> CliResult<(usize, usize)> {
    let bad = || Failure::Usage(format!("--k expects `a..b`, got `{text}`"));
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo < 2 || hi < lo {
        return Err(Failure::Usage(format!("class range {lo}..{hi} needs 2 <= a <= b")));
    }
    Ok((lo, hi))
}

fn run(command: Command, overrides: Option<&ArgMatches>) -> CliResult<()> {
    match command {
        Command::Generate { out, config } => {
            let cfg = experiment_config(config.as_deref(), overrides)?;
            let DataSource::Synthetic(spec) = &cfg.data else {
                return Err(Failure::Usage("`generate` needs a synthetic spec, not `dataset`".into()));
            };
            let data = generate(spec)?;
            save_dataset(&data, &out)?;
            println!(
                "{} samples, {} classes, {} features -> {}",
                data.len(),
                data.class_count(),
                data.feature_dim(),
                out.display()
            );
        }
        Command::TrainBaseline { data, out, config } => {
            let cfg = experiment_config(config.as_deref(), overrides)?;
            let train = load_data(&data)?;
            let (model, report) = train_baseline(
                &train,
                cfg.hidden_dim,
                HeadLoss::CrossEntropy,
                &cfg.phase1,
                arm_seed(cfg.seed, Arm::CeOnly),
            )?;
            model.save(&out)?;
            if let Some(last) = report.epoch_losses.last() {
                println!("final epoch loss {last:.6}");
            }
            println!("model -> {}", out.display());
        }
        Command::Confusion {
            model,
            data,
            out,
            normalized,
        } => {
            let model = load_model(&model)?;
            let data = load_data(&data)?;
            let cm = head0_confusion(&model, &data)?;
            let kind = if normalized { CsvKind::Normalized } else { CsvKind::Counts };
            cm.save_csv(&out, data.class_names(), kind)?;
            println!("{} confusion ({} samples) -> {}", kind.as_str(), cm.total(), out.display());
        }
        Command::Groups { confusion, out, threshold } => {
            let csv = ConfusionCsv::load(input(&confusion)?)?;
            let partition = confusion_subnets::confusion::partition_groups(&csv.rates(), threshold)
                .map_err(|e| match e {
                    Error::Config(msg) => Failure::Usage(msg),
                    other => Failure::Runtime(other),
                })?;
            partition.save(&out)?;
            for g in partition.groups() {
                println!("{:?}", g.classes());
            }
            println!("{} group(s) -> {}", partition.groups().len(), out.display());
        }
        Command::TrainSubnets {
            model,
            data,
            partition,
            out,
            loss,
            confusion,
            head0_only,
            config,
        } => {
            let cfg = experiment_config(config.as_deref(), overrides)?;
            let mut model = load_model(&model)?;
            let train = load_data(&data)?;
            let partition = GroupPartition::load(input(&partition)?, model.class_count())?;
            match loss {
                LossKind::Ce => {
                    if head0_only {
                        return Err(Failure::Usage("--head0-only needs --loss newce".into()));
                    }
                    let seed = arm_seed(cfg.seed, Arm::CeSubnets);
                    train_subnets(&mut model, &train, &partition, HeadLoss::CrossEntropy, &cfg.phase2, seed)?;
                }
                LossKind::Newce => {
                    let path = confusion.ok_or_else(|| Failure::Usage("--loss newce needs --confusion".into()))?;
                    let cm = counts_csv(&path)?;
                    let improved = HeadLoss::Improved {
                        lambda: cfg.lambda,
                        diagonal_floor: cfg.diagonal_floor,
                        confusion: &cm,
                    };
                    retrain_head0(&mut model, &train, improved, &cfg.phase2, arm_seed(cfg.seed, Arm::NewCeOnly))?;
                    if !head0_only {
                        let seed = arm_seed(cfg.seed, Arm::NewCeSubnets);
                        train_subnets(&mut model, &train, &partition, improved, &cfg.phase2, seed)?;
                    }
                }
            }
            model.save(&out)?;
            println!("{} head(s) -> {}", model.head_count(), out.display());
        }
        Command::Evaluate {
            model,
            data,
            partition,
            out,
            plot_data,
            config,
        } => {
            let cfg = experiment_config(config.as_deref(), overrides)?;
            let model = load_model(&model)?;
            let data = load_data(&data)?;
            let partition = match partition {
                Some(path) => GroupPartition::load(input(&path)?, model.class_count())?,
                None => GroupPartition::new(
                    model.class_count(),
                    model.groups().into_iter().cloned().collect(),
                    cfg.threshold,
                )?,
            };
            let report = evaluate_arm(&model, &data, &partition, &cfg.fusion_config())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            report.save_json(&out.join("report.json"))?;
            report
                .confusion
                .save_csv(&out.join("confusion.csv"), data.class_names(), CsvKind::Counts)?;
            if plot_data {
                std::fs::write(out.join("iou.txt"), report.plot_data()).map_err(|e| Error::Io {
                    path: out.join("iou.txt"),
                    source: e,
                })?;
            }
            println!(
                "miou {:.6}  accuracy {:.6}  intra_group_mass {:.6}",
                report.miou,
                report.accuracy,
                report.total_intra_group_mass()
            );
        }
        Command::Ablate { config } => {
            let cfg = experiment_config(config.as_deref(), overrides)?;
            let result = run_experiment(&cfg)?;
            println!("groups: {}", result.partition.groups().len());
            print!("{}", result.table());
            println!("artifacts -> {}", cfg.output_dir.display());
        }
        Command::Gradcheck { trials, k, lambdas, seed } => {
            let (min_classes, max_classes) = parse_class_range(&k)?;
            let report = run_gradcheck(&GradcheckConfig {
                trials,
                min_classes,
                max_classes,
                lambdas,
                seed,
                ..GradcheckConfig::default()
            })
            .map_err(|e| Failure::Usage(e.to_string()))?;
            let (trial, classes, lambda) = report.worst_trial;
            println!("trials {}", report.trials);
            println!("max relative error {:.3e}", report.max_relative_error);
            println!("max absolute error {:.3e}", report.max_abs_error);
            println!("worst: trial {trial}, K={classes}, lambda={lambda}");
            if report.max_relative_error >= GRADCHECK_TOLERANCE {
                return Err(Failure::Runtime(Error::InvalidInput(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_relative_error
                ))));
            }
        }
    }
    Ok(())
}
