//! End-to-end procedure and the four-arm ablation.
//!
//! 1. train encoder + head 0 with cross-entropy (arm `ce`)
//! 2. confusion matrix of that model on the training split
//! 3. confusing groups and the weight matrix
//! 4. on the frozen encoder: group heads with cross-entropy (`ce+subnets`),
//!    head 0 retrained with the improved loss (`newce`), and both
//!    (`newce+subnets`)
//! 5. fuse and evaluate every arm on the held-out split
//!
//! Every stage writes its artifacts to the output directory; nothing in
//! them depends on wall-clock time, so identical configs give identical
//! directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::confusion::{ConfusionMatrix, CsvKind, GroupPartition, DEFAULT_DIAGONAL_FLOOR, DEFAULT_THRESHOLD};
use crate::data::{generate, load_dataset, remap_for_group, save_dataset, ConfusablePair, Dataset, SampleCounts, SyntheticSpec};
use crate::ensemble::{FusionConfig, FusionRule};
use crate::error::{read_file, write_file, Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{evaluate, intra_group_mass, EvalReport};
use crate::model::{init_model, ModelState, TrainConfig, TrainingReport};
use crate::numeric::{argmax, substream_seed};

/// Fraction of each class used for training; the rest is validation.
pub const TRAIN_FRACTION: f64 = 0.8;

const SPLIT_STREAM: u64 = 0x5350_4C54; // "SPLT"
const ARM_STREAM: u64 = 0x4152_4D00; // "ARM\0"

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub threshold: f64,
    pub lambda: f64,
    pub diagonal_floor: f64,
    pub hidden_dim: usize,
    /// Encoder + head 0 training.
    pub phase1: TrainConfig,
    /// Frozen-encoder head training.
    pub phase2: TrainConfig,
    pub fusion: FusionRule,
    pub seed: u64,
    pub output_dir: PathBuf,
}

/// Config keys, in the order they are written back out.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "class_count",
    "feature_dim",
    "samples_per_class",
    "confusable_pairs",
    "cluster_spread",
    "seed",
    "threshold",
    "lambda",
    "diagonal_floor",
    "hidden_dim",
    "lr_phase1",
    "epochs_phase1",
    "lr_phase2",
    "epochs_phase2",
    "momentum",
    "weight_decay",
    "batch_size",
    "fusion",
    "output_dir",
];

impl Default for ExperimentConfig {
    /// K = 8 with two planted pairs at overlap 0.85, each pair 4:1
    /// imbalanced.
    fn default() -> Self {
        // A short first phase leaves the main head underfitting the planted
        // pairs, which is the regime the subnets are meant to fix.
        let phase1 = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 3,
            batch_size: 32,
        };
        Self {
            data: DataSource::Synthetic(SyntheticSpec {
                class_count: 8,
                feature_dim: 8,
                samples_per_class: SampleCounts::PerClass(vec![600, 200, 600, 200, 600, 600, 600, 600]),
                confusable_pairs: vec![
                    ConfusablePair { a: 0, b: 1, overlap: 0.85 },
                    ConfusablePair { a: 2, b: 3, overlap: 0.85 },
                ],
                cluster_spread: 1.0,
                seed: 42,
            }),
            threshold: DEFAULT_THRESHOLD,
            // confusion rates here are far above those of real segmentation
            // benchmarks, so the penalty weight is scaled down
            lambda: 2.0,
            diagonal_floor: DEFAULT_DIAGONAL_FLOOR,
            hidden_dim: 32,
            phase1,
            phase2: TrainConfig { epochs: 20, ..phase1 },
            fusion: FusionRule::Product,
            seed: 42,
            output_dir: PathBuf::from("ablation-out"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_pairs(value: &str) -> Result<Vec<ConfusablePair>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let [a, b, overlap] = parts[..] else {
                return Err(Error::Config(format!("pair `{item}` is not `a:b:overlap`")));
            };
            Ok(ConfusablePair {
                a: parse_value("confusable_pairs", a)?,
                b: parse_value("confusable_pairs", b)?,
                overlap: parse_value("confusable_pairs", overlap)?,
            })
        })
        .collect()
}

impl ExperimentConfig {
    fn synthetic_mut(&mut self, key: &str) -> Result<&mut SyntheticSpec> {
        match &mut self.data {
            DataSource::Synthetic(spec) => Ok(spec),
            DataSource::File(_) => Err(Error::Config(format!(
                "`{key}` only applies to synthetic data, but `dataset` is set"
            ))),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.data = DataSource::File(PathBuf::from(value)),
            "class_count" => self.synthetic_mut(key)?.class_count = parse_value(key, value)?,
            "feature_dim" => self.synthetic_mut(key)?.feature_dim = parse_value(key, value)?,
            "samples_per_class" => {
                let counts = value
                    .split(',')
                    .map(|v| parse_value::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.synthetic_mut(key)?.samples_per_class = match counts[..] {
                    [n] => SampleCounts::Uniform(n),
                    _ => SampleCounts::PerClass(counts),
                };
            }
            "confusable_pairs" => self.synthetic_mut(key)?.confusable_pairs = parse_pairs(value)?,
            "cluster_spread" => self.synthetic_mut(key)?.cluster_spread = parse_value(key, value)?,
            "seed" => {
                self.seed = parse_value(key, value)?;
                if let DataSource::Synthetic(spec) = &mut self.data {
                    spec.seed = self.seed;
                }
            }
            "threshold" => self.threshold = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "diagonal_floor" => self.diagonal_floor = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "lr_phase1" => self.phase1.learning_rate = parse_value(key, value)?,
            "epochs_phase1" => self.phase1.epochs = parse_value(key, value)?,
            "lr_phase2" => self.phase2.learning_rate = parse_value(key, value)?,
            "epochs_phase2" => self.phase2.epochs = parse_value(key, value)?,
            "momentum" => {
                let m = parse_value(key, value)?;
                self.phase1.momentum = m;
                self.phase2.momentum = m;
            }
            "weight_decay" => {
                let wd = parse_value(key, value)?;
                self.phase1.weight_decay = wd;
                self.phase2.weight_decay = wd;
            }
            "batch_size" => {
                let bs = parse_value(key, value)?;
                self.phase1.batch_size = bs;
                self.phase2.batch_size = bs;
            }
            "fusion" => self.fusion = value.parse()?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }

    /// Effective settings as `key = value` lines, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.data {
            DataSource::File(path) => {
                let _ = writeln!(out, "dataset = {}", path.display());
            }
            DataSource::Synthetic(spec) => {
                let counts = match &spec.samples_per_class {
                    SampleCounts::Uniform(n) => n.to_string(),
                    SampleCounts::PerClass(v) => v.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                };
                let pairs = if spec.confusable_pairs.is_empty() {
                    "none".to_string()
                } else {
                    spec.confusable_pairs
                        .iter()
                        .map(|p| format!("{}:{}:{}", p.a, p.b, p.overlap))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                let _ = writeln!(out, "class_count = {}", spec.class_count);
                let _ = writeln!(out, "feature_dim = {}", spec.feature_dim);
                let _ = writeln!(out, "samples_per_class = {counts}");
                let _ = writeln!(out, "confusable_pairs = {pairs}");
                let _ = writeln!(out, "cluster_spread = {}", spec.cluster_spread);
            }
        }
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "threshold = {}", self.threshold);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "diagonal_floor = {}", self.diagonal_floor);
        let _ = writeln!(out, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(out, "lr_phase1 = {}", self.phase1.learning_rate);
        let _ = writeln!(out, "epochs_phase1 = {}", self.phase1.epochs);
        let _ = writeln!(out, "lr_phase2 = {}", self.phase2.learning_rate);
        let _ = writeln!(out, "epochs_phase2 = {}", self.phase2.epochs);
        let _ = writeln!(out, "momentum = {}", self.phase1.momentum);
        let _ = writeln!(out, "weight_decay = {}", self.phase1.weight_decay);
        let _ = writeln!(out, "batch_size = {}", self.phase1.batch_size);
        let _ = writeln!(out, "fusion = {}", self.fusion.as_str());
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.diagonal_floor > 0.0 && self.diagonal_floor <= 1.0) {
            return Err(Error::Config("diagonal_floor must lie in (0, 1]".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        for phase in [&self.phase1, &self.phase2] {
            if phase.batch_size == 0 {
                return Err(Error::Config("batch_size must be at least 1".into()));
            }
            crate::numeric::SgdConfig::new(phase.learning_rate, phase.momentum, phase.weight_decay, 1)?;
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            rule: self.fusion,
            include_subnet0: true,
        }
    }
}

/// The four ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    CeOnly,
    CeSubnets,
    NewCeOnly,
    NewCeSubnets,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::CeOnly, Arm::CeSubnets, Arm::NewCeOnly, Arm::NewCeSubnets];

    pub fn name(self) -> &'static str {
        match self {
            Arm::CeOnly => "ce",
            Arm::CeSubnets => "ce+subnets",
            Arm::NewCeOnly => "newce",
            Arm::NewCeSubnets => "newce+subnets",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Arm::CeOnly => "ce",
            Arm::CeSubnets => "ce_subnets",
            Arm::NewCeOnly => "newce",
            Arm::NewCeSubnets => "newce_subnets",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// PRNG seed of one arm's initialization and shuffling.
pub fn arm_seed(seed: u64, arm: Arm) -> u64 {
    substream_seed(seed, ARM_STREAM + arm.index())
}

/// Seed of the train/validation split.
pub fn split_seed(seed: u64) -> u64 {
    substream_seed(seed, SPLIT_STREAM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub partition: GroupPartition,
    /// Reports in [`Arm::ALL`] order, all on the same validation split.
    pub reports: Vec<(Arm, EvalReport)>,
}

impl AblationResult {
    pub fn report(&self, arm: Arm) -> &EvalReport {
        &self
            .reports
            .iter()
            .find(|(a, _)| *a == arm)
            .expect("every arm is evaluated")
            .1
    }

    pub fn table(&self) -> String {
        let mut out = String::from("arm            miou      accuracy  intra_group_mass\n");
        for (arm, r) in &self.reports {
            let _ = writeln!(
                out,
                "{:<14} {:.6}  {:.6}  {:.6}",
                arm.name(),
                r.miou,
                r.accuracy,
                r.total_intra_group_mass()
            );
        }
        out
    }
}

/// Which loss the heads of a training stage use.
#[derive(Debug, Clone, Copy)]
pub enum HeadLoss<'a> {
    CrossEntropy,
    /// Improved loss with `C` from `confusion`; group heads use the matrix
    /// collapsed onto their source space.
    Improved {
        lambda: f64,
        diagonal_floor: f64,
        confusion: &'a ConfusionMatrix,
    },
}

impl HeadLoss<'_> {
    fn config_for(&self, head_space: usize, group: Option<&crate::confusion::ConfusingGroup>) -> Result<LossConfig> {
        match *self {
            HeadLoss::CrossEntropy => Ok(LossConfig::standard(head_space)),
            HeadLoss::Improved {
                lambda,
                diagonal_floor,
                confusion,
            } => {
                let weights = match group {
                    None => confusion.derive_weight_matrix(diagonal_floor)?,
                    Some(g) => confusion.collapse_to_group(g)?.derive_weight_matrix(diagonal_floor)?,
                };
                LossConfig::new(lambda, weights)
            }
        }
    }
}

/// Fresh model trained end to end (encoder + head 0), then frozen.
pub fn train_baseline(
    train: &Dataset,
    hidden_dim: usize,
    loss: HeadLoss<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainingReport)> {
    let k = train.class_count();
    let mut model = init_model(train.feature_dim(), hidden_dim, k, &GroupPartition::empty(k), seed)?;
    let report = model.train_head(train.features(), train.labels(), 0, &loss.config_for(k, None)?, cfg, seed)?;
    model.freeze_encoder();
    Ok((model, report))
}

/// Confusion of head 0's argmax on `dataset`.
pub fn head0_confusion(model: &ModelState, dataset: &Dataset) -> Result<ConfusionMatrix> {
    let logits = model.forward(dataset.features(), 0)?;
    let predicted: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    let mut cm = ConfusionMatrix::new(model.class_count());
    cm.accumulate(dataset.labels(), &predicted)?;
    Ok(cm)
}

/// Retrains head 0 from a fresh initialization on the frozen encoder.
pub fn retrain_head0(
    model: &mut ModelState,
    train: &Dataset,
    loss: HeadLoss<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingReport> {
    model.freeze_encoder();
    model.reset_head(0, seed)?;
    let k = model.class_count();
    model.train_head(train.features(), train.labels(), 0, &loss.config_for(k, None)?, cfg, seed)
}

/// Attaches one head per group and trains each on remapped labels with the
/// encoder frozen.
pub fn train_subnets(
    model: &mut ModelState,
    train: &Dataset,
    partition: &GroupPartition,
    loss: HeadLoss<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<TrainingReport>> {
    model.freeze_encoder();
    model.attach_subnets(partition, seed)?;
    let k = model.class_count();
    partition
        .groups()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let remapped = remap_for_group(train.labels(), k, g)?;
            let loss_cfg = loss.config_for(remapped.source_space_size, Some(g))?;
            model.train_head(train.features(), &remapped.labels, i + 1, &loss_cfg, cfg, seed)
        })
        .collect()
}

/// Evaluates with the model's own heads, but measures intra-group mass on
/// `partition` so arms with and without subnets are comparable.
pub fn evaluate_arm(
    model: &ModelState,
    dataset: &Dataset,
    partition: &GroupPartition,
    fusion: &FusionConfig,
) -> Result<EvalReport> {
    let own = GroupPartition::new(
        model.class_count(),
        model.groups().into_iter().cloned().collect(),
        partition.threshold(),
    )?;
    let mut report = evaluate(model, dataset, &own, fusion)?;
    report.intra_group_confusion_mass = intra_group_mass(&report.confusion, partition);
    Ok(report)
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| e.in_stage(name))
}

fn log_losses(log: &mut String, arm: Arm, reports: &[TrainingReport]) {
    for r in reports {
        let losses: Vec<String> = r.epoch_losses.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(log, "{} head{} {}", arm.name(), r.head_index, losses.join(" "));
    }
}

/// Runs the whole procedure and writes every artifact to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AblationResult> {
    stage("config", cfg.validate())?;
    let out = cfg.output_dir.as_path();
    stage(
        "config",
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        }),
    )?;
    stage("config", write_file(&out.join("config.txt"), &cfg.to_text()))?;

    let (train, val) = stage("data", (|| {
        let full = match &cfg.data {
            DataSource::Synthetic(spec) => generate(spec)?,
            DataSource::File(path) => load_dataset(path)?,
        };
        let (train, val) = full.stratified_split(TRAIN_FRACTION, split_seed(cfg.seed))?;
        let scaling = train.feature_scaling();
        let (train, val) = (train.standardized(&scaling)?, val.standardized(&scaling)?);
        save_dataset(&full, &out.join("dataset.cfds"))?;
        save_dataset(&train, &out.join("train.cfds"))?;
        save_dataset(&val, &out.join("val.cfds"))?;
        Ok((train, val))
    })())?;
    let names = train.class_names().to_vec();
    let mut log = String::new();

    let baseline = stage("train-baseline", (|| {
        let (model, report) = train_baseline(
            &train,
            cfg.hidden_dim,
            HeadLoss::CrossEntropy,
            &cfg.phase1,
            arm_seed(cfg.seed, Arm::CeOnly),
        )?;
        log_losses(&mut log, Arm::CeOnly, std::slice::from_ref(&report));
        model.save(&out.join("model_ce.ckpt"))?;
        Ok(model)
    })())?;

    let (confusion, partition) = stage("groups", (|| {
        let cm = head0_confusion(&baseline, &train)?;
        cm.save_csv(&out.join("confusion_train.csv"), &names, CsvKind::Counts)?;
        cm.save_csv(&out.join("confusion_train_normalized.csv"), &names, CsvKind::Normalized)?;
        let partition = cm.partition_groups(cfg.threshold)?;
        partition.save(&out.join("partition.txt"))?;
        Ok((cm, partition))
    })())?;

    let improved = HeadLoss::Improved {
        lambda: cfg.lambda,
        diagonal_floor: cfg.diagonal_floor,
        confusion: &confusion,
    };

    let models = stage("train-subnets", (|| {
        let mut ce_subnets = baseline.clone();
        let reports = train_subnets(
            &mut ce_subnets,
            &train,
            &partition,
            HeadLoss::CrossEntropy,
            &cfg.phase2,
            arm_seed(cfg.seed, Arm::CeSubnets),
        )?;
        log_losses(&mut log, Arm::CeSubnets, &reports);

        let mut newce = baseline.clone();
        let report = retrain_head0(&mut newce, &train, improved, &cfg.phase2, arm_seed(cfg.seed, Arm::NewCeOnly))?;
        log_losses(&mut log, Arm::NewCeOnly, std::slice::from_ref(&report));

        let mut newce_subnets = newce.clone();
        let reports = train_subnets(
            &mut newce_subnets,
            &train,
            &partition,
            improved,
            &cfg.phase2,
            arm_seed(cfg.seed, Arm::NewCeSubnets),
        )?;
        log_losses(&mut log, Arm::NewCeSubnets, &reports);

        ce_subnets.save(&out.join("model_ce_subnets.ckpt"))?;
        newce.save(&out.join("model_newce.ckpt"))?;
        newce_subnets.save(&out.join("model_newce_subnets.ckpt"))?;
        write_file(&out.join("training_log.txt"), &log)?;
        Ok([baseline.clone(), ce_subnets, newce, newce_subnets])
    })())?;

    let result = stage("evaluate", (|| {
        let fusion = cfg.fusion_config();
        let mut reports = Vec::with_capacity(4);
        for (arm, model) in Arm::ALL.into_iter().zip(&models) {
            let report = evaluate_arm(model, &val, &partition, &fusion)?;
            let stem = arm.file_stem();
            report.save_json(&out.join(format!("report_{stem}.json")))?;
            report
                .confusion
                .save_csv(&out.join(format!("confusion_{stem}.csv")), &names, CsvKind::Counts)?;
            write_file(&out.join(format!("iou_{stem}.txt")), &report.plot_data())?;
            reports.push((arm, report));
        }
        let result = AblationResult {
            partition: partition.clone(),
            reports,
        };
        write_file(&out.join("ablation.txt"), &result.table())?;
        Ok(result)
    })())?;
    Ok(result)
}
