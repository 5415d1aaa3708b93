//! Shared MLP feature encoder with one linear classification head per subnet.
//!
//! Head 0 scores all `K` classes. Head `m ≥ 1` scores the `m`-th confusing
//! group plus an "others" class at index 0 of its output space.

use std::fmt::Write as _;
use std::path::Path;

use crate::confusion::{ConfusingGroup, GroupPartition};
use crate::error::{read_file, write_file, Error, Result};
use crate::loss::{batch_loss_and_grad, LossConfig};
use crate::numeric::{linear_lr, sgd_step, substream_seed, DenseMatrix, Rng, SgdConfig};

const ENCODER_STREAM: u64 = 0x454E_4344; // "ENCD"
const HEAD_STREAM: u64 = 0x4845_4144; // "HEAD"
const SHUFFLE_STREAM: u64 = 0x5348_5546; // "SHUF"

/// `D → H → H` ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub frozen: bool,
}

/// Intermediate activations kept for backpropagation.
struct EncoderTrace {
    z1: DenseMatrix,
    h1: DenseMatrix,
    z2: DenseMatrix,
    h2: DenseMatrix,
}

impl Encoder {
    fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let mut w1 = DenseMatrix::zeros(input_dim, hidden_dim);
        w1.fill_gaussian(rng, 0.0, (2.0 / input_dim as f64).sqrt());
        let mut w2 = DenseMatrix::zeros(hidden_dim, hidden_dim);
        w2.fill_gaussian(rng, 0.0, (2.0 / hidden_dim as f64).sqrt());
        Self {
            w1,
            b1: DenseMatrix::zeros(1, hidden_dim),
            w2,
            b2: DenseMatrix::zeros(1, hidden_dim),
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    fn trace(&self, x: &DenseMatrix) -> Result<EncoderTrace> {
        let mut z1 = x.matmul(&self.w1)?;
        z1.add_bias(&self.b1)?;
        let h1 = z1.relu();
        let mut z2 = h1.matmul(&self.w2)?;
        z2.add_bias(&self.b2)?;
        let h2 = z2.relu();
        Ok(EncoderTrace { z1, h1, z2, h2 })
    }

    pub fn encode(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.trace(x)?.h2)
    }

    fn parameters_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Linear map from encoder features to one subnet's output space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetHead {
    pub group: Option<ConfusingGroup>,
    pub weights: DenseMatrix,
    pub bias: DenseMatrix,
}

impl SubnetHead {
    fn init(hidden_dim: usize, output_dim: usize, group: Option<ConfusingGroup>, rng: &mut Rng) -> Self {
        let mut weights = DenseMatrix::zeros(hidden_dim, output_dim);
        weights.fill_gaussian(rng, 0.0, (2.0 / hidden_dim as f64).sqrt());
        Self {
            group,
            weights,
            bias: DenseMatrix::zeros(1, output_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn logits(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = features.matmul(&self.weights)?;
        out.add_bias(&self.bias)?;
        Ok(out)
    }
}

/// Encoder plus heads; head 0 covers the full label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: Encoder,
    pub heads: Vec<SubnetHead>,
    pub rng_seed: u64,
    class_count: usize,
}

/// Per-head training settings. The schedule length is
/// `epochs · ceil(N / batch_size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 30,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub head_index: usize,
    pub encoder_trained: bool,
    /// Sample-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Encoder plus head 0 plus one head per group of `partition`.
pub fn init_model(
    input_dim: usize,
    hidden_dim: usize,
    class_count: usize,
    partition: &GroupPartition,
    seed: u64,
) -> Result<ModelState> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::Config("input and hidden dimensions must be at least 1".into()));
    }
    if class_count < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if partition.class_count() != class_count {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} classes, model has {class_count}",
            partition.class_count()
        )));
    }
    let encoder = Encoder::init(input_dim, hidden_dim, &mut Rng::new(substream_seed(seed, ENCODER_STREAM)));
    let mut model = ModelState {
        encoder,
        heads: Vec::new(),
        rng_seed: seed,
        class_count,
    };
    model.heads.push(model.fresh_head(0, None, seed));
    model.attach_subnets(partition, seed)?;
    Ok(model)
}

impl ModelState {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    /// `M`, the number of heads.
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    fn fresh_head(&self, index: usize, group: Option<ConfusingGroup>, seed: u64) -> SubnetHead {
        let output_dim = group.as_ref().map_or(self.class_count, |g| g.len() + 1);
        let stream = substream_seed(seed, HEAD_STREAM.wrapping_add(index as u64));
        SubnetHead::init(self.hidden_dim(), output_dim, group, &mut Rng::new(stream))
    }

    /// Replaces heads `1..` with freshly initialized heads for `partition`.
    pub fn attach_subnets(&mut self, partition: &GroupPartition, seed: u64) -> Result<()> {
        if partition.class_count() != self.class_count {
            return Err(Error::InvalidPartition(format!(
                "partition covers {} classes, model has {}",
                partition.class_count(),
                self.class_count
            )));
        }
        // GroupPartition guarantees disjoint, in-range groups.
        self.heads.truncate(1);
        for (i, g) in partition.groups().iter().enumerate() {
            let head = self.fresh_head(i + 1, Some(g.clone()), seed);
            self.heads.push(head);
        }
        Ok(())
    }

    /// Re-initializes one head from `seed`, keeping its output space.
    pub fn reset_head(&mut self, head_index: usize, seed: u64) -> Result<()> {
        self.check_head(head_index)?;
        let group = self.heads[head_index].group.clone();
        self.heads[head_index] = self.fresh_head(head_index, group, seed);
        Ok(())
    }

    pub fn freeze_encoder(&mut self) {
        self.encoder.frozen = true;
    }

    /// Groups of heads `1..`, in order.
    pub fn groups(&self) -> Vec<&ConfusingGroup> {
        self.heads.iter().skip(1).filter_map(|h| h.group.as_ref()).collect()
    }

    /// Errors unless heads `1..` carry exactly the groups of `partition`.
    pub fn check_partition(&self, partition: &GroupPartition) -> Result<()> {
        let mine = self.groups();
        let theirs: Vec<&ConfusingGroup> = partition.groups().iter().collect();
        if partition.class_count() != self.class_count || mine != theirs {
            return Err(Error::InvalidPartition(
                "model heads do not match the partition".into(),
            ));
        }
        Ok(())
    }

    fn check_head(&self, head_index: usize) -> Result<()> {
        if head_index >= self.heads.len() {
            return Err(Error::Range(format!(
                "head {head_index} of {}",
                self.heads.len()
            )));
        }
        Ok(())
    }

    fn check_features(&self, features: &DenseMatrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits of one head for a batch of feature rows.
    pub fn forward(&self, features: &DenseMatrix, head_index: usize) -> Result<DenseMatrix> {
        self.check_head(head_index)?;
        self.check_features(features)?;
        self.heads[head_index].logits(&self.encoder.encode(features)?)
    }

    /// Logits of every head, sharing one encoder pass.
    pub fn forward_all(&self, features: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_features(features)?;
        let encoded = self.encoder.encode(features)?;
        self.heads.iter().map(|h| h.logits(&encoded)).collect()
    }

    /// Trains one head with mini-batch SGD. The encoder is updated too when
    /// `head_index == 0` and it is not frozen; otherwise it is read-only.
    /// `labels` must already be in the head's output space.
    #[allow(clippy::too_many_arguments)]
    pub fn train_head(
        &mut self,
        features: &DenseMatrix,
        labels: &[usize],
        head_index: usize,
        loss_cfg: &LossConfig,
        train_cfg: &TrainConfig,
        seed: u64,
    ) -> Result<TrainingReport> {
        self.check_head(head_index)?;
        self.check_features(features)?;
        let n = labels.len();
        if features.rows() != n {
            return Err(Error::Shape(format!("{} rows vs {n} labels", features.rows())));
        }
        let out_dim = self.heads[head_index].output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= out_dim) {
            return Err(Error::InvalidLabel {
                label: bad,
                class_count: out_dim,
            });
        }
        if loss_cfg.class_count() != out_dim {
            return Err(Error::Shape(format!(
                "{}-class loss for a head with {out_dim} outputs",
                loss_cfg.class_count()
            )));
        }
        if train_cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let train_encoder = head_index == 0 && !self.encoder.frozen;
        let mut report = TrainingReport {
            head_index,
            encoder_trained: train_encoder,
            epoch_losses: Vec::with_capacity(train_cfg.epochs),
        };
        if train_cfg.epochs == 0 || n == 0 {
            return Ok(report);
        }
        let batches_per_epoch = n.div_ceil(train_cfg.batch_size);
        let sgd = SgdConfig::new(
            train_cfg.learning_rate,
            train_cfg.momentum,
            train_cfg.weight_decay,
            train_cfg.epochs * batches_per_epoch,
        )?;

        // A frozen encoder gives fixed features; compute them once.
        let frozen_features = if train_encoder {
            None
        } else {
            Some(self.encoder.encode(features)?)
        };
        let mut head_velocity = [
            DenseMatrix::zeros(self.hidden_dim(), out_dim),
            DenseMatrix::zeros(1, out_dim),
        ];
        let mut encoder_velocity = train_encoder.then(|| {
            [
                DenseMatrix::zeros(self.input_dim(), self.hidden_dim()),
                DenseMatrix::zeros(1, self.hidden_dim()),
                DenseMatrix::zeros(self.hidden_dim(), self.hidden_dim()),
                DenseMatrix::zeros(1, self.hidden_dim()),
            ]
        });

        let mut rng = Rng::new(substream_seed(seed, SHUFFLE_STREAM.wrapping_add(head_index as u64)));
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for _ in 0..train_cfg.epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(train_cfg.batch_size) {
                let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let lr = linear_lr(step, &sgd)?;
                step += 1;
                let loss = match &frozen_features {
                    Some(encoded) => {
                        let h = encoded.select_rows(batch);
                        let head = &mut self.heads[head_index];
                        let (loss, grad) = batch_loss_and_grad(&head.logits(&h)?, &batch_labels, loss_cfg)?;
                        let dw = h.transpose_matmul(&grad)?;
                        let db = grad.column_sums();
                        let [vw, vb] = &mut head_velocity;
                        sgd_step(&mut head.weights, &dw, vw, &sgd, lr)?;
                        sgd_step(&mut head.bias, &db, vb, &sgd, lr)?;
                        loss
                    }
                    None => {
                        let x = features.select_rows(batch);
                        let trace = self.encoder.trace(&x)?;
                        let head = &mut self.heads[head_index];
                        let (loss, grad) =
                            batch_loss_and_grad(&head.logits(&trace.h2)?, &batch_labels, loss_cfg)?;
                        let dw = trace.h2.transpose_matmul(&grad)?;
                        let db = grad.column_sums();
                        let dh2 = grad.matmul_transpose(&head.weights)?;
                        let dz2 = DenseMatrix::relu_backward(&dh2, &trace.z2)?;
                        let dw2 = trace.h1.transpose_matmul(&dz2)?;
                        let db2 = dz2.column_sums();
                        let dh1 = dz2.matmul_transpose(&self.encoder.w2)?;
                        let dz1 = DenseMatrix::relu_backward(&dh1, &trace.z1)?;
                        let dw1 = x.transpose_matmul(&dz1)?;
                        let db1 = dz1.column_sums();

                        let [vw, vb] = &mut head_velocity;
                        sgd_step(&mut head.weights, &dw, vw, &sgd, lr)?;
                        sgd_step(&mut head.bias, &db, vb, &sgd, lr)?;
                        let velocities = encoder_velocity.as_mut().expect("encoder velocity");
                        let grads = [dw1, db1, dw2, db2];
                        for ((param, g), v) in self
                            .encoder
                            .parameters_mut()
                            .into_iter()
                            .zip(&grads)
                            .zip(velocities.iter_mut())
                        {
                            sgd_step(param, g, v, &sgd, lr)?;
                        }
                        loss
                    }
                };
                epoch_loss += loss * batch.len() as f64;
            }
            report.epoch_losses.push(epoch_loss / n as f64);
        }
        Ok(report)
    }

    /// Versioned text checkpoint, 17 significant digits per parameter.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cfnet-checkpoint 1");
        let _ = writeln!(
            out,
            "dims {} {} {} {}",
            self.input_dim(),
            self.hidden_dim(),
            self.class_count,
            self.heads.len()
        );
        let _ = writeln!(out, "seed {}", self.rng_seed);
        let _ = writeln!(out, "frozen {}", u8::from(self.encoder.frozen));
        for (name, m) in [
            ("encoder.w1", &self.encoder.w1),
            ("encoder.b1", &self.encoder.b1),
            ("encoder.w2", &self.encoder.w2),
            ("encoder.b2", &self.encoder.b2),
        ] {
            write_matrix(&mut out, name, m);
        }
        for (i, head) in self.heads.iter().enumerate() {
            match &head.group {
                None => {
                    let _ = writeln!(out, "head {i} full");
                }
                Some(g) => {
                    let members: Vec<String> = g.classes().iter().map(usize::to_string).collect();
                    let _ = writeln!(out, "head {i} group {}", members.join(" "));
                }
            }
            write_matrix(&mut out, "weights", &head.weights);
            write_matrix(&mut out, "bias", &head.bias);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        let magic = reader.next_fields()?;
        if magic != ["cfnet-checkpoint", "1"] {
            return Err(Error::parse(reader.line, "not a version-1 checkpoint"));
        }
        let dims = reader.keyword_numbers::<usize>("dims", 4)?;
        let (d, h, k, m) = (dims[0], dims[1], dims[2], dims[3]);
        if d == 0 || h == 0 || k < 2 || m == 0 {
            return Err(Error::parse(reader.line, "invalid dimensions"));
        }
        let rng_seed = reader.keyword_numbers::<u64>("seed", 1)?[0];
        let frozen = match reader.keyword_numbers::<u8>("frozen", 1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(Error::parse(reader.line, "frozen must be 0 or 1")),
        };
        let encoder = Encoder {
            w1: reader.matrix("encoder.w1", d, h)?,
            b1: reader.matrix("encoder.b1", 1, h)?,
            w2: reader.matrix("encoder.w2", h, h)?,
            b2: reader.matrix("encoder.b2", 1, h)?,
            frozen,
        };
        let mut heads = Vec::with_capacity(m);
        for i in 0..m {
            let fields = reader.next_fields()?;
            let line = reader.line;
            if fields.len() < 3 || fields[0] != "head" || fields[1] != i.to_string() {
                return Err(Error::parse(line, format!("expected `head {i} ...`")));
            }
            let group = match fields[2] {
                "full" if i == 0 && fields.len() == 3 => None,
                "group" if i > 0 => {
                    let members = fields[3..]
                        .iter()
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(line, e.to_string()))?;
                    let g = ConfusingGroup::new(members)?;
                    g.check_range(k)?;
                    Some(g)
                }
                _ => return Err(Error::parse(line, "head 0 must be `full`, others `group ...`")),
            };
            let out_dim = group.as_ref().map_or(k, |g| g.len() + 1);
            heads.push(SubnetHead {
                group,
                weights: reader.matrix("weights", h, out_dim)?,
                bias: reader.matrix("bias", 1, out_dim)?,
            });
        }
        let groups: Vec<ConfusingGroup> = heads.iter().filter_map(|h| h.group.clone()).collect();
        GroupPartition::new(k, groups, crate::confusion::DEFAULT_THRESHOLD)?;
        Ok(Self {
            encoder,
            heads,
            rng_seed,
            class_count: k,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }
}

fn write_matrix(out: &mut String, name: &str, m: &DenseMatrix) {
    let _ = writeln!(out, "matrix {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        for (i, l) in self.lines.by_ref() {
            self.line = i + 1;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if !fields.is_empty() {
                return Ok(fields);
            }
        }
        Err(Error::parse(self.line + 1, "unexpected end of checkpoint"))
    }

    fn keyword_numbers<T: std::str::FromStr>(&mut self, keyword: &str, count: usize) -> Result<Vec<T>> {
        let fields = self.next_fields()?;
        if fields.len() != count + 1 || fields[0] != keyword {
            return Err(Error::parse(self.line, format!("expected `{keyword}` with {count} values")));
        }
        fields[1..]
            .iter()
            .map(|f| f.parse::<T>().map_err(|_| Error::parse(self.line, format!("bad number `{f}`"))))
            .collect()
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let header = self.next_fields()?;
        let expected = ["matrix".to_string(), name.to_string(), rows.to_string(), cols.to_string()];
        if header != expected {
            return Err(Error::parse(
                self.line,
                format!("expected `matrix {name} {rows} {cols}`"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let fields = self.next_fields()?;
            if fields.len() != cols {
                return Err(Error::parse(self.line, format!("expected {cols} values")));
            }
            for f in fields {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::parse(self.line, format!("bad number `{f}`")))?,
                );
            }
        }
        DenseMatrix::from_vec(rows, cols, data).map_err(|e| Error::parse(self.line, e.to_string()))
    }
}
