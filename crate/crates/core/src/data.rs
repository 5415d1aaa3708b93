//! Synthetic datasets with planted confusable class pairs, the `.cfds` text
//! format, and label remapping into a subnet's source output space.
//!
//! `.cfds` layout:
//!
//! ```text
//! N D K
//! name_0 name_1 ... name_{K-1}
//! x_1 ... x_D label        (N lines)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::confusion::ConfusingGroup;
use crate::error::{read_file, write_file, Error, Result};
use crate::numeric::{DenseMatrix, Rng};

/// Labelled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidInput("dataset needs at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let k = class_names.len();
        if k < 2 {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        if class_names
            .iter()
            .any(|n| n.is_empty() || n.chars().any(|c| c.is_whitespace() || c == ','))
        {
            return Err(Error::InvalidInput(
                "class names must be non-empty without whitespace or commas".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                class_count: k,
            });
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Subset with the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
        )
    }

    /// Per-class shuffled split: `floor(fraction · n_c)` samples of every
    /// class go to the first half.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut rng = Rng::new(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for class in 0..self.class_count() {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rng.shuffle(&mut members);
            let cut = (fraction * members.len() as f64).floor() as usize;
            first.extend_from_slice(&members[..cut]);
            second.extend_from_slice(&members[cut..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first)?, self.subset(&second)?))
    }

    /// Per-feature mean and standard deviation (population form); a
    /// constant feature gets scale 1.
    pub fn feature_scaling(&self) -> FeatureScaling {
        let (n, d) = self.features.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(self.features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(self.features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        FeatureScaling { mean, scale }
    }

    /// Copy with every feature mapped through `(x − mean) / scale`.
    pub fn standardized(&self, scaling: &FeatureScaling) -> Result<Self> {
        if scaling.mean.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "scaling has {} features, dataset {}",
                scaling.mean.len(),
                self.feature_dim()
            )));
        }
        let mut features = self.features.clone();
        for r in 0..features.rows() {
            for ((v, m), s) in features.row_mut(r).iter_mut().zip(&scaling.mean).zip(&scaling.scale) {
                *v = (*v - m) / s;
            }
        }
        Self::new(features, self.labels.clone(), self.class_names.clone())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.len(), self.feature_dim(), self.class_count());
        let _ = writeln!(out, "{}", self.class_names.join(" "));
        for (r, label) in self.labels.iter().enumerate() {
            for v in self.features.row(r) {
                let _ = write!(out, "{v} ");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        let dims = header
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(1, format!("bad header: {e}")))?;
        let [n, d, k] = dims[..] else {
            return Err(Error::parse(1, "header must be `N D K`"));
        };
        let (_, names_line) = lines
            .next()
            .ok_or_else(|| Error::parse(2, "missing class names"))?;
        let class_names: Vec<String> = names_line.split_whitespace().map(String::from).collect();
        if class_names.len() != k {
            return Err(Error::parse(
                2,
                format!("expected {k} class names, found {}", class_names.len()),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if labels.len() == n {
                return Err(Error::parse(line_no, format!("more than {n} sample rows")));
            }
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != d + 1 {
                return Err(Error::parse(
                    line_no,
                    format!("expected {} columns, found {}", d + 1, cells.len()),
                ));
            }
            for c in &cells[..d] {
                let v: f64 = c
                    .parse()
                    .map_err(|e| Error::parse(line_no, format!("bad feature `{c}`: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(line_no, "non-finite feature"));
                }
                data.push(v);
            }
            let label: usize = cells[d]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("bad label `{}`: {e}", cells[d])))?;
            if label >= k {
                return Err(Error::InvalidLabel {
                    label,
                    class_count: k,
                });
            }
            labels.push(label);
        }
        if labels.len() != n {
            return Err(Error::parse(
                text.lines().count(),
                format!("expected {n} sample rows, found {}", labels.len()),
            ));
        }
        Self::new(DenseMatrix::from_vec(n, d, data)?, labels, class_names)
    }
}

/// Affine per-feature normalization fitted on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &dataset.to_text())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::parse(&read_file(path)?)
}

/// Number of samples drawn per class.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleCounts {
    Uniform(usize),
    PerClass(Vec<usize>),
}

impl SampleCounts {
    pub fn for_class(&self, class: usize) -> usize {
        match self {
            SampleCounts::Uniform(n) => *n,
            SampleCounts::PerClass(v) => v[class],
        }
    }
}

/// Two classes whose centers are pulled together; `overlap = 1` makes them
/// coincide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
}

/// Recipe for [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub feature_dim: usize,
    pub samples_per_class: SampleCounts,
    pub confusable_pairs: Vec<ConfusablePair>,
    /// Length scale of a cluster: samples are isotropic Gaussians with
    /// per-coordinate standard deviation `cluster_spread / 5`.
    pub cluster_spread: f64,
    pub seed: u64,
}

/// Minimum center distance between classes that are not paired, in units of
/// `cluster_spread`.
pub const UNPAIRED_SEPARATION: f64 = 6.0;

/// `cluster_spread` over the per-coordinate sample standard deviation.
pub const SPREAD_PER_STDDEV: f64 = 5.0;

const PLACEMENT_RETRIES: usize = 10_000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.class_count;
        if k < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        match &self.samples_per_class {
            SampleCounts::PerClass(v) if v.len() != k => {
                return Err(Error::Config(format!(
                    "{} per-class counts for {k} classes",
                    v.len()
                )))
            }
            _ => {}
        }
        if (0..k).map(|c| self.samples_per_class.for_class(c)).sum::<usize>() == 0 {
            return Err(Error::Config("no samples requested".into()));
        }
        let mut paired = vec![false; k];
        for p in &self.confusable_pairs {
            if p.a == p.b || p.a >= k || p.b >= k {
                return Err(Error::Config(format!(
                    "invalid confusable pair ({}, {})",
                    p.a, p.b
                )));
            }
            if !(0.0..=1.0).contains(&p.overlap) {
                return Err(Error::Config(format!("overlap {} outside [0, 1]", p.overlap)));
            }
            for c in [p.a, p.b] {
                if paired[c] {
                    return Err(Error::Config(format!("class {c} is in more than one pair")));
                }
                paired[c] = true;
            }
        }
        Ok(())
    }

    pub fn sample_stddev(&self) -> f64 {
        self.cluster_spread / SPREAD_PER_STDDEV
    }

    fn partner(&self, class: usize) -> Option<(usize, f64)> {
        self.confusable_pairs.iter().find_map(|p| {
            if p.a == class {
                Some((p.b, p.overlap))
            } else if p.b == class {
                Some((p.a, p.overlap))
            } else {
                None
            }
        })
    }
}

/// Places one center per class. A pair sits at distance
/// `2·spread·(1 − overlap)`; all other center pairs are at least
/// `6·spread` apart.
pub fn place_centers(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let k = spec.class_count;
    let d = spec.feature_dim;
    let min_sep = UNPAIRED_SEPARATION * spec.cluster_spread;
    // Rejection sampling in a box that starts tight and widens by 10% every
    // hundred failures, so clusters stay packed as closely as allowed.
    let mut side = min_sep;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for class in 0..k {
        let anchored = spec
            .partner(class)
            .filter(|&(other, _)| other < class)
            .map(|(other, overlap)| (other, 2.0 * spec.cluster_spread * (1.0 - overlap)));
        let mut placed = None;
        for attempt in 0..PLACEMENT_RETRIES {
            if attempt > 0 && attempt % 100 == 0 {
                side *= 1.1;
            }
            let candidate: Vec<f64> = match anchored {
                Some((other, dist)) => {
                    let dir: Vec<f64> = (0..d).map(|_| rng.gaussian(0.0, 1.0)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    centers[other]
                        .iter()
                        .zip(&dir)
                        .map(|(c, u)| c + dist * u / norm)
                        .collect()
                }
                None => (0..d).map(|_| (rng.next_f64() - 0.5) * side).collect(),
            };
            let clear = centers.iter().enumerate().all(|(j, c)| {
                anchored.is_some_and(|(other, _)| other == j) || euclidean(c, &candidate) >= min_sep
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::Generation(format!(
                    "could not place class {class} after {PLACEMENT_RETRIES} attempts"
                )))
            }
        }
    }
    Ok(centers)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws a Gaussian cluster per class, class-major order.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = Rng::new(spec.seed);
    let centers = place_centers(spec, &mut rng)?;
    let sigma = spec.sample_stddev();
    let d = spec.feature_dim;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class.for_class(class) {
            data.extend(center.iter().map(|&c| rng.gaussian(c, sigma)));
            labels.push(class);
        }
    }
    let names = (0..spec.class_count).map(|c| format!("class{c}")).collect();
    Dataset::new(DenseMatrix::from_vec(labels.len(), d, data)?, labels, names)
}

/// Labels expressed in a subnet's source output space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemappedLabels {
    pub labels: Vec<usize>,
    pub source_space_size: usize,
}

/// Source index of a target class: 0 ("others") outside the group, else the
/// 1-based position within the sorted group.
pub fn source_index(group: &ConfusingGroup, class: usize) -> usize {
    group.position(class).map_or(0, |p| p + 1)
}

pub fn remap_for_group(labels: &[usize], class_count: usize, group: &ConfusingGroup) -> Result<RemappedLabels> {
    group
        .check_range(class_count)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let labels = labels
        .iter()
        .map(|&l| {
            if l >= class_count {
                Err(Error::InvalidLabel {
                    label: l,
                    class_count,
                })
            } else {
                Ok(source_index(group, l))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RemappedLabels {
        labels,
        source_space_size: group.len() + 1,
    })
}
