//! Confusion matrices, confusing-group discovery and the loss weight matrix.
//!
//! Groups are the connected components (of size ≥ 2) of the graph that joins
//! classes `i ≠ j` whenever `max(m_ij, m_ji) ≥ τ`, with `m` the row-normalized
//! confusion matrix.

use std::fmt::Write as _;
use std::path::Path;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::numeric::DenseMatrix;

/// Default edge threshold for [`partition_groups`].
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Default lower bound on the diagonal of the weight matrix.
pub const DEFAULT_DIAGONAL_FLOOR: f64 = 1.0;

/// Counts of (true class, predicted class) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    /// Row-major, `counts[t * K + p]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion counts must be square".into()));
        }
        Ok(Self {
            class_count: k,
            counts: rows.concat(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.class_count + predicted]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.class_count..(truth + 1) * self.class_count]
            .iter()
            .sum()
    }

    pub fn column_total(&self, predicted: usize) -> u64 {
        (0..self.class_count)
            .map(|t| self.count(t, predicted))
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.class_count).map(|c| self.count(c, c)).sum()
    }

    /// Tallies one batch. Either every pair is recorded or, on error, none.
    pub fn accumulate(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let k = self.class_count;
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&l| l >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                class_count: k,
            });
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::Shape("merging confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Row-normalized rates; rows without samples stay all-zero.
    pub fn normalized(&self) -> DenseMatrix {
        let k = self.class_count;
        let mut rates = DenseMatrix::zeros(k, k);
        for t in 0..k {
            let total = self.row_total(t);
            if total == 0 {
                continue;
            }
            for p in 0..k {
                rates.set(t, p, self.count(t, p) as f64 / total as f64);
            }
        }
        rates
    }

    pub fn partition_groups(&self, threshold: f64) -> Result<GroupPartition> {
        partition_groups(&self.normalized(), threshold)
    }

    pub fn derive_weight_matrix(&self, diagonal_floor: f64) -> Result<WeightMatrix> {
        derive_weight_matrix(&self.normalized(), diagonal_floor)
    }

    /// Collapses the matrix onto a subnet's source space: index 0 aggregates
    /// every class outside `group` (counts summed), index `s ≥ 1` is the
    /// `s`-th group member.
    pub fn collapse_to_group(&self, group: &ConfusingGroup) -> Result<Self> {
        group.check_range(self.class_count)?;
        let k = self.class_count;
        let size = group.len() + 1;
        let source_of = |c: usize| group.position(c).map_or(0, |p| p + 1);
        let mut out = Self::new(size);
        for t in 0..k {
            for p in 0..k {
                out.counts[source_of(t) * size + source_of(p)] += self.count(t, p);
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self, class_names: &[String], kind: CsvKind) -> Result<String> {
        check_names(class_names, self.class_count)?;
        let mut out = String::new();
        let _ = writeln!(out, "# kind={}", kind.as_str());
        let _ = writeln!(out, "{}", class_names.join(","));
        match kind {
            CsvKind::Counts => {
                for t in 0..self.class_count {
                    let row: Vec<String> = (0..self.class_count)
                        .map(|p| self.count(t, p).to_string())
                        .collect();
                    let _ = writeln!(out, "{}", row.join(","));
                }
            }
            CsvKind::Normalized => {
                let rates = self.normalized();
                for t in 0..self.class_count {
                    let row: Vec<String> = rates.row(t).iter().map(|v| format!("{v:e}")).collect();
                    let _ = writeln!(out, "{}", row.join(","));
                }
            }
        }
        Ok(out)
    }

    pub fn save_csv(&self, path: &Path, class_names: &[String], kind: CsvKind) -> Result<()> {
        write_file(path, &self.to_csv(class_names, kind)?)
    }
}

fn check_names(class_names: &[String], class_count: usize) -> Result<()> {
    if class_names.len() != class_count {
        return Err(Error::Shape(format!(
            "{} class names for {class_count} classes",
            class_names.len()
        )));
    }
    if class_names
        .iter()
        .any(|n| n.is_empty() || n.contains([',', '\n', '\r']))
    {
        return Err(Error::InvalidInput(
            "class names must be non-empty and free of commas and newlines".into(),
        ));
    }
    Ok(())
}

/// Which variant a confusion CSV holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    Counts,
    Normalized,
}

impl CsvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CsvKind::Counts => "counts",
            CsvKind::Normalized => "normalized",
        }
    }
}

/// Parsed confusion CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfusionCsv {
    Counts {
        matrix: ConfusionMatrix,
        class_names: Vec<String>,
    },
    Normalized {
        rates: DenseMatrix,
        class_names: Vec<String>,
    },
}

impl ConfusionCsv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (_, first) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        let kind = match first.strip_prefix('#').map(str::trim) {
            Some("kind=counts") => CsvKind::Counts,
            Some("kind=normalized") => CsvKind::Normalized,
            _ => {
                return Err(Error::parse(
                    1,
                    "expected `# kind=counts` or `# kind=normalized`",
                ))
            }
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(2, "missing class-name header"))?;
        let class_names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let k = class_names.len();
        let mut rows: Vec<Vec<&str>> = Vec::with_capacity(k);
        for (line_no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != k {
                return Err(Error::parse(
                    line_no,
                    format!("expected {k} values, found {}", cells.len()),
                ));
            }
            if rows.len() == k {
                return Err(Error::parse(line_no, format!("more than {k} rows")));
            }
            rows.push(cells);
        }
        if rows.len() != k {
            return Err(Error::parse(
                text.lines().count(),
                format!("expected {k} rows, found {}", rows.len()),
            ));
        }
        match kind {
            CsvKind::Counts => {
                let mut counts = Vec::with_capacity(k);
                for (r, cells) in rows.iter().enumerate() {
                    let parsed = cells
                        .iter()
                        .map(|c| c.parse::<u64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(r + 3, e.to_string()))?;
                    counts.push(parsed);
                }
                Ok(ConfusionCsv::Counts {
                    matrix: ConfusionMatrix::from_counts(&counts)?,
                    class_names,
                })
            }
            CsvKind::Normalized => {
                let mut data = Vec::with_capacity(k * k);
                for (r, cells) in rows.iter().enumerate() {
                    for c in cells {
                        let v: f64 = c.parse().map_err(|e: std::num::ParseFloatError| {
                            Error::parse(r + 3, e.to_string())
                        })?;
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::parse(r + 3, format!("rate {v} outside [0, 1]")));
                        }
                        data.push(v);
                    }
                }
                Ok(ConfusionCsv::Normalized {
                    rates: DenseMatrix::from_vec(k, k, data)?,
                    class_names,
                })
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            ConfusionCsv::Counts { class_names, .. } | ConfusionCsv::Normalized { class_names, .. } => {
                class_names
            }
        }
    }

    /// Row-normalized rates, whichever variant was stored.
    pub fn rates(&self) -> DenseMatrix {
        match self {
            ConfusionCsv::Counts { matrix, .. } => matrix.normalized(),
            ConfusionCsv::Normalized { rates, .. } => rates.clone(),
        }
    }
}

/// A sorted, duplicate-free set of at least two classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfusingGroup {
    class_indices: Vec<usize>,
}

impl ConfusingGroup {
    pub fn new(mut class_indices: Vec<usize>) -> Result<Self> {
        class_indices.sort_unstable();
        if class_indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPartition(format!(
                "duplicate class in group {class_indices:?}"
            )));
        }
        if class_indices.len() < 2 {
            return Err(Error::InvalidPartition(format!(
                "group {class_indices:?} has fewer than two classes"
            )));
        }
        Ok(Self { class_indices })
    }

    pub fn classes(&self) -> &[usize] {
        &self.class_indices
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.class_indices.binary_search(&class).is_ok()
    }

    /// 0-based position of `class` within the sorted member list.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.class_indices.binary_search(&class).ok()
    }

    pub fn check_range(&self, class_count: usize) -> Result<()> {
        match self.class_indices.last() {
            Some(&max) if max >= class_count => Err(Error::InvalidPartition(format!(
                "group member {max} out of range for {class_count} classes"
            ))),
            _ => Ok(()),
        }
    }
}

/// Disjoint confusing groups plus the classes left out of every group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    class_count: usize,
    threshold: f64,
    groups: Vec<ConfusingGroup>,
    ungrouped: Vec<usize>,
}

impl GroupPartition {
    /// Validates disjointness and range; groups are re-ordered by smallest member.
    pub fn new(class_count: usize, mut groups: Vec<ConfusingGroup>, threshold: f64) -> Result<Self> {
        let mut owner = vec![false; class_count];
        for g in &groups {
            g.check_range(class_count)?;
            for &c in g.classes() {
                if owner[c] {
                    return Err(Error::InvalidPartition(format!(
                        "class {c} appears in more than one group"
                    )));
                }
                owner[c] = true;
            }
        }
        groups.sort_by_key(|g| g.classes()[0]);
        let ungrouped = (0..class_count).filter(|&c| !owner[c]).collect();
        Ok(Self {
            class_count,
            threshold,
            groups,
            ungrouped,
        })
    }

    pub fn empty(class_count: usize) -> Self {
        Self {
            class_count,
            threshold: DEFAULT_THRESHOLD,
            groups: Vec::new(),
            ungrouped: (0..class_count).collect(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn groups(&self) -> &[ConfusingGroup] {
        &self.groups
    }

    pub fn ungrouped(&self) -> &[usize] {
        &self.ungrouped
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Partition file: comment header, then one group per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# class_count={} threshold={}\n",
            self.class_count, self.threshold
        );
        for g in &self.groups {
            let members: Vec<String> = g.classes().iter().map(usize::to_string).collect();
            out.push_str(&members.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses a partition file for a `class_count`-class problem. The header
    /// comment is optional; when present it must agree with `class_count`.
    pub fn parse(text: &str, class_count: usize) -> Result<Self> {
        let mut threshold = DEFAULT_THRESHOLD;
        let mut groups = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split_whitespace() {
                    match field.split_once('=') {
                        Some(("class_count", v)) => {
                            let k: usize = v
                                .parse()
                                .map_err(|_| Error::parse(line_no, "bad class_count"))?;
                            if k != class_count {
                                return Err(Error::InvalidPartition(format!(
                                    "partition is for {k} classes, expected {class_count}"
                                )));
                            }
                        }
                        Some(("threshold", v)) => {
                            threshold =
                                v.parse().map_err(|_| Error::parse(line_no, "bad threshold"))?;
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let members = line
                .split_whitespace()
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
            groups.push(ConfusingGroup::new(members)?);
        }
        Self::new(class_count, groups, threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path, class_count: usize) -> Result<Self> {
        Self::parse(&read_file(path)?, class_count)
    }
}

fn check_square_rates(rates: &DenseMatrix) -> Result<usize> {
    let (r, c) = rates.shape();
    if r != c {
        return Err(Error::Shape(format!("rates must be square, got {r}x{c}")));
    }
    Ok(r)
}

/// Connected components of the thresholded symmetric-max confusion graph.
pub fn partition_groups(rates: &DenseMatrix, threshold: f64) -> Result<GroupPartition> {
    let k = check_square_rates(rates)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut components = UnionFind::<usize>::new(k);
    for i in 0..k {
        for j in (i + 1)..k {
            if rates.get(i, j).max(rates.get(j, i)) >= threshold {
                components.union(i, j);
            }
        }
    }
    let labels = components.into_labeling();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, &root) in labels.iter().enumerate() {
        members[root].push(class);
    }
    let groups = members
        .into_iter()
        .filter(|m| m.len() >= 2)
        .map(ConfusingGroup::new)
        .collect::<Result<Vec<_>>>()?;
    GroupPartition::new(k, groups, threshold)
}

/// `C = [c_ij]` weighting the confusion-penalizing loss.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    weights: DenseMatrix,
}

impl WeightMatrix {
    pub fn new(weights: DenseMatrix) -> Result<Self> {
        let k = check_square_rates(&weights)?;
        if weights.as_slice().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidInput("weights must lie in [0, 1]".into()));
        }
        if (0..k).any(|i| weights.get(i, i) <= 0.0) {
            return Err(Error::InvalidInput("diagonal weights must be positive".into()));
        }
        Ok(Self { weights })
    }

    pub fn identity(class_count: usize) -> Self {
        Self {
            weights: DenseMatrix::identity(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn get(&self, truth: usize, other: usize) -> f64 {
        self.weights.get(truth, other)
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.weights
    }
}

/// Off-diagonal weights copy the confusion rates; the diagonal is
/// `max(m_ii, diagonal_floor)`.
pub fn derive_weight_matrix(rates: &DenseMatrix, diagonal_floor: f64) -> Result<WeightMatrix> {
    let k = check_square_rates(rates)?;
    if !(diagonal_floor > 0.0 && diagonal_floor <= 1.0) {
        return Err(Error::Config(format!(
            "diagonal floor {diagonal_floor} outside (0, 1]"
        )));
    }
    let mut weights = rates.clone();
    for i in 0..k {
        weights.set(i, i, rates.get(i, i).max(diagonal_floor));
    }
    WeightMatrix::new(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rates(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn group_lists(p: &GroupPartition) -> Vec<Vec<usize>> {
        p.groups().iter().map(|g| g.classes().to_vec()).collect()
    }

    #[test]
    fn accumulate_hand_tally() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 1]]).unwrap());

        let mut perfect = ConfusionMatrix::new(3);
        perfect.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(perfect.trace(), perfect.total());

        let before = cm.clone();
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn accumulate_rejects_out_of_range_atomically() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.accumulate(&[0, 2], &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 2, class_count: 2 }));
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.accumulate(&[0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_cases() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 1]]).unwrap();
        assert_eq!(cm.normalized().as_slice(), &[0.5, 0.5, 0.0, 1.0]);

        let id = ConfusionMatrix::from_counts(&[vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(id.normalized(), DenseMatrix::identity(2));

        let zero_row = ConfusionMatrix::from_counts(&[vec![0, 0], vec![3, 1]]).unwrap();
        assert_eq!(zero_row.normalized().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn identity_has_no_groups() {
        let p = partition_groups(&DenseMatrix::identity(6), 0.05).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.ungrouped(), &[0, 1, 2, 3, 4, 5]);
    }

    fn five_class_rates() -> DenseMatrix {
        let mut m = vec![vec![0.001; 5]; 5];
        m[0][1] = 0.1;
        m[1][0] = 0.1;
        m[2][3] = 0.08;
        m[3][4] = 0.07;
        for (i, row) in m.iter_mut().enumerate() {
            let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            row[i] = 1.0 - off;
        }
        rates(&m)
    }

    #[test]
    fn five_class_components() {
        let p = partition_groups(&five_class_rates(), 0.05).unwrap();
        assert_eq!(group_lists(&p), vec![vec![0, 1], vec![2, 3, 4]]);
        assert!(p.ungrouped().is_empty());

        let p = partition_groups(&five_class_rates(), 0.2).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn one_directional_confusion_creates_edge() {
        let m = rates(&[vec![0.82, 0.18, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let p = partition_groups(&m, 0.1).unwrap();
        assert_eq!(group_lists(&p), vec![vec![0, 1]]);
        assert_eq!(p.ungrouped(), &[2]);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(partition_groups(&DenseMatrix::identity(3), 0.0).is_err());
        assert!(partition_groups(&DenseMatrix::identity(3), 1.0).is_err());
    }

    #[test]
    fn weight_matrix_rule() {
        let w = derive_weight_matrix(&DenseMatrix::identity(3), 0.1).unwrap();
        assert_eq!(w.as_matrix(), &DenseMatrix::identity(3));

        let m = rates(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let w = derive_weight_matrix(&m, 0.5).unwrap();
        assert_eq!(w.as_matrix(), &m);

        let m = rates(&[vec![0.0, 0.0], vec![0.2, 0.8]]);
        let w = derive_weight_matrix(&m, 0.5).unwrap();
        assert_eq!(w.as_matrix().row(0), &[0.5, 0.0]);

        assert!(derive_weight_matrix(&m, 0.0).is_err());
        assert!(derive_weight_matrix(&m, 1.5).is_err());
    }

    #[test]
    fn partition_validation() {
        let g1 = ConfusingGroup::new(vec![0, 1]).unwrap();
        let g2 = ConfusingGroup::new(vec![1, 2]).unwrap();
        assert!(GroupPartition::new(3, vec![g1.clone(), g2], 0.05).is_err());
        assert!(GroupPartition::new(1, vec![g1], 0.05).is_err());
        assert!(ConfusingGroup::new(vec![3]).is_err());
        assert!(ConfusingGroup::new(vec![3, 3]).is_err());
        assert_eq!(ConfusingGroup::new(vec![4, 2]).unwrap().classes(), &[2, 4]);
    }

    #[test]
    fn partition_file_round_trip() {
        let p = partition_groups(&five_class_rates(), 0.05).unwrap();
        let text = p.to_text();
        assert_eq!(text, "# class_count=5 threshold=0.05\n0 1\n2 3 4\n");
        assert_eq!(GroupPartition::parse(&text, 5).unwrap(), p);
        assert!(GroupPartition::parse(&text, 6).is_err());
        let bare = GroupPartition::parse("2 3\n", 4).unwrap();
        assert_eq!(group_lists(&bare), vec![vec![2, 3]]);
        assert!(matches!(
            GroupPartition::parse("0 x\n", 4),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 2, 0], vec![1, 4, 0], vec![0, 0, 7]]).unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let text = cm.to_csv(&names, CsvKind::Counts).unwrap();
        assert!(text.starts_with("# kind=counts\na,b,c\n3,2,0\n"));
        match ConfusionCsv::parse(&text).unwrap() {
            ConfusionCsv::Counts { matrix, class_names } => {
                assert_eq!(matrix, cm);
                assert_eq!(class_names, names);
            }
            other => panic!("{other:?}"),
        }
        let norm = ConfusionCsv::parse(&cm.to_csv(&names, CsvKind::Normalized).unwrap()).unwrap();
        assert_eq!(norm.rates(), cm.normalized());

        assert!(matches!(
            ConfusionCsv::parse("# kind=counts\na,b\n1,2\n3\n"),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(matches!(
            ConfusionCsv::parse("a,b\n1,2\n3,4\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn collapse_to_group_sums_others() {
        let cm = ConfusionMatrix::from_counts(&[
            vec![5, 1, 0, 2],
            vec![0, 6, 3, 0],
            vec![1, 2, 7, 0],
            vec![0, 0, 0, 9],
        ])
        .unwrap();
        let g = ConfusingGroup::new(vec![1, 2]).unwrap();
        let small = cm.collapse_to_group(&g).unwrap();
        // others = {0, 3}
        assert_eq!(
            small,
            ConfusionMatrix::from_counts(&[vec![16, 1, 0], vec![0, 6, 3], vec![1, 2, 7]]).unwrap()
        );
        assert_eq!(small.total(), cm.total());
    }

    fn random_rates(k: usize, seed: u64) -> DenseMatrix {
        let mut rng = crate::numeric::Rng::new(seed);
        let mut m = DenseMatrix::zeros(k, k);
        for i in 0..k {
            let row: Vec<f64> = (0..k)
                .map(|_| if rng.next_f64() < 0.3 { rng.next_f64() } else { 0.0 })
                .collect();
            let total: f64 = row.iter().sum::<f64>() + 1.0;
            for j in 0..k {
                m.set(i, j, (row[j] + if i == j { 1.0 } else { 0.0 }) / total);
            }
        }
        m
    }

    proptest! {
        #[test]
        fn grouping_commutes_with_relabeling(k in 2usize..12, seed in any::<u64>(), perm_seed in any::<u64>()) {
            let m = random_rates(k, seed);
            let mut perm: Vec<usize> = (0..k).collect();
            crate::numeric::Rng::new(perm_seed).shuffle(&mut perm);
            // permuted[perm[i]][perm[j]] = m[i][j]
            let mut permuted = DenseMatrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    permuted.set(perm[i], perm[j], m.get(i, j));
                }
            }
            let original = partition_groups(&m, 0.1).unwrap();
            let relabeled = partition_groups(&permuted, 0.1).unwrap();
            let mut mapped: Vec<Vec<usize>> = original
                .groups()
                .iter()
                .map(|g| {
                    let mut v: Vec<usize> = g.classes().iter().map(|&c| perm[c]).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            mapped.sort();
            prop_assert_eq!(mapped, group_lists(&relabeled));
        }

        #[test]
        fn accumulate_is_additive_over_batches(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 0..60),
            split in 0usize..60,
        ) {
            let split = split.min(pairs.len());
            let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let mut whole = ConfusionMatrix::new(5);
            whole.accumulate(&truth, &pred).unwrap();
            let mut a = ConfusionMatrix::new(5);
            a.accumulate(&truth[..split], &pred[..split]).unwrap();
            let mut b = ConfusionMatrix::new(5);
            b.accumulate(&truth[split..], &pred[split..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(whole, a);
        }
    }
}
