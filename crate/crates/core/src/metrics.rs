//! IoU, accuracy and intra-group confusion mass.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confusion::{ConfusionMatrix, GroupPartition};
use crate::data::Dataset;
use crate::ensemble::{predict, FusionConfig};
use crate::error::{write_file, Error, Result};
use crate::model::ModelState;

/// Per-class `TP / (TP + FP + FN)`; `None` when the denominator is zero.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.class_count())
        .map(|c| {
            let tp = cm.count(c, c);
            let fn_ = cm.row_total(c) - tp;
            let fp = cm.column_total(c) - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean over the defined IoUs; 0 when none is defined.
pub fn mean_iou(per_class: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        0.0
    } else {
        cm.trace() as f64 / total as f64
    }
}

/// Sum of off-diagonal normalized rates inside each group.
pub fn intra_group_mass(cm: &ConfusionMatrix, partition: &GroupPartition) -> Vec<f64> {
    let rates = cm.normalized();
    partition
        .groups()
        .iter()
        .map(|g| {
            let mut mass = 0.0;
            for &i in g.classes() {
                for &j in g.classes() {
                    if i != j {
                        mass += rates.get(i, j);
                    }
                }
            }
            mass
        })
        .collect()
}

/// Evaluation summary of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `null` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub intra_group_confusion_mass: Vec<f64>,
    /// How undefined IoUs enter `miou`.
    pub undefined_iou_policy: String,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, partition: &GroupPartition) -> Self {
        let per_class_iou = iou_per_class(&confusion);
        Self {
            miou: mean_iou(&per_class_iou),
            accuracy: accuracy(&confusion),
            intra_group_confusion_mass: intra_group_mass(&confusion, partition),
            undefined_iou_policy: "excluded".into(),
            per_class_iou,
            confusion,
        }
    }

    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        class_count: usize,
        partition: &GroupPartition,
    ) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(class_count);
        cm.accumulate(truth, predicted)?;
        Ok(Self::from_confusion(cm, partition))
    }

    pub fn total_intra_group_mass(&self) -> f64 {
        self.intra_group_confusion_mass.iter().sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }

    /// Two columns, `class iou`, defined classes only.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("# class iou\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            if let Some(v) = iou {
                let _ = writeln!(out, "{c} {v}");
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json())
    }
}

/// Fused predictions over `dataset`, scored against its labels.
pub fn evaluate(
    model: &ModelState,
    dataset: &Dataset,
    partition: &GroupPartition,
    fusion: &FusionConfig,
) -> Result<EvalReport> {
    if dataset.class_count() != model.class_count() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model {}",
            dataset.class_count(),
            model.class_count()
        )));
    }
    let predicted: Vec<usize> = predict(model, dataset.features(), partition, fusion)?
        .into_iter()
        .map(|p| p.class)
        .collect();
    EvalReport::from_predictions(dataset.labels(), &predicted, dataset.class_count(), partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confusion::{ConfusingGroup, ConfusionCsv, CsvKind};
    use proptest::prelude::*;

    fn cm(rows: &[Vec<u64>]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows).unwrap()
    }

    #[test]
    fn iou_cases() {
        let perfect = cm(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]);
        assert_eq!(iou_per_class(&perfect), vec![Some(1.0), Some(1.0), None]);
        assert_eq!(mean_iou(&iou_per_class(&perfect)), 1.0);

        let ious = iou_per_class(&cm(&[vec![3, 2], vec![1, 4]]));
        assert_eq!(ious[0], Some(0.5));
        assert!((ious[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let p = GroupPartition::empty(2);
        let truth = [0, 1, 0, 1, 1, 0];
        let r = EvalReport::from_predictions(&truth, &truth, 2, &p).unwrap();
        assert_eq!((r.miou, r.accuracy), (1.0, 1.0));

        // always class 0 on balanced data: TP0 = 3, FP0 = 3; class 1 IoU = 0
        let r = EvalReport::from_predictions(&truth, &[0; 6], 2, &p).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn intra_group_mass_cases() {
        let g = |v: &[usize]| ConfusingGroup::new(v.to_vec()).unwrap();
        let p = GroupPartition::new(3, vec![g(&[0, 1])], 0.05).unwrap();
        let ident = cm(&[vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]);
        assert_eq!(intra_group_mass(&ident, &p), vec![0.0]);

        let confused = cm(&[vec![9, 1, 0], vec![1, 9, 0], vec![0, 0, 5]]);
        let mass = intra_group_mass(&confused, &p);
        assert!((mass[0] - 0.2).abs() < 1e-15);

        assert!(intra_group_mass(&confused, &GroupPartition::empty(3)).is_empty());
    }

    #[test]
    fn report_survives_csv_and_json() {
        let g = ConfusingGroup::new(vec![1, 2]).unwrap();
        let p = GroupPartition::new(3, vec![g], 0.05).unwrap();
        let r = EvalReport::from_predictions(&[0, 1, 2, 2, 1], &[0, 2, 2, 1, 1], 3, &p).unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let csv = r.confusion.to_csv(&names, CsvKind::Counts).unwrap();
        let ConfusionCsv::Counts { matrix, .. } = ConfusionCsv::parse(&csv).unwrap() else {
            panic!("counts expected");
        };
        assert_eq!(EvalReport::from_confusion(matrix, &p), r);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.plot_data().lines().count(), 4);
    }

    proptest! {
        #[test]
        fn iou_bounded_by_recall_and_precision(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        ) {
            let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let mut m = ConfusionMatrix::new(4);
            m.accumulate(&truth, &pred).unwrap();
            let ious = iou_per_class(&m);
            for c in 0..4 {
                let tp = m.count(c, c) as f64;
                if let Some(iou) = ious[c] {
                    prop_assert!((0.0..=1.0).contains(&iou));
                    if m.row_total(c) > 0 {
                        prop_assert!(iou <= tp / m.row_total(c) as f64 + 1e-15);
                    }
                    if m.column_total(c) > 0 {
                        prop_assert!(iou <= tp / m.column_total(c) as f64 + 1e-15);
                    }
                }
            }
            prop_assert_eq!(accuracy(&m), m.trace() as f64 / m.total() as f64);
        }
    }
}
