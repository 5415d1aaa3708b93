//! Fusion of subnets whose output spaces differ.
//!
//! A group subnet's distribution lives on `{others} ∪ G`. It is carried to
//! the full label space by copying the in-group entries one-to-one and
//! splitting the "others" mass over the classes outside `G` in proportion to
//! subnet 0's distribution. The transformed distributions are then combined
//! with the sum or product rule.

use std::fmt::Write as _;
use std::path::Path;

use crate::confusion::{ConfusingGroup, GroupPartition};
use crate::error::{write_file, Error, Result};
use crate::numeric::{softmax_rows, DenseMatrix, ProbabilityVector};
use crate::model::ModelState;

/// Below this the reference mass outside the group is treated as zero.
const REFERENCE_MASS_FLOOR: f64 = 1e-12;
/// Lower clamp for the product rule.
const PRODUCT_FLOOR: f64 = 1e-12;

/// Transformation from a group subnet's source space to the full label space.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpaceMap {
    group: ConfusingGroup,
    target_class_count: usize,
    others_targets: Vec<usize>,
}

impl OutputSpaceMap {
    pub fn new(group: ConfusingGroup, target_class_count: usize) -> Result<Self> {
        group.check_range(target_class_count)?;
        let others_targets = (0..target_class_count).filter(|&c| !group.contains(c)).collect();
        Ok(Self {
            group,
            target_class_count,
            others_targets,
        })
    }

    pub fn group(&self) -> &ConfusingGroup {
        &self.group
    }

    pub fn source_size(&self) -> usize {
        self.group.len() + 1
    }

    pub fn target_class_count(&self) -> usize {
        self.target_class_count
    }

    /// Target class of source index `s ≥ 1`.
    pub fn target_of(&self, source: usize) -> Option<usize> {
        source.checked_sub(1).and_then(|p| self.group.classes().get(p).copied())
    }

    /// Classes outside the group, sorted; the image of source index 0.
    pub fn others_targets(&self) -> &[usize] {
        &self.others_targets
    }
}

/// Carries `source` (over `|G| + 1`) into the `K`-class space.
///
/// In-group entries are copied unchanged. The "others" entry is split over
/// the out-group classes proportionally to `reference`, or uniformly when
/// the reference puts (almost) no mass there. When the group covers every
/// class there is nowhere to put "others" mass, so the in-group entries are
/// rescaled by `1 / (1 − source[0])` instead.
pub fn transform(
    source: &ProbabilityVector,
    map: &OutputSpaceMap,
    reference: &ProbabilityVector,
) -> Result<ProbabilityVector> {
    if source.len() != map.source_size() {
        return Err(Error::Shape(format!(
            "source distribution has {} entries, map expects {}",
            source.len(),
            map.source_size()
        )));
    }
    if reference.len() != map.target_class_count {
        return Err(Error::Shape(format!(
            "reference distribution has {} entries, map expects {}",
            reference.len(),
            map.target_class_count
        )));
    }
    let src = source.values();
    let reference = reference.values();
    let mut target = vec![0.0; map.target_class_count];
    let others_mass = src[0];

    if map.others_targets.is_empty() {
        let keep = 1.0 - others_mass;
        if keep <= 0.0 {
            return Err(Error::InvalidInput(
                "subnet puts all mass on an empty \"others\" class".into(),
            ));
        }
        for (p, &c) in map.group.classes().iter().enumerate() {
            target[c] = if others_mass == 0.0 { src[p + 1] } else { src[p + 1] / keep };
        }
        return Ok(ProbabilityVector::from_normalized(target));
    }

    for (p, &c) in map.group.classes().iter().enumerate() {
        target[c] = src[p + 1];
    }
    let reference_mass: f64 = map.others_targets.iter().map(|&c| reference[c]).sum();
    if reference_mass < REFERENCE_MASS_FLOOR {
        let share = others_mass / map.others_targets.len() as f64;
        for &c in &map.others_targets {
            target[c] = share;
        }
    } else {
        for &c in &map.others_targets {
            target[c] = others_mass * reference[c] / reference_mass;
        }
    }
    Ok(ProbabilityVector::from_normalized(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionRule {
    Sum,
    #[default]
    Product,
}

impl FusionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionRule::Sum => "sum",
            FusionRule::Product => "product",
        }
    }
}

impl std::str::FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionRule::Sum),
            "product" => Ok(FusionRule::Product),
            other => Err(Error::Config(format!("unknown fusion rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub rule: FusionRule,
    /// Whether subnet 0's own distribution takes part in the fusion. It is
    /// always used as the transformation reference.
    pub include_subnet0: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rule: FusionRule::Product,
            include_subnet0: true,
        }
    }
}

/// Sum rule: renormalized arithmetic mean. Product rule: renormalized
/// geometric mean of entries clamped below at 1e-12. A single input is
/// returned unchanged.
pub fn fuse(distributions: &[ProbabilityVector], cfg: &FusionConfig) -> Result<ProbabilityVector> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to fuse".into()))?;
    let k = first.len();
    if distributions.iter().any(|d| d.len() != k) {
        return Err(Error::Shape("distributions of different lengths".into()));
    }
    if distributions.len() == 1 {
        return Ok(first.clone());
    }
    let m = distributions.len() as f64;
    let combined: Vec<f64> = (0..k)
        .map(|c| match cfg.rule {
            FusionRule::Sum => distributions.iter().map(|d| d.values()[c]).sum::<f64>() / m,
            FusionRule::Product => {
                let log_mean = distributions
                    .iter()
                    .map(|d| d.values()[c].max(PRODUCT_FLOOR).ln())
                    .sum::<f64>()
                    / m;
                log_mean.exp()
            }
        })
        .collect();
    ProbabilityVector::normalize(combined)
}

/// Fused distribution and its argmax for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: ProbabilityVector,
    pub class: usize,
}

/// Runs every head, transforms group heads into the full space with head 0
/// as reference, and fuses.
pub fn predict(
    model: &ModelState,
    features: &DenseMatrix,
    partition: &GroupPartition,
    cfg: &FusionConfig,
) -> Result<Vec<Prediction>> {
    model.check_partition(partition)?;
    let k = model.class_count();
    let maps = partition
        .groups()
        .iter()
        .map(|g| OutputSpaceMap::new(g.clone(), k))
        .collect::<Result<Vec<_>>>()?;
    let per_head = model
        .forward_all(features)?
        .iter()
        .map(softmax_rows)
        .collect::<Result<Vec<_>>>()?;
    (0..features.rows())
        .map(|r| {
            let reference = &per_head[0][r];
            let mut members = Vec::with_capacity(per_head.len());
            if cfg.include_subnet0 || maps.is_empty() {
                members.push(reference.clone());
            }
            for (map, head) in maps.iter().zip(&per_head[1..]) {
                members.push(transform(&head[r], map, reference)?);
            }
            let distribution = fuse(&members, cfg)?;
            Ok(Prediction {
                class: distribution.argmax(),
                distribution,
            })
        })
        .collect()
}

/// CSV of `index,class,p_0,...,p_{K-1}` per sample.
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let k = predictions.first().map_or(0, |p| p.distribution.len());
    let mut out = String::from("index,class");
    for c in 0..k {
        let _ = write!(out, ",p{c}");
    }
    out.push('\n');
    for (i, p) in predictions.iter().enumerate() {
        let _ = write!(out, "{i},{}", p.class);
        for v in p.distribution.values() {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

pub fn save_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    write_file(path, &predictions_csv(predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn map(g: &[usize], k: usize) -> OutputSpaceMap {
        OutputSpaceMap::new(ConfusingGroup::new(g.to_vec()).unwrap(), k).unwrap()
    }

    #[test]
    fn transform_full_group_is_reindexing() {
        let m = map(&[0, 1, 2], 3);
        let out = transform(&pv(&[0.0, 0.2, 0.5, 0.3]), &m, &pv(&[0.1, 0.1, 0.8])).unwrap();
        assert_eq!(out.values(), &[0.2, 0.5, 0.3]);
    }

    #[test]
    fn transform_proportional_split() {
        let m = map(&[1, 2], 4);
        let out = transform(&pv(&[0.5, 0.3, 0.2]), &m, &pv(&[0.4, 0.2, 0.1, 0.3])).unwrap();
        // 0.5·0.4/0.7 and 0.5·0.3/0.7
        let expected = [2.0 / 7.0, 0.3, 0.2, 1.5 / 7.0];
        for (a, b) in out.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((out.values()[0] - 0.285_71).abs() < 1e-5);
        assert!((out.values()[3] - 0.214_29).abs() < 1e-5);
    }

    #[test]
    fn transform_all_others_with_uniform_reference() {
        let m = map(&[0, 2], 5);
        let out = transform(&pv(&[1.0, 0.0, 0.0]), &m, &pv(&[0.2; 5])).unwrap();
        for (c, &v) in out.values().iter().enumerate() {
            let expected = if c == 0 || c == 2 { 0.0 } else { 1.0 / 3.0 };
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn transform_uniform_fallback_when_reference_is_in_group() {
        let m = map(&[0, 1], 4);
        let out = transform(&pv(&[0.4, 0.3, 0.3]), &m, &pv(&[0.5, 0.5, 0.0, 0.0])).unwrap();
        assert_eq!(out.values(), &[0.3, 0.3, 0.2, 0.2]);
    }

    #[test]
    fn transform_shape_errors() {
        let m = map(&[1, 2], 4);
        assert!(matches!(
            transform(&pv(&[0.5, 0.5]), &m, &pv(&[0.25; 4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            transform(&pv(&[0.5, 0.3, 0.2]), &m, &pv(&[0.5, 0.5])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fuse_examples() {
        let d = pv(&[0.6, 0.3, 0.1]);
        for rule in [FusionRule::Sum, FusionRule::Product] {
            let cfg = FusionConfig { rule, include_subnet0: true };
            assert_eq!(fuse(std::slice::from_ref(&d), &cfg).unwrap(), d);
        }
        let sum = FusionConfig { rule: FusionRule::Sum, include_subnet0: true };
        assert_eq!(fuse(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])], &sum).unwrap().values(), &[0.5, 0.5]);

        let product = FusionConfig::default();
        let out = fuse(&[pv(&[0.8, 0.2]), pv(&[0.5, 0.5])], &product).unwrap();
        // √0.4 / (√0.4 + √0.1) = 2/3
        assert!((out.values()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.values()[1] - 1.0 / 3.0).abs() < 1e-12);

        assert!(matches!(fuse(&[], &product), Err(Error::InvalidInput(_))));
        assert!(matches!(
            fuse(&[pv(&[1.0, 0.0]), pv(&[1.0, 0.0, 0.0])], &product),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn product_rule_lets_a_specialist_veto() {
        // subnet 0 mildly prefers class 1; the transformed specialist is sure it is class 0
        let out = fuse(&[pv(&[0.45, 0.55, 0.0]), pv(&[0.9, 0.1, 0.0])], &FusionConfig::default()).unwrap();
        assert_eq!(out.argmax(), 0);
    }

    #[test]
    fn fusion_rule_parsing() {
        assert_eq!("sum".parse::<FusionRule>().unwrap(), FusionRule::Sum);
        assert_eq!("product".parse::<FusionRule>().unwrap(), FusionRule::Product);
        assert!("max".parse::<FusionRule>().is_err());
    }

    fn random_distribution(rng: &mut Rng, k: usize) -> ProbabilityVector {
        let w: Vec<f64> = (0..k).map(|_| rng.next_f64() + 1e-3).collect();
        ProbabilityVector::normalize(w).unwrap()
    }

    fn random_map(rng: &mut Rng, k: usize) -> OutputSpaceMap {
        let mut classes: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut classes);
        let size = 2 + rng.below(k - 2);
        map(&classes[..size], k)
    }

    proptest! {
        #[test]
        fn similarity_preservation(seed in any::<u64>(), k in 3usize..16) {
            let mut rng = Rng::new(seed);
            let m = random_map(&mut rng, k);
            let source = random_distribution(&mut rng, m.source_size());
            let reference = random_distribution(&mut rng, k);
            let out = transform(&source, &m, &reference).unwrap();
            for s in 1..m.source_size() {
                prop_assert_eq!(out.values()[m.target_of(s).unwrap()].to_bits(), source.values()[s].to_bits());
            }
            let others: f64 = m.others_targets().iter().map(|&c| out.values()[c]).sum();
            prop_assert!((others - source.values()[0]).abs() <= 1e-12);
            prop_assert!((out.values().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn consistent_subnet_reproduces_reference(seed in any::<u64>(), k in 3usize..16) {
            let mut rng = Rng::new(seed);
            let m = random_map(&mut rng, k);
            let reference = random_distribution(&mut rng, k);
            let others: f64 = m.others_targets().iter().map(|&c| reference.values()[c]).sum();
            let mut source = vec![others];
            source.extend(m.group().classes().iter().map(|&c| reference.values()[c]));
            let source = ProbabilityVector::new(source).unwrap();
            let out = transform(&source, &m, &reference).unwrap();
            for (a, b) in out.values().iter().zip(reference.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn fusion_is_permutation_invariant_and_idempotent(seed in any::<u64>(), k in 2usize..10, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let dists: Vec<ProbabilityVector> = (0..n).map(|_| random_distribution(&mut rng, k)).collect();
            let mut shuffled = dists.clone();
            rng.shuffle(&mut shuffled);
            for rule in [FusionRule::Sum, FusionRule::Product] {
                let cfg = FusionConfig { rule, include_subnet0: true };
                let a = fuse(&dists, &cfg).unwrap();
                let b = fuse(&shuffled, &cfg).unwrap();
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
                let same = fuse(&vec![dists[0].clone(); n], &cfg).unwrap();
                for (x, y) in same.values().iter().zip(dists[0].values()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
