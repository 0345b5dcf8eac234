//! Pixel-level segmentation metrics.
//!
//! Counts accumulate over a whole dataset before any ratio is taken.
//! Pixels labeled [`AMBIGUOUS`] in either mask are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{SeedMask, AMBIGUOUS, BACKGROUND};

/// Confusion matrix over `classes + 1` labels (background first).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionCounts {
    labels: usize,
    // counts[gt * labels + pred]
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        let labels = classes + 1;
        ConfusionCounts {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn classes(&self) -> usize {
        self.labels - 1
    }

    pub fn add(&mut self, pred: &SeedMask, gt: &SeedMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            let (a, b) = (pred.dims(), gt.dims());
            return Err(Error::shape("confusion", &[a.0, a.1], &[b.0, b.1]));
        }
        for (&p, &g) in pred.labels.data.iter().zip(&gt.labels.data) {
            if p == AMBIGUOUS || g == AMBIGUOUS {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.labels || g >= self.labels {
                return Err(Error::invalid(
                    "confusion",
                    format!("label {} outside 0..{}", p.max(g), self.labels),
                ));
            }
            self.counts[g * self.labels + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::invalid("confusion", "label counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.labels + pred]
    }

    fn true_positive(&self, l: usize) -> u64 {
        self.get(l, l)
    }

    fn predicted(&self, l: usize) -> u64 {
        (0..self.labels).map(|g| self.get(g, l)).sum()
    }

    fn actual(&self, l: usize) -> u64 {
        (0..self.labels).map(|p| self.get(l, p)).sum()
    }

    /// IoU per label, `None` for labels absent from both masks.
    pub fn miou(&self) -> MiouReport {
        let per_label: Vec<Option<f64>> = (0..self.labels)
            .map(|l| {
                let tp = self.true_positive(l);
                let union = self.predicted(l) + self.actual(l) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_label.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_label, mean }
    }

    /// Precision, recall and F1 of each object class, macro-averaged
    /// over classes present in either mask.
    pub fn precision_recall_f1(&self) -> PrfReport {
        let mut per_class = Vec::with_capacity(self.labels - 1);
        for l in 1..self.labels {
            let tp = self.true_positive(l) as f64;
            let (pred, actual) = (self.predicted(l), self.actual(l));
            let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
            let (precision, recall) = (ratio(pred), ratio(actual));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassPrf {
                class: l - 1,
                precision,
                recall,
                f1,
                precision_undefined: pred == 0,
                recall_undefined: actual == 0,
            });
        }
        let used: Vec<&ClassPrf> = per_class
            .iter()
            .filter(|c| !(c.precision_undefined && c.recall_undefined))
            .collect();
        let avg = |f: fn(&ClassPrf) -> f64| {
            if used.is_empty() {
                0.0
            } else {
                used.iter().map(|c| f(c)).sum::<f64>() / used.len() as f64
            }
        };
        PrfReport {
            precision: avg(|c| c.precision),
            recall: avg(|c| c.recall),
            f1: avg(|c| c.f1),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Index 0 is background; index `c + 1` is class `c`.
    pub per_label: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No pixel was predicted as this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No pixel of this class in the ground truth; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassPrf>,
}

pub fn miou(pred: &SeedMask, gt: &SeedMask, classes: usize) -> Result<MiouReport> {
    let mut c = ConfusionCounts::new(classes);
    c.add(pred, gt)?;
    Ok(c.miou())
}

pub fn precision_recall_f1(pred: &SeedMask, gt: &SeedMask, classes: usize) -> Result<PrfReport> {
    let mut c = ConfusionCounts::new(classes);
    c.add(pred, gt)?;
    Ok(c.precision_recall_f1())
}

/// Pixels that became foreground between the initial seed and a later
/// one, and how many of them are background in the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseCounts {
    pub newly_localized: u64,
    pub in_background: u64,
}

impl NoiseCounts {
    pub fn add(&mut self, other: NoiseCounts) {
        self.newly_localized += other.newly_localized;
        self.in_background += other.in_background;
    }

    pub fn is_empty(&self) -> bool {
        self.newly_localized == 0
    }

    /// Zero when nothing new was localized.
    pub fn rate(&self) -> f64 {
        if self.newly_localized == 0 {
            0.0
        } else {
            self.in_background as f64 / self.newly_localized as f64
        }
    }
}

/// Compares each later seed in `steps` against `steps[0]`.
pub fn proportion_of_noise(steps: &[SeedMask], gt: &SeedMask) -> Result<Vec<NoiseCounts>> {
    let Some(first) = steps.first() else {
        return Ok(Vec::new());
    };
    steps
        .iter()
        .map(|seed| {
            for m in [first, seed] {
                if m.dims() != gt.dims() {
                    let (a, b) = (m.dims(), gt.dims());
                    return Err(Error::shape("proportion_of_noise", &[a.0, a.1], &[b.0, b.1]));
                }
            }
            let mut counts = NoiseCounts::default();
            for i in 0..gt.labels.data.len() {
                let g = gt.labels.data[i];
                if g == AMBIGUOUS || !seed.is_foreground(i) || first.labels.data[i] != BACKGROUND {
                    continue;
                }
                counts.newly_localized += 1;
                if g == BACKGROUND {
                    counts.in_background += 1;
                }
            }
            Ok(counts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Grid;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn mask(h: usize, w: usize, v: &[u8]) -> SeedMask {
        SeedMask::new(Grid::from_vec(h, w, v.to_vec()).unwrap())
    }

    // Set-based oracle: IoU of each label from explicit pixel index sets.
    fn iou_oracle(pred: &[u8], gt: &[u8], labels: u8) -> (Vec<Option<f64>>, f64) {
        let valid: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != 255 && gt[i] != 255).collect();
        let mut per = Vec::new();
        for l in 0..labels {
            let p: BTreeSet<usize> = valid.iter().copied().filter(|&i| pred[i] == l).collect();
            let g: BTreeSet<usize> = valid.iter().copied().filter(|&i| gt[i] == l).collect();
            let union = p.union(&g).count();
            per.push((union > 0).then(|| p.intersection(&g).count() as f64 / union as f64));
        }
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (per, mean)
    }

    fn prf_oracle(pred: &[u8], gt: &[u8], classes: u8) -> (f64, f64, f64) {
        let valid: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != 255 && gt[i] != 255).collect();
        let mut rows = Vec::new();
        for l in 1..=classes {
            let tp = valid.iter().filter(|&&i| pred[i] == l && gt[i] == l).count() as f64;
            let np = valid.iter().filter(|&&i| pred[i] == l).count() as f64;
            let ng = valid.iter().filter(|&&i| gt[i] == l).count() as f64;
            if np == 0.0 && ng == 0.0 {
                continue;
            }
            let p = if np > 0.0 { tp / np } else { 0.0 };
            let r = if ng > 0.0 { tp / ng } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            rows.push((p, r, f));
        }
        let n = rows.len().max(1) as f64;
        (
            rows.iter().map(|r| r.0).sum::<f64>() / n,
            rows.iter().map(|r| r.1).sum::<f64>() / n,
            rows.iter().map(|r| r.2).sum::<f64>() / n,
        )
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(2, 3, &[0, 1, 2, 2, 1, 0]);
        let r = miou(&m, &m, 2).unwrap();
        assert!(r.per_label.iter().all(|v| *v == Some(1.0)));
        assert_eq!(r.mean, 1.0);
        let p = precision_recall_f1(&m, &m, 2).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let pred = mask(1, 4, &[1, 1, 0, 0]);
        let gt = mask(1, 4, &[0, 0, 1, 1]);
        let r = miou(&pred, &gt, 1).unwrap();
        assert_eq!(r.per_label[1], Some(0.0));
    }

    #[test]
    fn absent_classes_are_excluded_and_ambiguous_ignored() {
        let pred = mask(1, 4, &[0, 1, 255, 1]);
        let gt = mask(1, 4, &[0, 1, 1, 255]);
        let r = miou(&pred, &gt, 3).unwrap();
        assert_eq!(r.per_label, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn crafted_4x4_matches_pixel_count() {
        let pred = [0, 0, 1, 1, 0, 1, 1, 1, 2, 2, 0, 0, 2, 255, 0, 1];
        let gt = [0, 1, 1, 1, 0, 0, 1, 255, 2, 2, 2, 0, 0, 2, 0, 1];
        let r = miou(&mask(4, 4, &pred), &mask(4, 4, &gt), 2).unwrap();
        let (per, mean) = iou_oracle(&pred, &gt, 3);
        assert_eq!(r.per_label, per);
        assert_eq!(r.mean, mean);
        // Hand count: bg 4/8, class 1 4/6, class 2 2/4.
        assert_eq!(per, vec![Some(4.0 / 8.0), Some(4.0 / 6.0), Some(2.0 / 4.0)]);
        let p = precision_recall_f1(&mask(4, 4, &pred), &mask(4, 4, &gt), 2).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), prf_oracle(&pred, &gt, 2));
    }

    #[test]
    fn empty_prediction_flags_precision() {
        let p = precision_recall_f1(&mask(1, 3, &[0, 0, 0]), &mask(1, 3, &[1, 1, 0]), 1).unwrap();
        let c = &p.per_class[0];
        assert!(c.precision_undefined && !c.recall_undefined);
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn shape_mismatch_fails() {
        assert!(miou(&mask(1, 3, &[0; 3]), &mask(3, 1, &[0; 3]), 1).is_err());
        assert!(miou(&mask(1, 1, &[4]), &mask(1, 1, &[0]), 2).is_err());
    }

    #[test]
    fn noise_first_step_is_empty() {
        let s0 = mask(1, 3, &[0, 1, 0]);
        let gt = mask(1, 3, &[0, 1, 1]);
        let r = proportion_of_noise(&[s0], &gt).unwrap();
        assert!(r[0].is_empty());
        assert_eq!(r[0].rate(), 0.0);
    }

    #[test]
    fn noise_inside_object_is_zero() {
        let s0 = mask(1, 4, &[0, 1, 0, 0]);
        let s1 = mask(1, 4, &[0, 1, 1, 0]);
        let gt = mask(1, 4, &[0, 1, 1, 0]);
        let r = proportion_of_noise(&[s0, s1], &gt).unwrap();
        assert_eq!(r[1], NoiseCounts { newly_localized: 1, in_background: 0 });
    }

    #[test]
    fn noise_crafted_trace_matches_set_oracle() {
        let s0 = [0, 1, 0, 0, 0, 2, 0, 0, 0];
        let s1 = [1, 1, 0, 2, 0, 2, 0, 0, 255];
        let s2 = [1, 1, 1, 2, 2, 2, 1, 0, 1];
        let gt = [0, 1, 1, 2, 0, 2, 255, 0, 1];
        let steps: Vec<SeedMask> = [s0, s1, s2].iter().map(|s| mask(3, 3, s)).collect();
        let r = proportion_of_noise(&steps, &mask(3, 3, &gt)).unwrap();
        for (t, s) in [s0, s1, s2].iter().enumerate() {
            let new: BTreeSet<usize> = (0..9)
                .filter(|&i| s[i] != 0 && s[i] != 255 && s0[i] == 0 && gt[i] != 255)
                .collect();
            let bg: BTreeSet<usize> = (0..9).filter(|&i| gt[i] == 0).collect();
            assert_eq!(r[t].newly_localized, new.len() as u64);
            assert_eq!(r[t].in_background, new.intersection(&bg).count() as u64);
        }
        assert_eq!(r[2].rate(), 2.0 / 5.0);
    }

    proptest! {
        #[test]
        fn metrics_match_oracles(
            pred in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 3, 255]), 64),
            gt in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 3, 255]), 64),
        ) {
            let (p, g) = (mask(8, 8, &pred), mask(8, 8, &gt));
            let r = miou(&p, &g, 3).unwrap();
            let (per, mean) = iou_oracle(&pred, &gt, 4);
            prop_assert_eq!(r.per_label, per);
            prop_assert!((r.mean - mean).abs() < 1e-15);
            let f = precision_recall_f1(&p, &g, 3).unwrap();
            let (op, or, of) = prf_oracle(&pred, &gt, 3);
            prop_assert!((f.precision - op).abs() < 1e-15);
            prop_assert!((f.recall - or).abs() < 1e-15);
            prop_assert!((f.f1 - of).abs() < 1e-15);
        }

        #[test]
        fn miou_is_invariant_to_class_permutation(
            pred in prop::collection::vec(0u8..4, 36),
            gt in prop::collection::vec(0u8..4, 36),
            perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let a = miou(&mask(6, 6, &pred), &mask(6, 6, &gt), 3).unwrap();
            let relabel = |v: &[u8]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
            let b = miou(&mask(6, 6, &relabel(&pred)), &mask(6, 6, &relabel(&gt)), 3).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            for l in 0..4 {
                prop_assert_eq!(a.per_label[l], b.per_label[perm[l] as usize]);
            }
        }

        #[test]
        fn rates_are_bounded(
            pred in prop::collection::vec(0u8..3, 16),
            gt in prop::collection::vec(0u8..3, 16),
        ) {
            let f = precision_recall_f1(&mask(4, 4, &pred), &mask(4, 4, &gt), 2).unwrap();
            for v in [f.precision, f.recall, f.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
