//! Multi-label evaluation: per-class precision/recall plus the macro (CP,
//! CR, CF1) and micro (OP, OR, OF1) aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
    /// Classes where 0/0 -> 0 was applied (no positives and no positive
    /// predictions).
    pub empty_classes: Vec<usize>,
}

/// Threshold probabilities to binary predictions; the boundary is inclusive.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs
        .iter()
        .map(|&p| if p >= threshold { 1 } else { 0 })
        .collect()
}

/// Exact per-class confusion counts over a batch of binary label vectors.
pub fn confusion(preds: &[Vec<u8>], targets: &[Vec<u8>], classes: usize) -> Result<ConfusionCounts> {
    if preds.len() != targets.len() {
        return Err(Error::dim(format!(
            "confusion: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut per_class = vec![ClassCounts::default(); classes];
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != classes || t.len() != classes {
            return Err(Error::dim(format!(
                "confusion: label vectors of length {}/{} vs {} classes",
                p.len(),
                t.len(),
                classes
            )));
        }
        for k in 0..classes {
            let counts = &mut per_class[k];
            match (p[k] != 0, t[k] != 0) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts { per_class })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0 // 0/0 -> 0 convention for empty classes
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Macro/micro report from confusion counts. CP/CR are unweighted means of
/// per-class precision/recall; OP/OR pool counts over all image-label pairs.
pub fn report(counts: &ConfusionCounts) -> MetricsReport {
    let k = counts.per_class.len();
    let mut per_class = Vec::with_capacity(k);
    let mut empty_classes = Vec::new();
    let (mut cp, mut cr) = (0.0, 0.0);
    let (mut tp_sum, mut pred_pos_sum, mut actual_pos_sum) = (0u64, 0u64, 0u64);
    for (idx, c) in counts.per_class.iter().enumerate() {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        if c.tp + c.fp == 0 && c.tp + c.fn_ == 0 {
            empty_classes.push(idx);
        }
        cp += precision;
        cr += recall;
        tp_sum += c.tp;
        pred_pos_sum += c.tp + c.fp;
        actual_pos_sum += c.tp + c.fn_;
        per_class.push(ClassMetrics { precision, recall });
    }
    cp /= k as f64;
    cr /= k as f64;
    let op = ratio(tp_sum, pred_pos_sum);
    let or_ = ratio(tp_sum, actual_pos_sum);
    MetricsReport {
        per_class,
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or_,
        of1: harmonic(op, or_),
        empty_classes,
    }
}

/// The aggregate formulas exactly as printed, for comparison. OR there
/// counts label agreements (true negatives included) over total positives,
/// so it can exceed 1; OP is plain Hamming accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaperLiteralReport {
    pub cr: f64,
    pub cp: f64,
    pub or_: f64,
    pub op: f64,
}

pub fn paper_literal_report(
    preds: &[Vec<u8>],
    targets: &[Vec<u8>],
    classes: usize,
) -> Result<PaperLiteralReport> {
    let counts = confusion(preds, targets, classes)?;
    let std = report(&counts);
    let n = preds.len() as f64;
    let k = classes as f64;
    let mut agreements = 0u64;
    let mut positives = 0u64;
    for (p, t) in preds.iter().zip(targets) {
        for idx in 0..classes {
            if p[idx] == t[idx] {
                agreements += 1;
            }
            positives += t[idx] as u64;
        }
    }
    Ok(PaperLiteralReport {
        // the double sum over n and k of a per-class quantity divided by NK
        // collapses to the macro mean
        cr: std.cr,
        cp: std.cp,
        or_: if positives == 0 {
            0.0
        } else {
            agreements as f64 / positives as f64
        },
        op: agreements as f64 / (n * k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_boundary_inclusive() {
        assert_eq!(binarize(&[0.5, 0.49, 0.0], 0.5), vec![1, 0, 0]);
        assert_eq!(binarize(&[0.0, 0.0], 0.5), vec![0, 0]);
        assert_eq!(binarize(&[0.999], 1.0), vec![0]);
    }

    #[test]
    fn confusion_perfect_and_complement() {
        let t = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let c = confusion(&t, &t, 2).unwrap();
        for cc in &c.per_class {
            assert_eq!(cc.fp, 0);
            assert_eq!(cc.fn_, 0);
        }
        let inv: Vec<Vec<u8>> = t
            .iter()
            .map(|row| row.iter().map(|v| 1 - v).collect())
            .collect();
        let c2 = confusion(&inv, &t, 2).unwrap();
        for cc in &c2.per_class {
            assert_eq!(cc.tp, 0);
            assert_eq!(cc.tn, 0);
        }
    }

    #[test]
    fn confusion_hand_tally() {
        // 4 images x 4 classes, tallied by hand
        let preds = vec![
            vec![1, 0, 0, 0],
            vec![1, 1, 0, 0],
            vec![0, 0, 1, 0],
            vec![0, 0, 0, 0],
        ];
        let targets = vec![
            vec![1, 0, 0, 0],
            vec![0, 1, 0, 0],
            vec![0, 0, 1, 1],
            vec![0, 0, 0, 1],
        ];
        let c = confusion(&preds, &targets, 4).unwrap();
        assert_eq!(c.per_class[0], ClassCounts { tp: 1, fp: 1, fn_: 0, tn: 2 });
        assert_eq!(c.per_class[1], ClassCounts { tp: 1, fp: 0, fn_: 0, tn: 3 });
        assert_eq!(c.per_class[2], ClassCounts { tp: 1, fp: 0, fn_: 0, tn: 3 });
        assert_eq!(c.per_class[3], ClassCounts { tp: 0, fp: 0, fn_: 2, tn: 2 });
    }

    #[test]
    fn report_perfect_predictions() {
        let t = vec![vec![1, 0], vec![0, 1]];
        let r = report(&confusion(&t, &t, 2).unwrap());
        for v in [r.cp, r.cr, r.cf1, r.op, r.or_, r.of1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_class_convention() {
        let preds = vec![vec![1, 0], vec![1, 0]];
        let targets = vec![vec![1, 0], vec![1, 0]];
        let r = report(&confusion(&preds, &targets, 2).unwrap());
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.empty_classes, vec![1]);
    }

    #[test]
    fn two_class_hand_case() {
        // class A: tp=2, fp=1, fn=0; class B: tp=1, fp=0, fn=1
        let counts = ConfusionCounts {
            per_class: vec![
                ClassCounts { tp: 2, fp: 1, fn_: 0, tn: 0 },
                ClassCounts { tp: 1, fp: 0, fn_: 1, tn: 1 },
            ],
        };
        let r = report(&counts);
        assert!((r.per_class[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert_eq!(r.per_class[1].precision, 1.0);
        assert_eq!(r.per_class[1].recall, 0.5);
        assert!((r.cp - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.cr - 3.0 / 4.0).abs() < 1e-15);
        assert!((r.cf1 - 15.0 / 19.0).abs() < 1e-15);
        assert_eq!(r.op, 0.75);
        assert_eq!(r.or_, 0.75);
        assert_eq!(r.of1, 0.75);
    }

    #[test]
    fn micro_equalities_in_single_label_regime() {
        // one predicted and one true label per image -> OP = OR = OF1
        let preds = vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 1, 0]];
        let targets = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 0]];
        let r = report(&confusion(&preds, &targets, 3).unwrap());
        assert_eq!(r.op, r.or_);
        assert_eq!(r.of1, r.op);
    }

    #[test]
    fn f1_between_inputs() {
        let counts = ConfusionCounts {
            per_class: vec![
                ClassCounts { tp: 3, fp: 2, fn_: 1, tn: 4 },
                ClassCounts { tp: 1, fp: 3, fn_: 2, tn: 4 },
            ],
        };
        let r = report(&counts);
        assert!(r.cf1 >= r.cp.min(r.cr) && r.cf1 <= r.cp.max(r.cr));
        assert!(r.of1 >= r.op.min(r.or_) && r.of1 <= r.op.max(r.or_));
    }

    #[test]
    fn paper_literal_or_can_exceed_one() {
        // many true negatives count as agreements in the printed OR
        let preds = vec![vec![0, 0, 0, 1]];
        let targets = vec![vec![0, 0, 0, 1]];
        let r = paper_literal_report(&preds, &targets, 4).unwrap();
        assert!(r.or_ > 1.0);
        assert_eq!(r.op, 1.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let preds = vec![vec![1, 0]];
        let targets = vec![vec![1, 0], vec![0, 1]];
        assert!(confusion(&preds, &targets, 2).is_err());
    }
}
