//! Evaluation metrics: AUROC and ROC curves, F1 with confusion matrices,
//! regression errors, and demographic stratification.

mod report;
mod stratify;

pub use report::{EvalReport, ReportRow};
pub use stratify::{
    stratified_eval, Stratum, StratumKey, StratumResult, StratumValue, MIN_STRATUM_SIZE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::LOS_CLIP_DAYS;

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::validation("binary labels must be 0 or 1"));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("scores contain NaN"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve, with tied scores contributing half credit.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let curve = roc_curve(scores, labels)?;
    Ok(trapezoid_area(&curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are predicted positive. The first point uses `+∞`.
    pub threshold: f64,
}

/// ROC points at every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    check_scores(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let order = descending(scores);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Macro-averaged one-vs-rest AUROC over the columns of `probs`.
pub fn macro_auroc_ovr(probs: &[Vec<f64>], labels: &[u8], n_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::validation(
            "probability rows and labels differ in length",
        ));
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let bin: Vec<u8> = labels
            .iter()
            .map(|&l| u8::from(usize::from(l) == c))
            .collect();
        total += auroc(&scores, &bin)?;
    }
    Ok(total / n_classes as f64)
}

/// Square confusion matrix; `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[u8], labels: &[u8], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::validation("predictions and labels differ in length"));
        }
        let mut counts = vec![vec![0; n_classes]; n_classes];
        for (&p, &t) in preds.iter().zip(labels) {
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= n_classes || t >= n_classes {
                return Err(Error::validation(format!(
                    "class index out of range for {n_classes} classes"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn true_positives(&self, c: usize) -> usize {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> usize {
        (0..self.n_classes())
            .filter(|&t| t != c)
            .map(|t| self.counts[t][c])
            .sum()
    }

    pub fn false_negatives(&self, c: usize) -> usize {
        (0..self.n_classes())
            .filter(|&p| p != c)
            .map(|p| self.counts[c][p])
            .sum()
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(
            self.true_positives(c),
            self.true_positives(c) + self.false_positives(c),
        )
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(
            self.true_positives(c),
            self.true_positives(c) + self.false_negatives(c),
        )
    }

    /// F1 for one class; 0 when precision and recall are both 0.
    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.n_classes()).map(|c| self.f1(c)).sum::<f64>() / self.n_classes() as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Averaging {
    /// F1 of the positive class.
    Binary,
    /// Unweighted mean of per-class F1 over this many classes.
    Macro(usize),
}

/// F1 of hard class predictions.
pub fn f1(preds: &[u8], labels: &[u8], averaging: F1Averaging) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("F1 of an empty set"));
    }
    match averaging {
        F1Averaging::Binary => Ok(ConfusionMatrix::new(preds, labels, 2)?.f1(1)),
        F1Averaging::Macro(n) => Ok(ConfusionMatrix::new(preds, labels, n)?.macro_f1()),
    }
}

/// Probabilities thresholded at 0.5.
pub fn binary_predictions(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// Argmax per row; lowest index wins ties.
pub fn argmax_predictions(probs: &[Vec<f64>]) -> Vec<u8> {
    probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

fn clamped(preds: &[f64]) -> impl Iterator<Item = f64> + '_ {
    preds.iter().map(|p| p.clamp(0.0, LOS_CLIP_DAYS))
}

fn check_regression(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::validation(format!(
            "regression metric needs equal non-empty inputs ({} vs {})",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean absolute error, predictions clamped to `[0, 30]` days.
pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_regression(preds, labels)?;
    Ok(clamped(preds)
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Mean squared error, predictions clamped to `[0, 30]` days.
pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_regression(preds, labels)?;
    Ok(clamped(preds)
        .zip(labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Writes `fpr,tpr,threshold` rows.
pub fn write_roc_csv<W: std::io::Write>(curve: &[RocPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fpr", "tpr", "threshold"])?;
    for p in curve {
        out.write_record([
            p.fpr.to_string(),
            p.tpr.to_string(),
            p.threshold.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<roc csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Probability a random positive outranks a random negative, ties ½.
    fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
        loop {
            // Coarse scores so ties occur often.
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.gen_range(0..8)) / 8.0)
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            if labels.contains(&0) && labels.contains(&1) {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auroc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn trapezoid_matches_concordance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.gen_range(2..=50);
            let (s, l) = random_instance(&mut rng, n);
            let a = auroc(&s, &l).unwrap();
            assert!((a - concordance(&s, &l)).abs() < 1e-9);
        }
    }

    #[test]
    fn curve_shape() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let perfect = roc_curve(&s, &[1, 1, 0, 0]).unwrap();
        assert!(perfect.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let reversed = roc_curve(&s, &[0, 0, 1, 1]).unwrap();
        assert!(reversed.iter().any(|p| p.fpr == 1.0 && p.tpr == 0.0));
        let first = perfect[0];
        let last = perfect[perfect.len() - 1];
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn curve_area_equals_auroc_on_random_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 3 == 0)).collect();
        let curve = roc_curve(&scores, &labels).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let a = auroc(&scores, &labels).unwrap();
        assert!((trapezoid_area(&curve) - a).abs() < 1e-12);
        assert!((a - concordance(&scores, &labels)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(
            raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..60),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auroc(&exp, &labels).unwrap() - a).abs() < 1e-12);
            prop_assert!((auroc(&aff, &labels).unwrap() - a).abs() < 1e-12);
            prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_from_counts() {
        // TP=3, FP=1, FN=2, TN=1
        let labels = [1, 1, 1, 1, 1, 0, 0];
        let preds = [1, 1, 1, 0, 0, 1, 0];
        let f = f1(&preds, &labels, F1Averaging::Binary).unwrap();
        let oracle = 2.0 * (0.75 * 0.6) / (0.75 + 0.6);
        assert!((f - oracle).abs() < 1e-12);
        assert!((f - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn f1_perfect_and_missing_class() {
        assert_eq!(
            f1(&[0, 1, 2], &[0, 1, 2], F1Averaging::Macro(3)).unwrap(),
            1.0
        );
        // class 2 never predicted: contributes 0
        let f = f1(&[0, 1, 1], &[0, 1, 2], F1Averaging::Macro(3)).unwrap();
        let cm = ConfusionMatrix::new(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.f1(2), 0.0);
        assert!((f - (1.0 + cm.f1(1)) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_consistent_with_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<u8> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let cm = ConfusionMatrix::new(&preds, &labels, 3).unwrap();
        let mut total = 0.0;
        for c in 0..3 {
            let tp = cm.counts[c][c] as f64;
            let col: usize = (0..3).map(|t| cm.counts[t][c]).sum();
            let row: usize = cm.counts[c].iter().sum();
            let p = tp / col as f64;
            let r = tp / row as f64;
            total += 2.0 * p * r / (p + r);
        }
        assert_eq!(
            f1(&preds, &labels, F1Averaging::Macro(3)).unwrap(),
            total / 3.0
        );
    }

    #[test]
    fn regression_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[5.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(mse(&[5.0], &[3.0]).unwrap(), 4.0);
        // clamped into [0, 30]
        assert_eq!(mae(&[-4.0, 45.0], &[1.0, 30.0]).unwrap(), 0.5);
    }

    #[test]
    fn label_mean_minimizes_constant_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let labels: Vec<f64> = (0..300).map(|_| rng.gen_range(1.0..30.0)).collect();
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let at_mean = mse(&vec![mean; labels.len()], &labels).unwrap();
        for k in 0..=300 {
            let c = f64::from(k) * 0.1;
            assert!(mse(&vec![c; labels.len()], &labels).unwrap() >= at_mean - 1e-12);
        }
    }

    #[test]
    fn macro_auroc_perfect() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.7, 0.2, 0.1],
        ];
        assert_eq!(macro_auroc_ovr(&probs, &[0, 1, 2, 0], 3).unwrap(), 1.0);
        assert_eq!(argmax_predictions(&probs), vec![0, 1, 2, 0]);
    }

    #[test]
    fn roc_csv_header() {
        let curve = roc_curve(&[0.2, 0.7], &[0, 1]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    }
}
