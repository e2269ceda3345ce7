//! Ternary classification metrics, Female-vs-Rest ROC analysis and
//! stratified reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const FEMALE: usize = 1;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise argmax of `[B, K]` logits.
pub fn classify(logits: &DenseTensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(k).map(argmax).collect()
}

/// Softmax probability of the Female class for each row of `[B, 3]` logits.
pub fn p_female(logits: &DenseTensor) -> Vec<f64> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|r| softmax_row(r)[FEMALE])
        .collect()
}

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

/// Confusion matrix over Male, Female, Unknown.
pub type ConfusionMatrix3 = ConfusionMatrix;

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Evaluation(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::Evaluation(format!(
                    "class index out of range: {l}/{p}"
                )));
            }
            counts[l][p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> usize {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoreMetrics {
    pub accuracy: f64,
    /// Mean recall over classes present in the labels.
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub weighted_recall: f64,
    pub confusion: ConfusionMatrix,
}

/// Metrics over `classes` labels. Macro averages run over the classes that
/// occur in either the labels or the predictions; a class never predicted
/// has precision 0.
pub fn core_metrics_k(preds: &[usize], labels: &[usize], classes: usize) -> Result<CoreMetrics> {
    if labels.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let cm = ConfusionMatrix::new(preds, labels, classes)?;
    let n = cm.total() as f64;
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    let mut precisions = Vec::new();
    let mut weighted_recall = 0.0;
    for c in 0..classes {
        let (support, predicted, tp) = (cm.support(c), cm.predicted(c), cm.counts[c][c]);
        if support == 0 && predicted == 0 {
            continue;
        }
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (support + predicted) as f64
        };
        if support > 0 {
            recalls.push(recall);
            weighted_recall += recall * support as f64 / n;
        }
        f1s.push(f1);
        precisions.push(precision);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CoreMetrics {
        accuracy: cm.trace() as f64 / n,
        balanced_accuracy: mean(&recalls),
        macro_f1: mean(&f1s),
        macro_precision: mean(&precisions),
        weighted_recall,
        confusion: cm,
    })
}

/// Metrics over the three gender classes.
pub fn core_metrics(preds: &[usize], labels: &[usize]) -> Result<CoreMetrics> {
    core_metrics_k(preds, labels, 3)
}

fn split_scores(scores: &[f64], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::Evaluation(
            "scores and labels differ in length".into(),
        ));
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::Evaluation(
            "both positive and negative samples are required".into(),
        ));
    }
    Ok((np, nn))
}

/// Area under the ROC curve by the midrank rank-sum statistic.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (np, nn) = split_scores(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Female-vs-Rest AUC from `p_female` scores and ternary labels.
pub fn auc_female_vs_rest(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let pos: Vec<bool> = labels.iter().map(|&l| l == FEMALE).collect();
    auc(scores, &pos)
}

/// `(TPR, TNR)` with positives predicted when `score > tau`.
pub fn operating_point(scores: &[f64], positive: &[bool], tau: f64) -> Result<(f64, f64)> {
    let (np, nn) = split_scores(scores, positive)?;
    let tp = scores
        .iter()
        .zip(positive)
        .filter(|(&s, &p)| p && s > tau)
        .count();
    let tn = scores
        .iter()
        .zip(positive)
        .filter(|(&s, &p)| !p && s <= tau)
        .count();
    Ok((tp as f64 / np as f64, tn as f64 / nn as f64))
}

/// ROC points `(FPR, TPR)` from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (np, nn) = split_scores(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn as f64, tp as f64 / np as f64));
    }
    Ok(points)
}

/// Evaluation bucket: view-angle group and distance or height range.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey {
    pub group: String,
    pub range: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratumReport {
    pub key: StratumKey,
    pub mu_female: Option<f64>,
    pub mu_male: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
}

/// One report per key in `strata`, in that order. Samples whose key is not
/// listed are ignored; metrics that are undefined for a stratum are `None`.
pub fn stratified_report(
    scores: &[f64],
    labels: &[usize],
    keys: &[StratumKey],
    strata: &[StratumKey],
    tau: f64,
) -> Vec<StratumReport> {
    strata
        .iter()
        .map(|key| {
            let idx: Vec<usize> = (0..keys.len()).filter(|&i| &keys[i] == key).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let pos: Vec<bool> = l.iter().map(|&x| x == FEMALE).collect();
            let mean_of = |class: usize| {
                let v: Vec<f64> = s
                    .iter()
                    .zip(&l)
                    .filter(|(_, &y)| y == class)
                    .map(|(x, _)| *x)
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let np = pos.iter().filter(|&&p| p).count();
            let nn = pos.len() - np;
            let tpr = (np > 0).then(|| {
                s.iter().zip(&pos).filter(|(&x, &p)| p && x > tau).count() as f64 / np as f64
            });
            let tnr = (nn > 0).then(|| {
                s.iter().zip(&pos).filter(|(&x, &p)| !p && x <= tau).count() as f64 / nn as f64
            });
            StratumReport {
                key: key.clone(),
                mu_female: mean_of(FEMALE),
                mu_male: mean_of(0),
                tpr,
                tnr,
                auc: auc(&s, &pos).ok(),
                n: idx.len(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// Stratum rows as CSV with header `group,range,mu_F,mu_M,TPR,TNR,AUC,n`.
pub fn strata_csv(reports: &[StratumReport]) -> String {
    let mut s = String::from("group,range,mu_F,mu_M,TPR,TNR,AUC,n\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.key.group,
            r.key.range,
            opt(r.mu_female),
            opt(r.mu_male),
            opt(r.tpr),
            opt(r.tnr),
            opt(r.auc),
            r.n
        );
    }
    s
}

/// ROC points as CSV with header `FPR,TPR`.
pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("FPR,TPR\n");
    for (f, t) in points {
        let _ = writeln!(s, "{f:.6},{t:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
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

    #[test]
    fn p_female_examples() {
        let t = DenseTensor::new([2, 3], vec![0.0, 0.0, 0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        let p = p_female(&t);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn core_metrics_hand_example() {
        let m = core_metrics(&[0, 1, 1, 2], &[0, 0, 1, 2]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.balanced_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.macro_f1 - 7.0 / 9.0).abs() < 1e-15);
        let perfect = core_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        for v in [
            perfect.accuracy,
            perfect.balanced_accuracy,
            perfect.macro_f1,
            perfect.macro_precision,
            perfect.weighted_recall,
        ] {
            assert_eq!(v, 1.0);
        }
        assert!(core_metrics(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        let l = [1, 1, 0, 2];
        assert_eq!(auc_female_vs_rest(&[0.9, 0.8, 0.1, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auc_female_vs_rest(&[0.8, 0.3, 0.6, 0.1], &l).unwrap(), 0.75);
        assert_eq!(auc_female_vs_rest(&[0.4; 4], &l).unwrap(), 0.5);
        assert!(auc_female_vs_rest(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn operating_point_examples() {
        let (tpr, tnr) = operating_point(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((tpr, tnr), (1.0, 1.0));
        let (tpr, _) = operating_point(&[0.6, 0.4, 0.2], &[true, true, false], 0.5).unwrap();
        assert_eq!(tpr, 0.5);
        assert!(operating_point(&[0.6], &[true], 0.5).is_err());
    }

    #[test]
    fn roc_runs_from_origin_to_corner() {
        let pts = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(pts[1], (0.0, 0.5));
    }

    #[test]
    fn strata_cover_every_listed_key() {
        let k = |g: &str, r: &str| StratumKey {
            group: g.into(),
            range: r.into(),
        };
        let keys = vec![k("30°", "D≤20"), k("30°", "D≤20"), k("90°", "H>80")];
        let strata = vec![k("30°", "D≤20"), k("30°", "D>80"), k("90°", "H>80")];
        let r = stratified_report(&[0.9, 0.2, 0.7], &[1, 0, 1], &keys, &strata, 0.5);
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].auc, Some(1.0));
        assert_eq!(r[1].n, 0);
        assert_eq!(r[2].tnr, None);
        assert_eq!(r.iter().map(|x| x.n).sum::<usize>(), 3);
        assert!(strata_csv(&r).starts_with("group,range,mu_F,mu_M,TPR,TNR,AUC,n\n"));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            raw in prop::collection::vec((0u8..8, any::<bool>()), 2..64)
        ) {
            let mut v = raw;
            v[0].1 = true;
            v[1].1 = false;
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let pos: Vec<bool> = v.iter().map(|(_, p)| *p).collect();
            prop_assert!((auc(&scores, &pos).unwrap() - brute_auc(&scores, &pos)).abs() <= 1e-12);
            let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
            prop_assert!((auc(&cubed, &pos).unwrap() - auc(&scores, &pos).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn accuracy_is_trace_over_total(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..80)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = core_metrics(&preds, &labels).unwrap();
            prop_assert_eq!(m.accuracy, m.confusion.trace() as f64 / m.confusion.total() as f64);
        }

        #[test]
        fn balanced_accuracy_ignores_class_duplication(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60),
            class in 0usize..3,
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = core_metrics(&preds, &labels).unwrap().balanced_accuracy;
            let (mut p2, mut l2) = (preds.clone(), labels.clone());
            for (p, l) in preds.iter().zip(&labels) {
                if *l == class {
                    p2.push(*p);
                    l2.push(*l);
                }
            }
            let dup = core_metrics(&p2, &l2).unwrap().balanced_accuracy;
            prop_assert!((base - dup).abs() < 1e-12);
        }

        #[test]
        fn tnr_non_decreasing_in_threshold(
            scores in prop::collection::vec(0.0f64..1.0, 4..40),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..0.5,
        ) {
            let pos: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
            let (_, a) = operating_point(&scores, &pos, t1).unwrap();
            let (_, b) = operating_point(&scores, &pos, t1 + dt).unwrap();
            prop_assert!(b >= a);
        }
    }
}
