use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::features::FeatureMatrix;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        if values.is_empty() {
            return MeanSd { mean: 0.0, sd: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanSd { mean, sd: var.sqrt() }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6} ± {:.6}", self.mean, self.sd)
    }
}

pub const CLUSTER_DEFINITION: &str = "intra = per-class mean Euclidean distance of samples to their class centroid, \
aggregated as mean ± population sd over classes; inter = mean ± population sd of Euclidean distances over all \
pairs of class centroids; computed in raw feature space";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub definition: String,
    pub intra: MeanSd,
    pub inter: MeanSd,
    /// Class ids with at least one sample, ascending.
    pub classes: Vec<u32>,
    pub counts: Vec<usize>,
    pub per_class_intra: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterReport {
    /// Separation ratio used to compare encoders.
    pub fn inter_intra_ratio(&self) -> f64 {
        self.inter.mean / self.intra.mean.max(f64::MIN_POSITIVE)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn cluster_metrics(fm: &FeatureMatrix) -> Result<ClusterReport> {
    fm.validate()?;
    let mut classes: Vec<u32> = fm.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(invalid(format!(
            "inter-cluster distance needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let d = fm.dim;
    let mut centroids = vec![vec![0.0; d]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let slot = |l: u32| classes.binary_search(&l).expect("label present");
    for (row, &l) in fm.rows.iter().zip(&fm.labels) {
        let c = slot(l);
        counts[c] += 1;
        centroids[c].iter_mut().zip(row).for_each(|(a, x)| *a += x);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|a| *a /= *n as f64);
    }
    let mut sums = vec![0.0; classes.len()];
    for (row, &l) in fm.rows.iter().zip(&fm.labels) {
        let c = slot(l);
        sums[c] += euclidean(row, &centroids[c]);
    }
    let per_class_intra: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let mut pair = Vec::new();
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            pair.push(euclidean(&centroids[i], &centroids[j]));
        }
    }
    Ok(ClusterReport {
        definition: CLUSTER_DEFINITION.into(),
        intra: MeanSd::of(&per_class_intra),
        inter: MeanSd::of(&pair),
        classes,
        counts,
        per_class_intra,
        centroids,
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic; ties count 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("auc: scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("auc: non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// How the AP50/AR50 columns are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Precision and recall of the positive class at decision threshold 0.5.
    #[default]
    Threshold,
    /// Average precision over the score ranking, and recall averaged over
    /// thresholds 0.50, 0.55, …, 0.95.
    Average,
}

impl MetricMode {
    pub fn definition(self) -> &'static str {
        match self {
            MetricMode::Threshold => "ap50/ar50 = positive-class precision/recall at score threshold 0.5, x100",
            MetricMode::Average => {
                "ap50 = average precision over the score ranking x100; ar50 = recall averaged over thresholds 0.50:0.05:0.95, x100"
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub ap50: f64,
    pub ar50: f64,
    /// Nothing scored positive, so precision was reported as 0.
    pub no_positive_predictions: bool,
}

fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    (tp, fp, fneg)
}

fn recall(tp: usize, fneg: usize) -> f64 {
    if tp + fneg == 0 {
        0.0
    } else {
        tp as f64 / (tp + fneg) as f64
    }
}

pub fn precision_recall_at_half(scores: &[f64], labels: &[bool]) -> Result<PrecisionRecall> {
    precision_recall(scores, labels, MetricMode::Threshold)
}

pub fn precision_recall(scores: &[f64], labels: &[bool], mode: MetricMode) -> Result<PrecisionRecall> {
    if scores.len() != labels.len() {
        return Err(invalid("precision/recall: scores and labels differ in length"));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(invalid("precision/recall: scores must lie in [0, 1]"));
    }
    let (tp, fp, fneg) = confusion(scores, labels, 0.5);
    let none = tp + fp == 0;
    match mode {
        MetricMode::Threshold => Ok(PrecisionRecall {
            ap50: if none { 0.0 } else { 100.0 * tp as f64 / (tp + fp) as f64 },
            ar50: 100.0 * recall(tp, fneg),
            no_positive_predictions: none,
        }),
        MetricMode::Average => {
            let n_pos = labels.iter().filter(|&&l| l).count();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                if labels[i] {
                    hits += 1;
                    ap += hits as f64 / (rank + 1) as f64;
                }
            }
            let ap = if n_pos == 0 { 0.0 } else { ap / n_pos as f64 };
            let ar = (0..10)
                .map(|k| {
                    let (tp, _, fneg) = confusion(scores, labels, (50 + 5 * k) as f64 / 100.0);
                    recall(tp, fneg)
                })
                .sum::<f64>()
                / 10.0;
            Ok(PrecisionRecall {
                ap50: 100.0 * ap,
                ar50: 100.0 * ar,
                no_positive_predictions: none,
            })
        }
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks are identical and score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("dice: masks differ in size"));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
