//! Threshold-free evaluation of capability scores: ROC-AUC, average
//! precision for the negative class, and the curves behind them.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Parallel scores and binary labels (1 = the model succeeds).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::LengthMismatch { left: scores.len(), right: labels.len() });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel(l));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score"));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.len() - pos)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = self.class_counts();
        if p == 0 || n == 0 {
            return Err(Error::DegenerateLabels);
        }
        Ok((p, n))
    }

    /// Indices sorted by ascending score, grouped into runs of equal score.
    fn tie_groups(&self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in idx {
            match groups.last_mut() {
                Some(g) if self.scores[g[0]] == self.scores[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        groups
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (midrank statistic).
pub fn roc_auc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.require_both()?;
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for g in s.tie_groups() {
        let mid = next_rank + (g.len() as f64 - 1.0) / 2.0;
        let pos = g.iter().filter(|&&i| s.labels[i] == 1).count();
        rank_sum += mid * pos as f64;
        next_rank += g.len() as f64;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision with negatives as the detection target: items are
/// flagged in order of increasing capability score and precision is held
/// constant between recall steps.
pub fn pr_auc_negative(s: &ScoredSet) -> Result<f64> {
    let pts = pr_points_negative(s)?;
    Ok(pts.iter().map(|pt| (pt.recall - pt.prev_recall) * pt.precision).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Items with `score >= threshold` are predicted positive.
    pub threshold: f64,
}

/// ROC curve from `(0, 0)` (threshold `+inf`) to `(1, 1)`, one point per
/// distinct score. If a class is missing its rate stays at 0.
pub fn roc_points(s: &ScoredSet) -> Vec<RocPoint> {
    let (p, n) = s.class_counts();
    let (pf, nf) = (p.max(1) as f64, n.max(1) as f64);
    let mut out = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in s.tie_groups().iter().rev() {
        for &i in g {
            if s.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        out.push(RocPoint { fpr: fp as f64 / nf, tpr: tp as f64 / pf, threshold: s.scores[g[0]] });
    }
    out
}

/// Trapezoidal area under a list of ROC points.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    /// Items with `score <= threshold` are flagged as negatives.
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub prev_recall: f64,
}

/// Precision/recall of the negative class at every distinct score.
pub fn pr_points_negative(s: &ScoredSet) -> Result<Vec<PrPoint>> {
    let (_, n) = s.require_both()?;
    let mut out = Vec::new();
    let (mut flagged, mut hits) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    for g in s.tie_groups() {
        flagged += g.len();
        hits += g.iter().filter(|&&i| s.labels[i] == 0).count();
        let recall = hits as f64 / n as f64;
        out.push(PrPoint {
            threshold: s.scores[g[0]],
            recall,
            precision: hits as f64 / flagged as f64,
            prev_recall,
        });
        prev_recall = recall;
    }
    Ok(out)
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t}")
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", fmt_threshold(p.threshold), p.fpr, p.tpr);
    }
    out
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", fmt_threshold(p.threshold), p.recall, p.precision);
    }
    out
}
