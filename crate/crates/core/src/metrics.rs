//! Ranking metrics over scored binary labels.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("AUC needs at least one positive and one negative")]
    Degenerate,
    #[error("AP needs at least one positive")]
    NoPositives,
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

/// Scores with their binary labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedPredictions {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::Length {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite(s));
        }
        Ok(Self { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc(rp: &RankedPredictions) -> Result<f64, MetricError> {
    check(rp)?;
    let n = rp.len();
    let pos = rp.positives();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Degenerate);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rp.scores[a].total_cmp(&rp.scores[b]));
    // Sum of midranks (doubled, so every quantity stays integral).
    let mut rank2_sum: u128 = 0;
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && rp.scores[order[e + 1]] == rp.scores[order[k]] {
            e += 1;
        }
        let mid2 = (k + 1 + e + 1) as u128;
        let tied_pos = order[k..=e].iter().filter(|&&i| rp.labels[i]).count() as u128;
        rank2_sum += mid2 * tied_pos;
        k = e + 1;
    }
    let pos = pos as u128;
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg as u128) as f64)
}

/// Step-wise average precision: positives are visited in descending score
/// order, ties broken by input index.
pub fn ap(rp: &RankedPredictions) -> Result<f64, MetricError> {
    check(rp)?;
    let pos = rp.positives();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..rp.len()).collect();
    order.sort_by(|&a, &b| rp.scores[b].total_cmp(&rp.scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rp.labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / pos as f64)
}

fn check(rp: &RankedPredictions) -> Result<(), MetricError> {
    if rp.scores.len() != rp.labels.len() {
        return Err(MetricError::Length {
            scores: rp.scores.len(),
            labels: rp.labels.len(),
        });
    }
    if let Some(&s) = rp.scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(s));
    }
    Ok(())
}
