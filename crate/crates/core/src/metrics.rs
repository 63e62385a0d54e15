//! Performance-diagram scoring: probability of detection against success ratio
//! over a fixed threshold grid, and its base-rate-normalized area (NAUPDC).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCurve {
    /// Descending, from 1 to 0.
    pub thresholds: Vec<f64>,
    pub pod: Vec<f64>,
    pub sr: Vec<f64>,
    /// Whether any example was predicted positive at that threshold.
    pub any_predicted: Vec<bool>,
}

#[inline]
fn threshold(k: usize, m: usize) -> f64 {
    k as f64 / (m - 1) as f64
}

/// Index of the highest ascending threshold `t_k <= p`, or `None` when `p` is
/// below every threshold.
#[inline]
fn highest_threshold_below(p: f64, m: usize) -> Option<usize> {
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut k = ((p * (m - 1) as f64).floor() as usize).min(m - 1);
    while k + 1 < m && p >= threshold(k + 1, m) {
        k += 1;
    }
    loop {
        if p >= threshold(k, m) {
            return Some(k);
        }
        if k == 0 {
            return None;
        }
        k -= 1;
    }
}

/// Hits and false alarms at every threshold, predicting positive when
/// `prob >= threshold`. Runs in `O(n + m)`.
pub fn performance_curve(probs: &[f64], labels: &[u8], n_thresholds: usize) -> Result<PerformanceCurve> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidInput("need at least 2 thresholds".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::DegenerateTargets("no positive labels".into()));
    }
    let m = n_thresholds;
    // counts by the highest threshold each example clears
    let mut pos_at = vec![0usize; m];
    let mut neg_at = vec![0usize; m];
    for (&p, &l) in probs.iter().zip(labels) {
        if let Some(k) = highest_threshold_below(p, m) {
            if l == 1 {
                pos_at[k] += 1;
            } else {
                neg_at[k] += 1;
            }
        }
    }
    let mut thresholds = Vec::with_capacity(m);
    let mut pod = Vec::with_capacity(m);
    let mut sr = Vec::with_capacity(m);
    let mut any_predicted = Vec::with_capacity(m);
    let (mut hits, mut false_alarms) = (0usize, 0usize);
    for k in (0..m).rev() {
        hits += pos_at[k];
        false_alarms += neg_at[k];
        thresholds.push(threshold(k, m));
        pod.push(hits as f64 / positives as f64);
        let predicted = hits + false_alarms;
        any_predicted.push(predicted > 0);
        sr.push(if predicted == 0 {
            1.0
        } else {
            hits as f64 / predicted as f64
        });
    }
    Ok(PerformanceCurve {
        thresholds,
        pod,
        sr,
        any_predicted,
    })
}

impl PerformanceCurve {
    /// Trapezoidal area of success ratio over POD.
    ///
    /// Thresholds with no positive predictions carry no operating point and are
    /// skipped. Points sharing a POD keep their best success ratio, and the curve
    /// is held flat from its lowest realized POD down to 0.
    pub fn area(&self) -> f64 {
        let mut pts: Vec<(f64, f64)> = self
            .pod
            .iter()
            .zip(&self.sr)
            .zip(&self.any_predicted)
            .filter(|(_, &any)| any)
            .map(|((&p, &s), _)| (p, s))
            .collect();
        if pts.is_empty() {
            return 0.0;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        pts.dedup_by(|later, earlier| later.0 == earlier.0);
        let mut area = pts[0].0 * pts[0].1;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1);
        }
        area
    }
}

/// Area under the performance diagram curve.
pub fn aupdc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(performance_curve(probs, labels, DEFAULT_THRESHOLDS)?.area())
}

/// `(AUPDC - b) / (1 - b)` with `b` the base rate: 0 for no skill, 1 for a perfect
/// classifier, negative for anti-skill.
pub fn naupdc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    naupdc_with(probs, labels, DEFAULT_THRESHOLDS)
}

pub fn naupdc_with(probs: &[f64], labels: &[u8], n_thresholds: usize) -> Result<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if !labels.is_empty() && positives == labels.len() {
        return Err(Error::NormalizationUndefined);
    }
    let curve = performance_curve(probs, labels, n_thresholds)?;
    let b = positives as f64 / labels.len() as f64;
    Ok((curve.area() - b) / (1.0 - b))
}

/// Anything that turns a probability vector and labels into a skill score where
/// larger is better.
pub trait Scorer: Sync {
    fn score(&self, probs: &[f64], labels: &[u8]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Naupdc;

impl Scorer for Naupdc {
    fn score(&self, probs: &[f64], labels: &[u8]) -> Result<f64> {
        naupdc(probs, labels)
    }
}
