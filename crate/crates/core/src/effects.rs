//! Global feature effects: partial dependence, first-order ALE and its variance
//! ranking, the Bayesian event-rate histogram, and the method-average curve.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data::{quantile_bins, BinGrid, Dataset};
use crate::importance::{ImportanceResult, Mode};
use crate::models::{check_width, predict_par, ProbabilisticClassifier};
use crate::{Error, Result};

/// How a curve was shifted to mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    Unweighted,
    CountWeighted,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub feature_index: usize,
    pub method_id: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bin_counts: Vec<usize>,
    pub centering: Centering,
}

impl EffectCurve {
    /// Mean of `values` under the curve's centering rule; 0 for a centred curve.
    pub fn centered_mean(&self) -> f64 {
        match self.centering {
            Centering::CountWeighted => weighted_mean(&self.values, &self.bin_counts),
            Centering::Unweighted | Centering::None => mean(&self.values),
        }
    }

    /// Linear interpolation at `xs`, held flat beyond the grid ends.
    pub fn interpolate(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| interpolate_at(&self.grid, &self.values, x))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn weighted_mean(v: &[f64], w: &[usize]) -> f64 {
    let total: usize = w.iter().sum();
    if total == 0 {
        return mean(v);
    }
    v.iter().zip(w).map(|(x, &c)| x * c as f64).sum::<f64>() / total as f64
}

pub(crate) fn interpolate_at(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let hi = grid.partition_point(|&g| g <= x);
    let lo = hi - 1;
    let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

/// Copy of the feature matrix with column `j` set to `v` everywhere.
fn clamped(data: &Dataset, j: usize, v: f64) -> Array2<f64> {
    let mut x = data.features().to_owned();
    x.column_mut(j).fill(v);
    x
}

fn check_feature<M: ProbabilisticClassifier + ?Sized>(model: &M, data: &Dataset, j: usize) -> Result<()> {
    check_width(model.n_features(), data.n_features())?;
    if j >= data.n_features() {
        return Err(Error::InvalidInput(format!("feature index {j} out of range")));
    }
    Ok(())
}

/// Mean prediction with feature `j` clamped to each bin centre, minus the
/// unweighted mean over centres.
pub fn partial_dependence<M>(model: &M, data: &Dataset, j: usize, grid: &BinGrid) -> Result<EffectCurve>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_feature(model, data, j)?;
    if grid.n_bins() < 1 {
        return Err(Error::InvalidInput("degenerate grid".into()));
    }
    let n = data.n_examples() as f64;
    let raw: Vec<f64> = grid
        .centers
        .par_iter()
        .map(|&v| model.predict_rows(clamped(data, j, v).view()).iter().sum::<f64>() / n)
        .collect();
    let c = mean(&raw);
    Ok(EffectCurve {
        feature_index: j,
        method_id: "pd".into(),
        grid: grid.centers.clone(),
        values: raw.iter().map(|v| v - c).collect(),
        bin_counts: grid.counts.clone(),
        centering: Centering::Unweighted,
    })
}

/// Uncentred first-order ALE accumulated at each bin edge, after empty bins are
/// merged: returns `(edges, values)` with `values[0] = 0`.
pub fn ale_accumulated<M>(model: &M, data: &Dataset, j: usize, grid: &BinGrid) -> Result<(Vec<f64>, Vec<f64>)>
where
    M: ProbabilisticClassifier + ?Sized,
{
    let (grid, acc) = accumulate(model, data, j, grid)?;
    Ok((grid.edges, acc))
}

fn accumulate<M>(model: &M, data: &Dataset, j: usize, grid: &BinGrid) -> Result<(BinGrid, Vec<f64>)>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_feature(model, data, j)?;
    let column = data.column(j).to_vec();
    let grid = grid.merge_empty(&column)?;
    let k = grid.n_bins();
    if k < 2 || grid.counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidInput("ALE needs at least 2 usable bins".into()));
    }
    let bins: Vec<usize> = column.iter().map(|&v| grid.bin_of(v)).collect();
    let mut lower = data.features().to_owned();
    let mut upper = lower.clone();
    for (i, &b) in bins.iter().enumerate() {
        lower[[i, j]] = grid.edges[b];
        upper[[i, j]] = grid.edges[b + 1];
    }
    let f_lo = predict_par(model, lower.view());
    let f_hi = predict_par(model, upper.view());
    let mut local = vec![0.0; k];
    for (i, &b) in bins.iter().enumerate() {
        local[b] += f_hi[i] - f_lo[i];
    }
    let mut acc = Vec::with_capacity(k + 1);
    acc.push(0.0);
    for (l, &c) in local.iter().zip(&grid.counts) {
        acc.push(acc.last().unwrap() + l / c as f64);
    }
    Ok((grid, acc))
}

/// First-order ALE at bin centres. Empty bins are folded into their left
/// neighbour first; each bin takes the mean of its two edge accumulations and
/// the curve is centred by its count-weighted mean.
pub fn ale_first_order<M>(model: &M, data: &Dataset, j: usize, grid: &BinGrid) -> Result<EffectCurve>
where
    M: ProbabilisticClassifier + ?Sized,
{
    let (grid, acc) = accumulate(model, data, j, grid)?;
    let raw: Vec<f64> = acc.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let c = weighted_mean(&raw, &grid.counts);
    Ok(EffectCurve {
        feature_index: j,
        method_id: "ale".into(),
        grid: grid.centers.clone(),
        values: raw.iter().map(|v| v - c).collect(),
        bin_counts: grid.counts.clone(),
        centering: Centering::CountWeighted,
    })
}

/// Count-weighted standard deviation of a curve's values.
pub fn curve_spread(curve: &EffectCurve) -> f64 {
    let m = weighted_mean(&curve.values, &curve.bin_counts);
    let sq: Vec<f64> = curve.values.iter().map(|v| (v - m).powi(2)).collect();
    weighted_mean(&sq, &curve.bin_counts).sqrt()
}

/// Ranks features by the spread of their ALE curves. `feature_names` covers the
/// whole dataset; units are the curves' features in the given order.
pub fn ale_variance_ranking(curves: &[EffectCurve], feature_names: &[String]) -> Result<ImportanceResult> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no ALE curves".into()));
    }
    let names = curves
        .iter()
        .map(|c| {
            feature_names
                .get(c.feature_index)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("feature index {} out of range", c.feature_index)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = curves.iter().map(curve_spread).collect();
    Ok(ImportanceResult::from_rounds(
        "ale_var",
        names,
        vec![scores],
        Mode::Relevance,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRateConfig {
    pub initial_bins: usize,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub merge_confidence: f64,
}

impl Default for EventRateConfig {
    fn default() -> Self {
        Self {
            initial_bins: 30,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            merge_confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRateCurve {
    pub feature_index: usize,
    pub bin_edges: Vec<f64>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub posterior_mean: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub prior_alpha: f64,
    pub prior_beta: f64,
}

fn credible_interval(a: f64, b: f64, confidence: f64) -> Result<(f64, f64)> {
    let dist = Beta::new(a, b).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let tail = 0.5 * (1.0 - confidence);
    Ok((dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail)))
}

/// Beta-posterior event rate per quantile bin. While any adjacent pair has
/// overlapping credible intervals, the pair with the widest overlap (leftmost on
/// ties) is merged.
pub fn event_rate_histogram(data: &Dataset, j: usize, cfg: &EventRateConfig) -> Result<EventRateCurve> {
    if j >= data.n_features() {
        return Err(Error::InvalidInput(format!("feature index {j} out of range")));
    }
    if !(cfg.prior_alpha > 0.0 && cfg.prior_beta > 0.0) || !(0.0..1.0).contains(&cfg.merge_confidence) {
        return Err(Error::InvalidInput("invalid prior or merge confidence".into()));
    }
    if !data.targets().contains(&1) {
        return Err(Error::DegenerateTargets("no positive labels".into()));
    }
    let column = data.column(j).to_vec();
    let grid = quantile_bins(&column, cfg.initial_bins)?.merge_empty(&column)?;
    let mut edges = grid.edges.clone();
    let mut pos = vec![0usize; grid.n_bins()];
    let mut neg = vec![0usize; grid.n_bins()];
    for (&v, &t) in column.iter().zip(data.targets()) {
        let b = grid.bin_of(v);
        if t == 1 {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let (a0, b0) = (cfg.prior_alpha, cfg.prior_beta);
    let interval = |p: usize, q: usize| credible_interval(a0 + p as f64, b0 + q as f64, cfg.merge_confidence);
    let mut cis = pos
        .iter()
        .zip(&neg)
        .map(|(&p, &q)| interval(p, q))
        .collect::<Result<Vec<_>>>()?;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..cis.len().saturating_sub(1) {
            let overlap = cis[k].1.min(cis[k + 1].1) - cis[k].0.max(cis[k + 1].0);
            if overlap >= 0.0 && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((k, overlap));
            }
        }
        let Some((k, _)) = best else { break };
        pos[k] += pos.remove(k + 1);
        neg[k] += neg.remove(k + 1);
        edges.remove(k + 1);
        cis.remove(k + 1);
        cis[k] = interval(pos[k], neg[k])?;
    }
    let posterior_mean = pos
        .iter()
        .zip(&neg)
        .map(|(&p, &q)| (a0 + p as f64) / (a0 + b0 + (p + q) as f64))
        .collect();
    Ok(EventRateCurve {
        feature_index: j,
        bin_edges: edges,
        positives: pos,
        negatives: neg,
        posterior_mean,
        ci_low: cis.iter().map(|c| c.0).collect(),
        ci_high: cis.iter().map(|c| c.1).collect(),
        prior_alpha: a0,
        prior_beta: b0,
    })
}

/// Mean of several curves for one feature on `common_grid` centres, with the
/// per-point population standard deviation across curves.
pub fn method_average_effect(
    curves: &[EffectCurve],
    common_grid: &BinGrid,
) -> Result<(EffectCurve, Vec<f64>)> {
    if curves.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 curves".into()));
    }
    let j = curves[0].feature_index;
    if curves.iter().any(|c| c.feature_index != j) {
        return Err(Error::InvalidInput("curves describe different features".into()));
    }
    let xs = &common_grid.centers;
    let resampled: Vec<Vec<f64>> = curves.iter().map(|c| c.interpolate(xs)).collect();
    let m = curves.len() as f64;
    let means: Vec<f64> = (0..xs.len())
        .map(|p| resampled.iter().map(|r| r[p]).sum::<f64>() / m)
        .collect();
    let spread = (0..xs.len())
        .map(|p| (resampled.iter().map(|r| (r[p] - means[p]).powi(2)).sum::<f64>() / m).sqrt())
        .collect();
    let avg = EffectCurve {
        feature_index: j,
        method_id: "average".into(),
        grid: xs.clone(),
        values: means,
        bin_counts: common_grid.counts.clone(),
        centering: Centering::None,
    };
    Ok((avg, spread))
}
