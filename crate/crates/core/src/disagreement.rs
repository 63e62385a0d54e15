//! Agreement statistics between explanation outputs.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinGrid;
use crate::effects::EffectCurve;
use crate::importance::ImportanceResult;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    TopK,
    Rank,
    Effect,
}

impl Statistic {
    pub fn id(self) -> &'static str {
        match self {
            Statistic::TopK => "top_k",
            Statistic::Rank => "rank",
            Statistic::Effect => "effect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Importance,
    Relevance,
}

fn same_universe(a: &ImportanceResult, b: &ImportanceResult) -> Result<()> {
    let mut x = a.unit_names.clone();
    let mut y = b.unit_names.clone();
    x.sort();
    y.sort();
    if x != y {
        return Err(Error::InvalidInput(format!(
            "{} and {} rank different units",
            a.method_id, b.method_id
        )));
    }
    Ok(())
}

/// Fraction of shared names among the two top-`k` lists.
pub fn top_k_feature_agreement(a: &ImportanceResult, b: &ImportanceResult, k: usize) -> Result<f64> {
    same_universe(a, b)?;
    let k = k.min(a.n_units());
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let ta = a.top_k_names(k);
    let tb = b.top_k_names(k);
    let shared = ta.iter().filter(|n| tb.contains(n)).count();
    Ok(shared as f64 / k as f64)
}

fn directed_rank_agreement(a: &ImportanceResult, b: &ImportanceResult, k: usize, tolerance: usize) -> f64 {
    let pos_b: HashMap<&str, usize> = b
        .top_k(k)
        .iter()
        .enumerate()
        .map(|(p, &u)| (b.unit_names[u].as_str(), p))
        .collect();
    let hits = a
        .top_k_names(k)
        .iter()
        .enumerate()
        .filter(|&(p, name)| pos_b.get(name).is_some_and(|&q| p.abs_diff(q) <= tolerance))
        .count();
    hits as f64 / k as f64
}

/// Fraction of top-`k` features whose position in the other top-`k` list is
/// within `tolerance`; a feature absent from the other list counts against.
/// Averaged over both directions.
pub fn rank_agreement(a: &ImportanceResult, b: &ImportanceResult, k: usize, tolerance: usize) -> Result<f64> {
    same_universe(a, b)?;
    let k = k.min(a.n_units());
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    Ok(0.5 * (directed_rank_agreement(a, b, k, tolerance) + directed_rank_agreement(b, a, k, tolerance)))
}

/// Curves of one method keyed by feature index.
pub type CurveSet = BTreeMap<usize, EffectCurve>;

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// `1 - sum(w * rmsd) / sum(w)`; plain mean when every weight is 0.
pub fn weighted_agreement(weights: &[f64], rmsds: &[f64]) -> Result<f64> {
    if weights.len() != rmsds.len() || weights.is_empty() {
        return Err(Error::InvalidInput(
            "weights and rmsds must be non-empty and aligned".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    let err = if total > 0.0 {
        weights.iter().zip(rmsds).map(|(w, r)| w * r).sum::<f64>() / total
    } else {
        rmsds.iter().sum::<f64>() / rmsds.len() as f64
    };
    Ok(1.0 - err)
}

/// Per-feature RMSD between the two methods on shared grid centres, weighted
/// by the mean of the two curves' variances on that grid.
pub fn effect_agreement(a: &CurveSet, b: &CurveSet, grids: &BTreeMap<usize, BinGrid>) -> Result<f64> {
    let mut weights = Vec::new();
    let mut rmsds = Vec::new();
    for (j, ca) in a {
        let (Some(cb), Some(grid)) = (b.get(j), grids.get(j)) else {
            continue;
        };
        let va = ca.interpolate(&grid.centers);
        let vb = cb.interpolate(&grid.centers);
        let msd = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
        rmsds.push(msd.sqrt());
        weights.push(0.5 * (variance(&va) + variance(&vb)));
    }
    if rmsds.is_empty() {
        return Err(Error::InvalidInput(
            "no features shared by both curve sets".into(),
        ));
    }
    weighted_agreement(&weights, &rmsds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    /// Mean of all off-diagonal cells.
    pub overall_mean: f64,
    /// Mean over importance-vs-relevance pairs, when both categories occur.
    pub importance_vs_relevance_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub statistic_id: Statistic,
    pub method_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// True when some effect agreement is below 0 and plots should clamp it.
    pub clamped: bool,
    pub summary: AgreementSummary,
}

fn build_matrix<F>(
    statistic: Statistic,
    method_ids: Vec<String>,
    categories: &HashMap<String, Category>,
    diagonal: Option<f64>,
    cell: F,
) -> Result<AgreementMatrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let m = method_ids.len();
    if m < 2 {
        return Err(Error::InvalidInput("agreement needs at least 2 methods".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |b| (a, b))).collect();
    let cells: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| match (a == b, diagonal) {
            (true, Some(v)) => Ok(v),
            _ => cell(a, b),
        })
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; m]; m];
    for (&(a, b), &v) in pairs.iter().zip(&cells) {
        values[a][b] = v;
        values[b][a] = v;
    }
    let mut off = Vec::new();
    let mut cross = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            off.push(values[a][b]);
            let (ca, cb) = (categories.get(&method_ids[a]), categories.get(&method_ids[b]));
            if matches!(
                (ca, cb),
                (Some(Category::Importance), Some(Category::Relevance))
                    | (Some(Category::Relevance), Some(Category::Importance))
            ) {
                cross.push(values[a][b]);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AgreementMatrix {
        statistic_id: statistic,
        clamped: values.iter().flatten().any(|&v| v < 0.0),
        method_ids,
        summary: AgreementSummary {
            overall_mean: mean(&off),
            importance_vs_relevance_mean: (!cross.is_empty()).then(|| mean(&cross)),
        },
        values,
    })
}

/// Pairwise top-k or rank agreement between rankings.
pub fn ranking_agreement_matrix(
    results: &[ImportanceResult],
    statistic: Statistic,
    k: usize,
    tolerance: usize,
    categories: &HashMap<String, Category>,
) -> Result<AgreementMatrix> {
    let ids = results.iter().map(|r| r.method_id.clone()).collect();
    match statistic {
        Statistic::TopK => build_matrix(statistic, ids, categories, Some(1.0), |a, b| {
            top_k_feature_agreement(&results[a], &results[b], k)
        }),
        Statistic::Rank => build_matrix(statistic, ids, categories, Some(1.0), |a, b| {
            rank_agreement(&results[a], &results[b], k, tolerance)
        }),
        Statistic::Effect => Err(Error::InvalidInput("effect agreement needs curve sets".into())),
    }
}

/// Pairwise effect agreement between methods' curve sets.
pub fn effect_agreement_matrix(
    curve_sets: &[(String, CurveSet)],
    grids: &BTreeMap<usize, BinGrid>,
    categories: &HashMap<String, Category>,
) -> Result<AgreementMatrix> {
    let ids = curve_sets.iter().map(|(id, _)| id.clone()).collect();
    build_matrix(Statistic::Effect, ids, categories, None, |a, b| {
        effect_agreement(&curve_sets[a].1, &curve_sets[b].1, grids)
    })
}
