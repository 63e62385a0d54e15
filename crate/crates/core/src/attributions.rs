//! Local additive attributions (exact Shapley, Owen, LIME, tree interpreter),
//! SAGE loss attribution, and aggregation of local attributions into global
//! rankings and binned effect curves.
//!
//! Shapley, Owen and SAGE all use the marginal value function: features outside
//! the coalition take their values from background rows.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, BinGrid, Dataset, Dendrogram};
use crate::effects::{Centering, EffectCurve};
use crate::importance::{ImportanceResult, Mode};
use crate::models::{check_width, ProbabilisticClassifier, RandomForestModel};
use crate::rng::{substream, tag};
use crate::{Error, Result};

pub const MAX_EXACT_FEATURES: usize = 12;

/// One explained row: `phi0 + sum(phi)` reconstructs the prediction for methods
/// with local accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub phi: Vec<f64>,
    pub phi0: f64,
    /// Set when the solver needed a ridge fallback (LIME only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ridge_fallback: bool,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.phi0 + self.phi.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSet {
    #[serde(rename = "method")]
    pub method_id: String,
    pub feature_names: Vec<String>,
    #[serde(rename = "rows")]
    pub explained_row_indices: Vec<usize>,
    /// Feature values of each explained row.
    pub values: Vec<Vec<f64>>,
    pub phi0: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Rows whose fit fell back to ridge regularization.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ridge_fallback_rows: Vec<usize>,
}

/// Explains `rows` of `data` in parallel, keeping row order.
pub fn explain_rows<F>(method_id: &str, data: &Dataset, rows: &[usize], explain: F) -> Result<AttributionSet>
where
    F: Fn(usize, ArrayView1<'_, f64>) -> Result<Attribution> + Sync,
{
    let out: Vec<Attribution> = rows
        .par_iter()
        .map(|&i| explain(i, data.row(i)))
        .collect::<Result<_>>()?;
    Ok(AttributionSet {
        method_id: method_id.to_string(),
        feature_names: data.feature_names().to_vec(),
        explained_row_indices: rows.to_vec(),
        values: rows.iter().map(|&i| data.row(i).to_vec()).collect(),
        phi0: out.iter().map(|a| a.phi0).collect(),
        ridge_fallback_rows: rows
            .iter()
            .zip(&out)
            .filter(|(_, a)| a.ridge_fallback)
            .map(|(&i, _)| i)
            .collect(),
        phi: out.into_iter().map(|a| a.phi).collect(),
    })
}

/// Up to `cap` distinct row indices drawn without replacement, sorted.
pub fn sample_rows(n: usize, cap: usize, seed: u64, stream: u64) -> Vec<usize> {
    if cap >= n {
        return (0..n).collect();
    }
    let mut rows = index::sample(&mut substream(seed, &[tag::SAMPLE, stream]), n, cap).into_vec();
    rows.sort_unstable();
    rows
}

/// Seeded background rows for the marginal value function.
pub fn background_rows(data: &Dataset, size: usize, seed: u64) -> Array2<f64> {
    let rows = sample_rows(data.n_examples(), size, seed, tag::BACKGROUND);
    data.features().select(ndarray::Axis(0), &rows)
}

/// `v(S)`: mean prediction over background rows with the instance's values
/// written into the features of `mask`.
struct MarginalValue<'a, M: ?Sized> {
    model: &'a M,
    instance: ArrayView1<'a, f64>,
    background: ArrayView2<'a, f64>,
}

impl<M: ProbabilisticClassifier + ?Sized> MarginalValue<'_, M> {
    fn value(&self, mask: u64) -> f64 {
        let mut x = self.background.to_owned();
        for (j, &v) in self.instance.iter().enumerate() {
            if mask >> j & 1 == 1 {
                x.column_mut(j).fill(v);
            }
        }
        let p = self.model.predict_rows(x.view());
        p.iter().sum::<f64>() / p.len() as f64
    }
}

fn check_instance<M: ProbabilisticClassifier + ?Sized>(
    model: &M,
    instance: ArrayView1<'_, f64>,
    background: ArrayView2<'_, f64>,
) -> Result<()> {
    check_width(model.n_features(), instance.len())?;
    check_width(model.n_features(), background.ncols())?;
    if background.nrows() == 0 {
        return Err(Error::InvalidInput("empty background".into()));
    }
    Ok(())
}

/// `s! (d - s - 1)! / d!` for `s` in `0..d`.
fn shapley_weights(d: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=d)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect()
}

/// Shapley values by enumerating every coalition.
pub fn exact_shapley<M>(
    model: &M,
    instance: ArrayView1<'_, f64>,
    background: ArrayView2<'_, f64>,
) -> Result<Attribution>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_instance(model, instance, background)?;
    let d = instance.len();
    if d > MAX_EXACT_FEATURES {
        return Err(Error::TooManyFeatures(d));
    }
    let vf = MarginalValue {
        model,
        instance,
        background,
    };
    let v: Vec<f64> = (0..1u64 << d).map(|mask| vf.value(mask)).collect();
    let w = shapley_weights(d);
    let phi = (0..d)
        .map(|j| {
            let bit = 1u64 << j;
            (0..1u64 << d)
                .filter(|s| s & bit == 0)
                .map(|s| w[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]))
                .sum()
        })
        .collect();
    Ok(Attribution {
        phi,
        phi0: v[0],
        ridge_fallback: false,
    })
}

/// Nested coalition structure over feature indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionTree {
    Leaf(usize),
    Group(Vec<PartitionTree>),
}

impl PartitionTree {
    /// Every feature its own block under one root.
    pub fn flat(d: usize) -> Self {
        PartitionTree::Group((0..d).map(PartitionTree::Leaf).collect())
    }

    /// Binary hierarchy following the merge order of a linkage dendrogram.
    pub fn from_dendrogram(dendrogram: &Dendrogram) -> Result<Self> {
        let d = dendrogram.n_leaves;
        if d == 0 {
            return Err(Error::InvalidInput("empty dendrogram".into()));
        }
        if dendrogram.merges.len() + 1 != d {
            return Err(Error::InvalidInput("dendrogram does not join all leaves".into()));
        }
        let mut nodes: Vec<Option<PartitionTree>> = (0..d).map(|j| Some(PartitionTree::Leaf(j))).collect();
        for m in &dendrogram.merges {
            let take = |nodes: &mut Vec<Option<PartitionTree>>, id: usize| {
                nodes
                    .get_mut(id)
                    .and_then(Option::take)
                    .ok_or_else(|| Error::InvalidInput(format!("dendrogram node {id} used twice")))
            };
            let l = take(&mut nodes, m.left)?;
            let r = take(&mut nodes, m.right)?;
            nodes.push(Some(PartitionTree::Group(vec![l, r])));
        }
        let root = nodes.pop().flatten().expect("last merge is the root");
        Ok(match root {
            leaf @ PartitionTree::Leaf(_) => PartitionTree::Group(vec![leaf]),
            g => g,
        })
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            PartitionTree::Leaf(j) => vec![*j],
            PartitionTree::Group(c) => c.iter().flat_map(PartitionTree::leaves).collect(),
        }
    }

    fn mask(&self) -> u64 {
        self.leaves().iter().fold(0, |m, &j| m | 1 << j)
    }

    /// Leaves must be exactly `0..d`, each once, with no empty groups.
    pub fn validate(&self, d: usize) -> Result<()> {
        fn no_empty(t: &PartitionTree) -> bool {
            match t {
                PartitionTree::Leaf(_) => true,
                PartitionTree::Group(c) => !c.is_empty() && c.iter().all(no_empty),
            }
        }
        let mut leaves = self.leaves();
        leaves.sort_unstable();
        if !no_empty(self) || leaves != (0..d).collect::<Vec<_>>() {
            return Err(Error::InvalidInput("malformed partition".into()));
        }
        Ok(())
    }
}

struct OwenSolver<'a, M: ?Sized> {
    vf: MarginalValue<'a, M>,
    memo: HashMap<u64, f64>,
}

impl<M: ProbabilisticClassifier + ?Sized> OwenSolver<'_, M> {
    fn v(&mut self, mask: u64) -> f64 {
        if let Some(&v) = self.memo.get(&mask) {
            return v;
        }
        let v = self.vf.value(mask);
        self.memo.insert(mask, v);
        v
    }

    /// Attribution of `target` within `children`, given features `outer`
    /// already present from enclosing levels.
    fn attribute(&mut self, children: &[PartitionTree], target: usize, outer: u64) -> f64 {
        let t = children
            .iter()
            .position(|c| c.leaves().contains(&target))
            .expect("target lies in the partition");
        let others: Vec<u64> = children
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != t)
            .map(|(_, c)| c.mask())
            .collect();
        let w = shapley_weights(children.len());
        let mut total = 0.0;
        for subset in 0..1u64 << others.len() {
            let mut coalition = outer;
            for (k, m) in others.iter().enumerate() {
                if subset >> k & 1 == 1 {
                    coalition |= m;
                }
            }
            let weight = w[subset.count_ones() as usize];
            let inner = match &children[t] {
                PartitionTree::Leaf(j) => self.v(coalition | 1 << j) - self.v(coalition),
                PartitionTree::Group(c) => self.attribute(c, target, coalition),
            };
            total += weight * inner;
        }
        total
    }
}

/// Owen values: Shapley splits between sibling blocks at every level of the
/// partition, recursing into the block that holds the feature.
pub fn owen_values<M>(
    model: &M,
    instance: ArrayView1<'_, f64>,
    background: ArrayView2<'_, f64>,
    partition: &PartitionTree,
) -> Result<Attribution>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_instance(model, instance, background)?;
    let d = instance.len();
    if d > 63 {
        return Err(Error::TooManyFeatures(d));
    }
    partition.validate(d)?;
    let mut solver = OwenSolver {
        vf: MarginalValue {
            model,
            instance,
            background,
        },
        memo: HashMap::new(),
    };
    let root = match partition {
        PartitionTree::Group(c) => c.clone(),
        leaf => vec![leaf.clone()],
    };
    let phi = (0..d).map(|j| solver.attribute(&root, j, 0)).collect();
    let phi0 = solver.v(0);
    Ok(Attribution {
        phi,
        phi0,
        ridge_fallback: false,
    })
}

/// Path-delta decomposition: each split on the way to the leaf credits its
/// feature with the change in positive fraction, averaged over trees.
pub fn tree_interpreter(forest: &RandomForestModel, instance: ArrayView1<'_, f64>) -> Result<Attribution> {
    check_width(forest.n_features(), instance.len())?;
    if forest.trees.is_empty() {
        return Err(Error::InvalidInput("untrained forest".into()));
    }
    let d = forest.n_features();
    let mut phi = vec![0.0; d];
    let mut phi0 = 0.0;
    for tree in &forest.trees {
        let path = tree.decision_path(instance);
        phi0 += tree.root_fraction();
        for w in path.windows(2) {
            let (parent, child) = (&tree.nodes[w[0]], &tree.nodes[w[1]]);
            if let crate::models::NodeKind::Split { feature, .. } = parent.kind {
                phi[feature] += child.positive_fraction - parent.positive_fraction;
            }
        }
    }
    let k = forest.trees.len() as f64;
    Ok(Attribution {
        phi: phi.iter().map(|p| p / k).collect(),
        phi0: phi0 / k,
        ridge_fallback: false,
    })
}

/// Quartile discretization of every feature plus the training values in each
/// bin, used to draw LIME perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct QuartileDiscretizer {
    cuts: Vec<Vec<f64>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl QuartileDiscretizer {
    pub fn fit(data: &Dataset) -> Self {
        let mut cuts = Vec::new();
        let mut values = Vec::new();
        for j in 0..data.n_features() {
            let mut col = data.column(j).to_vec();
            col.sort_by(f64::total_cmp);
            let mut c: Vec<f64> = [0.25, 0.5, 0.75]
                .iter()
                .map(|&p| quantile_sorted(&col, p))
                .collect();
            c.dedup();
            let mut bins = vec![Vec::new(); c.len() + 1];
            for &v in &col {
                bins[c.partition_point(|&e| e < v)].push(v);
            }
            cuts.push(c);
            values.push(bins);
        }
        Self { cuts, values }
    }

    /// Bins are closed on the right: `(q_k, q_{k+1}]`.
    pub fn bin_of(&self, j: usize, v: f64) -> usize {
        self.cuts[j].partition_point(|&e| e < v)
    }

    fn n_features(&self) -> usize {
        self.cuts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub n_samples: usize,
    /// Defaults to `0.75 * sqrt(d)`.
    pub kernel_width: Option<f64>,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            kernel_width: None,
            seed: 0,
        }
    }
}

/// Solves the symmetric positive definite system `a x = b` in place by Cholesky.
/// Returns `None` when a pivot is not safely positive.
#[allow(clippy::needless_range_loop)]
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    for j in 0..n {
        let mut s = a[j][j];
        for k in 0..j {
            s -= a[j][k] * a[j][k];
        }
        if s.is_nan() || s <= 1e-12 * scale {
            return None;
        }
        let l = s.sqrt();
        a[j][j] = l;
        for i in j + 1..n {
            let mut t = a[i][j];
            for k in 0..j {
                t -= a[i][k] * a[j][k];
            }
            a[i][j] = t / l;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i][k] * b[k];
        }
        b[i] /= a[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k][i] * b[k];
        }
        b[i] /= a[i][i];
    }
    Some(b)
}

/// LIME surrogate in binary "same quartile as the instance" space. `stream`
/// selects the random substream, normally the explained row index.
#[allow(clippy::needless_range_loop)]
pub fn lime_explain<M>(
    model: &M,
    instance: ArrayView1<'_, f64>,
    discretizer: &QuartileDiscretizer,
    cfg: &LimeConfig,
    stream: u64,
) -> Result<Attribution>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_width(model.n_features(), instance.len())?;
    check_width(discretizer.n_features(), instance.len())?;
    if cfg.n_samples < 2 {
        return Err(Error::InvalidInput("LIME needs at least 2 samples".into()));
    }
    let d = instance.len();
    let width = cfg.kernel_width.unwrap_or(0.75 * (d as f64).sqrt());
    let home: Vec<usize> = (0..d).map(|j| discretizer.bin_of(j, instance[j])).collect();
    // features whose training values all share one quartile cannot be perturbed
    let others: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            (0..discretizer.values[j].len())
                .filter(|&b| b != home[j] && !discretizer.values[j][b].is_empty())
                .collect()
        })
        .collect();
    let active: Vec<usize> = (0..d).filter(|&j| !others[j].is_empty()).collect();

    let mut rng = substream(cfg.seed, &[tag::LIME, stream]);
    let n = cfg.n_samples;
    let mut x = Array2::zeros((n, d));
    let mut z = vec![vec![1.0; active.len()]; n];
    for (s, zs) in z.iter_mut().enumerate() {
        for j in 0..d {
            x[[s, j]] = instance[j];
        }
        if s == 0 {
            continue;
        }
        for (a, &j) in active.iter().enumerate() {
            if rng.random::<bool>() {
                let bin = *others[j].choose(&mut rng).expect("non-empty");
                let pool = &discretizer.values[j][bin];
                x[[s, j]] = pool[rng.random_range(0..pool.len())];
                zs[a] = 0.0;
            }
        }
    }
    let y = model.predict_rows(x.view());

    // weighted normal equations with an intercept column
    let p = active.len() + 1;
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (zs, &ys) in z.iter().zip(&y) {
        let dist2 = zs.iter().filter(|&&v| v == 0.0).count() as f64;
        let w = (-dist2 / (width * width)).exp();
        let row: Vec<f64> = std::iter::once(1.0).chain(zs.iter().copied()).collect();
        for a in 0..p {
            aty[a] += w * row[a] * ys;
            for b in 0..=a {
                ata[a][b] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            ata[b][a] = ata[a][b];
        }
    }
    let (beta, ridge_fallback) = match cholesky_solve(ata.clone(), aty.clone()) {
        Some(beta) => (beta, false),
        None => {
            for (a, row) in ata.iter_mut().enumerate() {
                row[a] += 1e-6;
            }
            let beta = cholesky_solve(ata, aty)
                .ok_or_else(|| Error::InvalidInput("LIME design singular even with ridge".into()))?;
            (beta, true)
        }
    };
    let mut phi = vec![0.0; d];
    for (a, &j) in active.iter().enumerate() {
        phi[j] = beta[a + 1];
    }
    Ok(Attribution {
        phi,
        phi0: beta[0],
        ridge_fallback,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SageConfig {
    /// Upper bound on sampled (row, permutation) pairs.
    pub n_outer_samples: usize,
    /// Background rows averaged to impute the unknown features.
    pub batch: usize,
    /// Convergence is tested after every `check_every` samples.
    pub check_every: usize,
    /// Stop once every standard error is below this fraction of the largest
    /// absolute estimate.
    pub relative_tolerance: f64,
    pub seed: u64,
}

impl Default for SageConfig {
    fn default() -> Self {
        Self {
            n_outer_samples: 10_000,
            batch: 32,
            check_every: 256,
            relative_tolerance: 0.025,
            seed: 0,
        }
    }
}

fn log_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// SAGE values in log-loss units by permutation sampling.
///
/// Rows are visited in a seeded shuffled order, cycling when the sample budget
/// exceeds the dataset. Every coalition of one sample, the empty one included,
/// imputes its missing features from the same `batch` marginal background draws.
/// `baseline_score` is the model's mean loss and `all_permuted_score` the mean
/// loss of always predicting the mean probability.
pub fn sage_values<M>(model: &M, data: &Dataset, cfg: &SageConfig) -> Result<ImportanceResult>
where
    M: ProbabilisticClassifier + ?Sized,
{
    check_width(model.n_features(), data.n_features())?;
    if cfg.n_outer_samples == 0 || cfg.batch == 0 || cfg.check_every == 0 {
        return Err(Error::InvalidInput("SAGE sample sizes must be >= 1".into()));
    }
    let n = data.n_examples();
    let d = data.n_features();
    let x = data.features();
    let y = data.targets();
    let full = crate::models::predict_par(model, x);
    let mean_pred = full.iter().sum::<f64>() / n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(cfg.seed, &[tag::SAGE, u64::MAX]));

    let sample = |k: usize| -> Vec<f64> {
        let mut rng = substream(cfg.seed, &[tag::SAGE, k as u64]);
        let i = order[k % n];
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let mut imputed = Array2::zeros((cfg.batch, d));
        for mut row in imputed.rows_mut() {
            row.assign(&x.row(rng.random_range(0..n)));
        }
        let coalition_loss = |rows: &Array2<f64>| {
            let p = model.predict_rows(rows.view());
            log_loss(p.iter().sum::<f64>() / p.len() as f64, y[i])
        };
        let mut delta = vec![0.0; d];
        let mut prev = coalition_loss(&imputed);
        for &j in &perm {
            imputed.column_mut(j).fill(x[[i, j]]);
            let loss = coalition_loss(&imputed);
            delta[j] = prev - loss;
            prev = loss;
        }
        delta
    };

    let mut count = 0usize;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut converged = false;
    let mut std_errors = vec![f64::INFINITY; d];
    while count < cfg.n_outer_samples {
        let end = (count + cfg.check_every).min(cfg.n_outer_samples);
        let chunk: Vec<Vec<f64>> = (count..end).into_par_iter().map(sample).collect();
        for delta in &chunk {
            for j in 0..d {
                sum[j] += delta[j];
                sum_sq[j] += delta[j] * delta[j];
            }
        }
        count = end;
        if count < 2 {
            continue;
        }
        let c = count as f64;
        let means: Vec<f64> = sum.iter().map(|s| s / c).collect();
        std_errors = (0..d)
            .map(|j| ((sum_sq[j] / c - means[j] * means[j]).max(0.0) * c / (c - 1.0) / c).sqrt())
            .collect();
        let top = means.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if top > 0.0 && std_errors.iter().all(|&se| se < cfg.relative_tolerance * top) {
            converged = true;
            break;
        }
    }
    let scores: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut res =
        ImportanceResult::from_rounds("sage", data.feature_names().to_vec(), vec![scores], Mode::Single);
    res.std_errors = Some(std_errors);
    res.converged = Some(converged);
    res.baseline_score = Some(full.iter().zip(y).map(|(&p, &t)| log_loss(p, t)).sum::<f64>() / n as f64);
    res.all_permuted_score = Some(y.iter().map(|&t| log_loss(mean_pred, t)).sum::<f64>() / n as f64);
    Ok(res)
}

/// Per-feature sum of `|phi|` over the explained rows.
pub fn global_relevance(attr: &AttributionSet) -> ImportanceResult {
    let d = attr.feature_names.len();
    let scores = (0..d)
        .map(|j| attr.phi.iter().map(|row| row[j].abs()).sum())
        .collect();
    ImportanceResult::from_rounds(
        attr.method_id.clone(),
        attr.feature_names.clone(),
        vec![scores],
        Mode::Relevance,
    )
}

/// Mean attribution of feature `j` per bin of `grid`, over explained rows.
/// Empty bins are dropped and the curve is centred by its count-weighted mean.
pub fn binned_effect(attr: &AttributionSet, data: &Dataset, j: usize, grid: &BinGrid) -> Result<EffectCurve> {
    if j >= attr.feature_names.len() || j >= data.n_features() {
        return Err(Error::InvalidInput(format!("feature index {j} out of range")));
    }
    let k = grid.n_bins();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (row, &i) in attr.phi.iter().zip(&attr.explained_row_indices) {
        let b = grid.bin_of(data.features()[[i, j]]);
        sums[b] += row[j];
        counts[b] += 1;
    }
    let kept: Vec<usize> = (0..k).filter(|&b| counts[b] > 0).collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("no explained rows".into()));
    }
    let raw: Vec<f64> = kept.iter().map(|&b| sums[b] / counts[b] as f64).collect();
    let bin_counts: Vec<usize> = kept.iter().map(|&b| counts[b]).collect();
    let total: usize = bin_counts.iter().sum();
    let c = raw
        .iter()
        .zip(&bin_counts)
        .map(|(v, &n)| v * n as f64)
        .sum::<f64>()
        / total as f64;
    Ok(EffectCurve {
        feature_index: j,
        method_id: attr.method_id.clone(),
        grid: kept.iter().map(|&b| grid.centers[b]).collect(),
        values: raw.iter().map(|v| v - c).collect(),
        bin_counts,
        centering: Centering::CountWeighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StandardizationParams;
    use crate::models::{DecisionTree, LogisticRegressionModel, NodeKind, TreeNode};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    /// `p = c + beta . x`, kept inside [0, 1] by the test inputs.
    struct LinearProbability {
        c: f64,
        beta: Vec<f64>,
    }

    impl ProbabilisticClassifier for LinearProbability {
        fn n_features(&self) -> usize {
            self.beta.len()
        }

        fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64> {
            rows.rows()
                .into_iter()
                .map(|r| self.c + r.iter().zip(&self.beta).map(|(x, b)| x * b).sum::<f64>())
                .collect()
        }
    }

    fn uniform_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, &[77]);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn logistic(coefs: &[f64]) -> LogisticRegressionModel {
        LogisticRegressionModel {
            bias: 0.1,
            coefficients: coefs.to_vec(),
            standardization: StandardizationParams::identity(coefs.len()),
        }
    }

    #[test]
    fn shapley_linear_closed_form() {
        let m = LinearProbability {
            c: 0.5,
            beta: vec![0.1, -0.05, 0.2, 0.0],
        };
        let bg = uniform_rows(50, 4, 1);
        let x = array![0.3, -0.7, 0.9, 0.4];
        let a = exact_shapley(&m, x.view(), bg.view()).unwrap();
        for j in 0..4 {
            let mean = bg.column(j).mean().unwrap();
            assert_abs_diff_eq!(a.phi[j], m.beta[j] * (x[j] - mean), epsilon = 1e-12);
        }
        assert_eq!(a.phi[3], 0.0);
    }

    #[test]
    fn shapley_symmetry_and_efficiency() {
        let m = logistic(&[0.8, 0.8, -0.3, 1.1, 0.0]);
        let mut bg = uniform_rows(40, 5, 2);
        // exchangeable: features 0 and 1 share values everywhere
        let c0 = bg.column(0).to_owned();
        bg.column_mut(1).assign(&c0);
        let x = array![0.4, 0.4, -0.2, 0.6, 0.9];
        let a = exact_shapley(&m, x.view(), bg.view()).unwrap();
        assert_abs_diff_eq!(a.phi[0], a.phi[1], epsilon = 1e-12);
        assert_abs_diff_eq!(a.phi[4], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.total(), m.predict_row(x.view()), epsilon = 1e-12);
    }

    #[test]
    fn too_many_features() {
        let m = logistic(&[0.1; 13]);
        let bg = uniform_rows(3, 13, 3);
        let x = Array1::zeros(13);
        assert!(matches!(
            exact_shapley(&m, x.view(), bg.view()),
            Err(Error::TooManyFeatures(13))
        ));
    }

    #[test]
    fn consistency_in_coefficient() {
        let bg = uniform_rows(30, 3, 4);
        let x = array![0.5, 0.2, -0.4];
        let mut last = f64::NEG_INFINITY;
        for b in [0.0, 0.05, 0.1, 0.15, 0.2] {
            let m = LinearProbability {
                c: 0.5,
                beta: vec![b, 0.1, 0.1],
            };
            let phi = exact_shapley(&m, x.view(), bg.view()).unwrap().phi[0];
            assert!(phi >= last);
            last = phi;
        }
    }

    #[test]
    fn owen_flat_equals_shapley() {
        let m = logistic(&[0.8, -0.5, 0.3, 1.1, 0.0, 0.4]);
        let bg = uniform_rows(30, 6, 5);
        let x = array![0.4, -0.1, -0.2, 0.6, 0.9, -0.8];
        let s = exact_shapley(&m, x.view(), bg.view()).unwrap();
        let o = owen_values(&m, x.view(), bg.view(), &PartitionTree::flat(6)).unwrap();
        for j in 0..6 {
            assert_abs_diff_eq!(s.phi[j], o.phi[j], epsilon = 1e-12);
        }
        let nested = PartitionTree::Group(vec![PartitionTree::flat(6)]);
        let o2 = owen_values(&m, x.view(), bg.view(), &nested).unwrap();
        assert_abs_diff_eq!(o2.total(), m.predict_row(x.view()), epsilon = 1e-12);
    }

    #[test]
    fn owen_two_level_hand_recursion() {
        // v(S) from a 3-feature model; blocks {0,1} and {2}
        let m = logistic(&[1.0, 1.0, -0.7]);
        let mut bg = uniform_rows(25, 3, 6);
        // perfectly correlated pair
        let c0 = bg.column(0).to_owned();
        bg.column_mut(1).assign(&c0);
        let x = array![0.6, 0.6, 0.3];
        let part = PartitionTree::Group(vec![
            PartitionTree::Group(vec![PartitionTree::Leaf(0), PartitionTree::Leaf(1)]),
            PartitionTree::Leaf(2),
        ]);
        let o = owen_values(&m, x.view(), bg.view(), &part).unwrap();
        let vf = MarginalValue {
            model: &m,
            instance: x.view(),
            background: bg.view(),
        };
        let v = |s: u64| vf.value(s);
        // feature 0: outer level averages over {2} absent / present, inner level
        // averages over {1} absent / present
        let inner =
            |outer: u64| 0.5 * (v(outer | 1) - v(outer)) + 0.5 * (v(outer | 0b011) - v(outer | 0b010));
        let phi0 = 0.5 * inner(0) + 0.5 * inner(0b100);
        let phi2 = 0.5 * (v(0b100) - v(0)) + 0.5 * (v(0b111) - v(0b011));
        assert_abs_diff_eq!(o.phi[0], phi0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.phi[2], phi2, epsilon = 1e-12);
        // identical features inside one block split their joint credit equally
        assert_abs_diff_eq!(o.phi[0], o.phi[1], epsilon = 1e-12);
        assert_abs_diff_eq!(o.total(), m.predict_row(x.view()), epsilon = 1e-12);
    }

    #[test]
    fn partition_validation() {
        assert!(PartitionTree::flat(3).validate(3).is_ok());
        assert!(PartitionTree::flat(3).validate(4).is_err());
        let dup = PartitionTree::Group(vec![PartitionTree::Leaf(0), PartitionTree::Leaf(0)]);
        assert!(dup.validate(2).is_err());
        assert!(
            PartitionTree::Group(vec![PartitionTree::Leaf(0), PartitionTree::Group(vec![])])
                .validate(1)
                .is_err()
        );
    }

    #[test]
    fn partition_from_dendrogram() {
        let corr = array![[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]];
        let dend = crate::data::complete_linkage(corr.view());
        let t = PartitionTree::from_dendrogram(&dend).unwrap();
        t.validate(3).unwrap();
        let PartitionTree::Group(top) = &t else { panic!() };
        assert_eq!(top.len(), 2);
    }

    fn node(kind: NodeKind, pf: f64) -> TreeNode {
        TreeNode {
            kind,
            positive_fraction: pf,
            n_train: 10,
            impurity: 0.0,
        }
    }

    #[test]
    fn tree_interpreter_path_example() {
        // root 0.4 --x1--> 0.6 --x2--> 0.8
        let tree = DecisionTree {
            nodes: vec![
                node(
                    NodeKind::Split {
                        feature: 1,
                        threshold: 0.0,
                        left: 1,
                        right: 2,
                    },
                    0.4,
                ),
                node(NodeKind::Leaf, 0.1),
                node(
                    NodeKind::Split {
                        feature: 2,
                        threshold: 0.0,
                        left: 3,
                        right: 4,
                    },
                    0.6,
                ),
                node(NodeKind::Leaf, 0.3),
                node(NodeKind::Leaf, 0.8),
            ],
        };
        let forest = RandomForestModel {
            trees: vec![tree],
            features_per_split: 1,
            trained_with_bootstrap: false,
            n_features: 3,
        };
        let x = array![0.0, 1.0, 1.0];
        let a = tree_interpreter(&forest, x.view()).unwrap();
        assert_abs_diff_eq!(a.phi0, 0.4);
        assert_abs_diff_eq!(a.phi[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi[2], 0.2, epsilon = 1e-15);
        assert_eq!(a.phi[0], 0.0);
        assert_abs_diff_eq!(a.total(), forest.predict_row(x.view()), epsilon = 1e-15);
    }

    #[test]
    fn lime_constant_model() {
        let m = LinearProbability {
            c: 0.7,
            beta: vec![0.0; 3],
        };
        let data = Dataset::from_parts(uniform_rows(200, 3, 7), vec![0; 200]).unwrap();
        let disc = QuartileDiscretizer::fit(&data);
        let a = lime_explain(&m, data.row(5), &disc, &LimeConfig::default(), 5).unwrap();
        assert_abs_diff_eq!(a.phi0, 0.7, epsilon = 1e-6);
        assert!(a.phi.iter().all(|p| p.abs() < 1e-6));
    }

    #[test]
    fn lime_single_relevant_feature_dominates() {
        let m = logistic(&[3.0, 0.0, 0.0, 0.0]);
        let data = Dataset::from_parts(uniform_rows(1000, 4, 8), vec![0; 1000]).unwrap();
        let disc = QuartileDiscretizer::fit(&data);
        let cfg = LimeConfig {
            seed: 3,
            ..Default::default()
        };
        for i in [0, 17, 300] {
            let a = lime_explain(&m, data.row(i), &disc, &cfg, i as u64).unwrap();
            let rest = a.phi[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(a.phi[0].abs() > 5.0 * rest, "{:?}", a.phi);
            assert_eq!(a, lime_explain(&m, data.row(i), &disc, &cfg, i as u64).unwrap());
        }
    }

    #[test]
    fn cholesky_matches_known_solution() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let x = cholesky_solve(a, vec![2.0, 5.0]).unwrap();
        assert_abs_diff_eq!(x[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
        assert!(cholesky_solve(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 1.0]).is_none());
    }

    #[test]
    fn aggregation_examples() {
        let data = Dataset::from_parts(uniform_rows(4, 2, 9), vec![0, 1, 0, 1]).unwrap();
        let one = AttributionSet {
            method_id: "shap".into(),
            feature_names: data.feature_names().to_vec(),
            explained_row_indices: vec![2],
            values: vec![data.row(2).to_vec()],
            phi0: vec![0.5],
            phi: vec![vec![-0.3, 0.1]],
            ridge_fallback_rows: vec![],
        };
        assert_eq!(global_relevance(&one).scores, vec![0.3, 0.1]);

        let zero = AttributionSet {
            explained_row_indices: vec![0, 1, 2, 3],
            values: (0..4).map(|i| data.row(i).to_vec()).collect(),
            phi0: vec![0.5; 4],
            phi: vec![vec![0.0, 0.2]; 4],
            ..one
        };
        assert_eq!(global_relevance(&zero).scores[0], 0.0);
        let grid = crate::data::quantile_bins(&data.column(0).to_vec(), 2).unwrap();
        let c = binned_effect(&zero, &data, 0, &grid).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binned_shap_reproduces_line() {
        let m = LinearProbability {
            c: 0.5,
            beta: vec![0.2, -0.1],
        };
        let data = Dataset::from_parts(uniform_rows(3000, 2, 10), vec![0; 3000]).unwrap();
        let bg = background_rows(&data, 100, 1);
        let rows: Vec<usize> = (0..3000).collect();
        let set = explain_rows("shap", &data, &rows, |_, x| exact_shapley(&m, x, bg.view())).unwrap();
        let grid = crate::data::quantile_bins(&data.column(0).to_vec(), 30).unwrap();
        let c = binned_effect(&set, &data, 0, &grid).unwrap();
        let xbar = data.column(0).mean().unwrap();
        for (x, v) in c.grid.iter().zip(&c.values) {
            assert!((v - 0.2 * (x - xbar)).abs() < 0.01);
        }
    }

    #[test]
    fn sage_missingness_and_efficiency() {
        let spec = crate::synth::LogisticSpec {
            n: 1000,
            bias: -0.2,
            coefficients: vec![1.2, -0.8, 0.0],
            correlation: None,
        };
        let data = crate::synth::logistic_dataset(&spec, 11);
        let m = logistic(&[1.2, -0.8, 0.0]);
        let cfg = SageConfig {
            n_outer_samples: 1000,
            check_every: 1000,
            seed: 2,
            ..Default::default()
        };
        let r = sage_values(&m, &data, &cfg).unwrap();
        assert_eq!(r.scores[2], 0.0);
        let gap = r.all_permuted_score.unwrap() - r.baseline_score.unwrap();
        let total: f64 = r.scores.iter().sum();
        assert!((total - gap).abs() < 0.05 * gap, "{total} vs {gap}");
        assert_eq!(r, sage_values(&m, &data, &cfg).unwrap());
    }
}
