//! Dataset ingestion, standardization, correlation analysis, feature grouping and
//! the quantile bin grid shared by every binned method.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Feature matrix plus binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    feature_names: Vec<String>,
    targets: Vec<u8>,
    base_rate: f64,
}

impl Dataset {
    pub fn new(features: Array2<f64>, feature_names: Vec<String>, targets: Vec<u8>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no examples".into()));
        }
        if feature_names.len() != d {
            return Err(Error::InvalidInput(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                d
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        if targets.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(row) = targets.iter().position(|&t| t > 1) {
            return Err(Error::NonBinaryTarget {
                row: row + 1,
                value: targets[row].to_string(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let positives = targets.iter().filter(|&&t| t == 1).count();
        Ok(Self {
            features,
            feature_names,
            targets,
            base_rate: positives as f64 / n as f64,
        })
    }

    /// Names default to `x0`, `x1`, ...
    pub fn from_parts(features: Array2<f64>, targets: Vec<u8>) -> Result<Self> {
        let names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, names, targets)
    }

    pub fn n_examples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.features.column(j)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn targets(&self) -> &[u8] {
        &self.targets
    }

    pub fn base_rate(&self) -> f64 {
        self.base_rate
    }

    /// Same schema and targets, new feature values.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.feature_names.clone(), self.targets.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), rows);
        let targets = rows.iter().map(|&i| self.targets[i]).collect();
        Self::new(features, self.feature_names.clone(), targets)
    }
}

/// Reads a comma-separated file with a header row. Every column other than
/// `target_column` becomes a real-valued feature, in header order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingTarget(target_column.to_string()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (c, header) in headers.iter().enumerate() {
            let cell = record.get(c).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: header.clone(),
                });
            }
            if c == target_idx {
                let t = match cell.parse::<f64>() {
                    Ok(0.0) => 0u8,
                    Ok(1.0) => 1u8,
                    _ => {
                        return Err(Error::NonBinaryTarget {
                            row,
                            value: cell.to_string(),
                        })
                    }
                };
                targets.push(t);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => {
                        return Err(Error::NonNumeric {
                            row,
                            column: header.clone(),
                            value: cell.to_string(),
                        })
                    }
                }
            }
        }
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, feature_names.len()), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Dataset::new(features, feature_names, targets)
}

/// Writes features then the target column. Floats use the shortest round-trip
/// representation, so `load_csv` reads back identical values.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, target_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = data.feature_names().iter().map(String::as_str).collect();
    header.push(target_column);
    w.write_record(&header)?;
    for (row, &t) in data.features().rows().into_iter().zip(data.targets()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(t.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl StandardizationParams {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            stds.push(var.sqrt());
        }
        Self { means, stds }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            means: vec![0.0; d],
            stds: vec![1.0; d],
        }
    }

    /// Constant features (std 0) map to 0.
    #[inline]
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let s = self.stds[j];
        if s > 0.0 {
            (v - self.means[j]) / s
        } else {
            0.0
        }
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| self.scale(j, v));
        }
        out
    }

    pub fn inverse_transform(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = z.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }
}

/// Standardizes every feature to mean 0 and population std 1.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    if data.n_examples() < 2 {
        return Err(Error::InvalidInput(
            "standardize needs at least 2 examples".into(),
        ));
    }
    let params = StandardizationParams::fit(data.features());
    let z = params.transform(data.features());
    Ok((data.with_features(z)?, params))
}

/// Pearson correlation matrix. Pairs involving a constant feature are 0 off the
/// diagonal, and the constant feature's own diagonal entry is 0 as well.
pub fn correlation_matrix(data: &Dataset) -> Array2<f64> {
    let x = data.features();
    let d = x.ncols();
    let n = x.nrows() as f64;
    let centered: Vec<Array1<f64>> = x
        .columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            c.mapv(|v| v - m)
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.dot(c).sqrt()).collect();
    let mut corr = Array2::zeros((d, d));
    for i in 0..d {
        if norms[i] == 0.0 {
            continue;
        }
        corr[[i, i]] = 1.0;
        for j in (i + 1)..d {
            if norms[j] == 0.0 {
                continue;
            }
            let r = (centered[i].dot(&centered[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            corr[[i, j]] = r;
            corr[[j, i]] = r;
        }
    }
    corr
}

/// One agglomeration step. Node ids follow the usual convention: leaves are
/// `0..n`, the cluster created by merge `k` is `n + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaf members of any node id.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(id) = stack.pop() {
            if id < self.n_leaves {
                out.push(id);
            } else {
                let m = &self.merges[id - self.n_leaves];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out.sort_unstable();
        out
    }
}

/// Complete-linkage agglomerative clustering on `1 - |corr|`, run to a single
/// cluster. Ties go to the pair whose clusters hold the lowest feature indices.
pub fn complete_linkage(corr: ArrayView2<'_, f64>) -> Dendrogram {
    let d = corr.nrows();
    let dist = |a: usize, b: usize| 1.0 - corr[[a, b]].abs();
    // (node id, members), kept ordered by lowest member
    let mut active: Vec<(usize, Vec<usize>)> = (0..d).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(d.saturating_sub(1));
    while active.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..active.len() {
            for b in (a + 1)..active.len() {
                let mut link = f64::NEG_INFINITY;
                for &i in &active[a].1 {
                    for &j in &active[b].1 {
                        link = link.max(dist(i, j));
                    }
                }
                if best.is_none_or(|(_, _, bd)| link < bd) {
                    best = Some((a, b, link));
                }
            }
        }
        let (a, b, distance) = best.expect("at least two clusters");
        let (right_id, right_members) = active.remove(b);
        let (left_id, mut members) = active.remove(a);
        members.extend(right_members);
        members.sort_unstable();
        merges.push(Merge {
            left: left_id,
            right: right_id,
            distance,
        });
        let id = d + merges.len() - 1;
        let pos = active
            .iter()
            .position(|(_, m)| m[0] > members[0])
            .unwrap_or(active.len());
        active.insert(pos, (id, members));
    }
    Dendrogram { n_leaves: d, merges }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub members: Vec<usize>,
}

/// Disjoint, non-empty feature groups in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroups {
    groups: Vec<FeatureGroup>,
}

impl FeatureGroups {
    pub fn new(groups: Vec<FeatureGroup>, n_features: usize) -> Result<Self> {
        let mut seen = vec![false; n_features];
        let mut names = HashSet::new();
        for g in &groups {
            if g.members.is_empty() {
                return Err(Error::InvalidInput(format!("group {:?} is empty", g.name)));
            }
            if !names.insert(g.name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate group name {:?}", g.name)));
            }
            for &j in &g.members {
                if j >= n_features {
                    return Err(Error::InvalidInput(format!(
                        "group {:?} references feature {j} but there are {n_features}",
                        g.name
                    )));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::InvalidInput(format!(
                        "feature {j} appears in more than one group"
                    )));
                }
            }
        }
        let groups = groups
            .into_iter()
            .map(|mut g| {
                g.members.sort_unstable();
                g
            })
            .collect();
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Renames every group to its members' feature names joined by `+`.
    pub fn labelled(mut self, feature_names: &[String]) -> Self {
        for g in &mut self.groups {
            g.name = g
                .members
                .iter()
                .map(|&j| feature_names[j].as_str())
                .collect::<Vec<_>>()
                .join("+");
        }
        self
    }
}

/// Groups features whose absolute correlation exceeds `threshold` under complete
/// linkage. Every feature lands in exactly one group, singletons included.
pub fn cluster_features(corr: ArrayView2<'_, f64>, threshold: f64) -> FeatureGroups {
    let d = corr.nrows();
    let dendrogram = complete_linkage(corr);
    let cut = 1.0 - threshold;
    let mut clusters: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    let mut node_of: Vec<usize> = (0..d).collect(); // cluster slot -> node id
    for (k, m) in dendrogram.merges.iter().enumerate() {
        if m.distance >= cut {
            break;
        }
        let a = node_of.iter().position(|&id| id == m.left).expect("left node");
        let b = node_of.iter().position(|&id| id == m.right).expect("right node");
        let (lo, hi) = (a.min(b), a.max(b));
        let moved = clusters.remove(hi);
        node_of.remove(hi);
        clusters[lo].extend(moved);
        clusters[lo].sort_unstable();
        node_of[lo] = d + k;
    }
    clusters.sort_by_key(|c| c[0]);
    let groups = clusters
        .into_iter()
        .enumerate()
        .map(|(k, members)| FeatureGroup {
            name: format!("group{k}"),
            members,
        })
        .collect();
    FeatureGroups::new(groups, d).expect("linkage clusters form a partition")
}

/// Bin edges shared by PD, ALE, the event-rate histogram and binned attributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Linear-interpolation sample quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

impl BinGrid {
    /// Builds a grid from explicit edges and counts the given values into it.
    pub fn from_edges(edges: Vec<f64>, values: &[f64]) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "bin edges must be strictly increasing".into(),
            ));
        }
        let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut grid = Self {
            counts: vec![0; edges.len() - 1],
            edges,
            centers,
        };
        for &v in values {
            let b = grid.bin_of(v);
            grid.counts[b] += 1;
        }
        Ok(grid)
    }

    pub fn n_bins(&self) -> usize {
        self.centers.len()
    }

    /// Bins are closed on the left; the last bin is closed on both sides. Values
    /// outside the grid are clamped into the first or last bin.
    pub fn bin_of(&self, v: f64) -> usize {
        let interior = &self.edges[1..self.edges.len() - 1];
        interior.partition_point(|&e| e <= v)
    }

    /// Removes empty bins by folding each into its left neighbour (the first bin
    /// folds right). Counts are recomputed from `values`.
    pub fn merge_empty(&self, values: &[f64]) -> Result<Self> {
        let mut edges = self.edges.clone();
        let mut grid = Self::from_edges(edges.clone(), values)?;
        while let Some(b) = grid.counts.iter().position(|&c| c == 0) {
            if grid.n_bins() == 1 {
                break;
            }
            // dropping edge b folds bin b into b-1; edge b+1 for the first bin
            let drop = if b == 0 { 1 } else { b };
            edges.remove(drop);
            grid = Self::from_edges(edges.clone(), values)?;
        }
        Ok(grid)
    }
}

/// Quantile bin grid with `n_bins` equally spaced probability levels. Repeated
/// edges collapse, so fewer bins may come back. The outer edges are pushed out by
/// a relative margin of 1e-9 so the extreme values sit strictly inside.
pub fn quantile_bins(values: &[f64], n_bins: usize) -> Result<BinGrid> {
    if n_bins == 0 || values.is_empty() {
        return Err(Error::InvalidInput(
            "quantile_bins needs values and n_bins >= 1".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let spread = hi - lo;
    if spread <= 0.0 {
        return Err(Error::DegenerateFeature);
    }
    let mut edges: Vec<f64> = (0..=n_bins)
        .map(|k| quantile_sorted(&sorted, k as f64 / n_bins as f64))
        .collect();
    edges.dedup();
    let margin = 1e-9 * spread.max(lo.abs()).max(hi.abs());
    edges[0] = lo - margin;
    let last = edges.len() - 1;
    edges[last] = hi + margin;
    BinGrid::from_edges(edges, values)
}
