//! Classification random forest grown with Gini-impurity axis splits.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ProbabilisticClassifier;
use crate::data::Dataset;
use crate::importance::{ImportanceResult, Mode};
use crate::rng::{substream, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub kind: NodeKind,
    /// Fraction of positive training examples reaching this node.
    pub positive_fraction: f64,
    pub n_train: usize,
    pub impurity: f64,
}

/// Flat array of nodes; the root is node 0. Rows go left when
/// `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

#[inline]
fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl DecisionTree {
    pub fn root_fraction(&self) -> f64 {
        self.nodes[0].positive_fraction
    }

    /// Node ids from the root to the leaf that `row` falls into.
    pub fn decision_path(&self, row: ArrayView1<'_, f64>) -> Vec<usize> {
        let mut path = vec![0];
        let mut id = 0;
        while let NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[id].kind
        {
            id = if row[feature] <= threshold { left } else { right };
            path.push(id);
        }
        path
    }

    pub fn leaf_of(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut id = 0;
        while let NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[id].kind
        {
            id = if row[feature] <= threshold { left } else { right };
        }
        id
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.nodes[self.leaf_of(row)].positive_fraction
    }

    pub fn n_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Split { .. }))
            .count()
    }
}

struct Grower<'a, R: Rng> {
    x: ArrayView2<'a, f64>,
    y: &'a [u8],
    max_depth: usize,
    min_leaf: usize,
    features_per_split: usize,
    rng: R,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    weighted: f64,
}

impl<R: Rng> Grower<'_, R> {
    fn grow(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let n = samples.len();
        let pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let impurity = gini(pos, n);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            kind: NodeKind::Leaf,
            positive_fraction: pos as f64 / n as f64,
            n_train: n,
            impurity,
        });
        if depth >= self.max_depth || impurity == 0.0 || n < 2 * self.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(samples, impurity) else {
            return id;
        };
        let (f, t) = (best.feature, best.threshold);
        let x = self.x;
        samples.sort_by(|&a, &b| (x[[a, f]] > t).cmp(&(x[[b, f]] > t)).then(a.cmp(&b)));
        let split_at = samples.partition_point(|&i| x[[i, f]] <= t);
        let (left_samples, right_samples) = samples.split_at_mut(split_at);
        let left = self.grow(left_samples, depth + 1);
        let right = self.grow(right_samples, depth + 1);
        self.nodes[id].kind = NodeKind::Split {
            feature: f,
            threshold: t,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, samples: &[usize], impurity: f64) -> Option<BestSplit> {
        let d = self.x.ncols();
        let k = self.features_per_split.min(d);
        let mut candidates = index::sample(&mut self.rng, d, k).into_vec();
        candidates.sort_unstable();

        let n = samples.len();
        let total_pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f64, u8)> = Vec::with_capacity(n);
        for &f in &candidates {
            sorted.clear();
            sorted.extend(samples.iter().map(|&i| (self.x[[i, f]], self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 1..n {
                left_pos += usize::from(sorted[i - 1].1);
                let (lo, hi) = (sorted[i - 1].0, sorted[i].0);
                if lo == hi || i < self.min_leaf || n - i < self.min_leaf {
                    continue;
                }
                let weighted = (i as f64 * gini(left_pos, i)
                    + (n - i) as f64 * gini(total_pos - left_pos, n - i))
                    / n as f64;
                if best.as_ref().is_none_or(|b| weighted < b.weighted) {
                    let mid = 0.5 * (lo + hi);
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        weighted,
                    });
                }
            }
        }
        best.filter(|b| impurity - b.weighted > 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Defaults to `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 10,
            min_leaf: 5,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub trees: Vec<DecisionTree>,
    pub features_per_split: usize,
    pub trained_with_bootstrap: bool,
    pub n_features: usize,
}

impl RandomForestModel {
    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

impl ProbabilisticClassifier for RandomForestModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64> {
        let k = self.trees.len() as f64;
        rows.rows()
            .into_iter()
            .map(|r| self.trees.iter().map(|t| t.predict_row(r)).sum::<f64>() / k)
            .collect()
    }
}

pub fn train_random_forest(data: &Dataset, cfg: &ForestConfig) -> Result<RandomForestModel> {
    if cfg.n_trees == 0 {
        return Err(Error::InvalidInput("n_trees must be >= 1".into()));
    }
    if cfg.max_depth == 0 {
        return Err(Error::InvalidInput("max_depth must be >= 1".into()));
    }
    if cfg.min_leaf == 0 {
        return Err(Error::InvalidInput("min_leaf must be >= 1".into()));
    }
    let n = data.n_examples();
    let d = data.n_features();
    let features_per_split = cfg
        .features_per_split
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));

    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut samples: Vec<usize> = if cfg.bootstrap {
                let mut rng = substream(cfg.seed, &[tag::BOOTSTRAP, t as u64]);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut grower = Grower {
                x: data.features(),
                y: data.targets(),
                max_depth: cfg.max_depth,
                min_leaf: cfg.min_leaf,
                features_per_split,
                rng: substream(cfg.seed, &[tag::FEATURE_SUBSET, t as u64]),
                nodes: Vec::new(),
            };
            grower.grow(&mut samples, 0);
            DecisionTree { nodes: grower.nodes }
        })
        .collect();

    Ok(RandomForestModel {
        trees,
        features_per_split,
        trained_with_bootstrap: cfg.bootstrap,
        n_features: d,
    })
}

/// Mean decrease in Gini impurity. Each split is credited
/// `(n_node / n_root) * (impurity - weighted child impurity)`; credits are summed
/// per feature, averaged over trees and normalized to sum to 1.
pub fn gini_importance(model: &RandomForestModel, feature_names: &[String]) -> ImportanceResult {
    let d = model.n_features;
    let mut totals = vec![0.0; d];
    for tree in &model.trees {
        let n_root = tree.nodes[0].n_train as f64;
        for node in &tree.nodes {
            if let NodeKind::Split {
                feature, left, right, ..
            } = node.kind
            {
                let (l, r) = (&tree.nodes[left], &tree.nodes[right]);
                let n_node = node.n_train as f64;
                let child = (l.n_train as f64 * l.impurity + r.n_train as f64 * r.impurity) / n_node;
                totals[feature] += n_node / n_root * (node.impurity - child);
            }
        }
    }
    let k = model.trees.len() as f64;
    let mut scores: Vec<f64> = totals.iter().map(|t| t / k).collect();
    let sum: f64 = scores.iter().sum();
    if sum > 0.0 {
        scores.iter_mut().for_each(|s| *s /= sum);
    }
    ImportanceResult::from_rounds("gini", feature_names.to_vec(), vec![scores], Mode::ModelSpecific)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("x{j}")).collect()
    }

    fn leaf(p: f64) -> TreeNode {
        TreeNode {
            kind: NodeKind::Leaf,
            positive_fraction: p,
            n_train: 1,
            impurity: 0.0,
        }
    }

    #[test]
    fn separable_stump() {
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]];
        let d = Dataset::from_parts(x.clone(), vec![0, 0, 0, 1, 1, 1]).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            bootstrap: false,
            ..Default::default()
        };
        let f = train_random_forest(&d, &cfg).unwrap();
        let tree = &f.trees[0];
        assert_eq!(tree.root_fraction(), d.base_rate());
        let p = f.predict_proba(x.view()).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn depth_zero_rejected() {
        let d = Dataset::from_parts(array![[1.0], [2.0]], vec![0, 1]).unwrap();
        let cfg = ForestConfig {
            max_depth: 0,
            ..Default::default()
        };
        assert!(train_random_forest(&d, &cfg).is_err());
        let cfg = ForestConfig {
            n_trees: 0,
            ..Default::default()
        };
        assert!(train_random_forest(&d, &cfg).is_err());
    }

    #[test]
    fn forest_prediction_is_mean_of_trees() {
        let stump = |v: f64| DecisionTree { nodes: vec![leaf(v)] };
        let f = RandomForestModel {
            trees: vec![stump(0.2), stump(0.6)],
            features_per_split: 1,
            trained_with_bootstrap: false,
            n_features: 1,
        };
        let p = f.predict_proba(array![[0.0]].view()).unwrap();
        assert_abs_diff_eq!(p[0], 0.4, epsilon = 1e-15);
    }

    fn noisy_data(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = substream(seed, &[99]);
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
        let y = (0..n)
            .map(|i| u8::from(rng.random::<f64>() < 0.2 + 0.6 * x[[i, 0]] * x[[i, 1]]))
            .collect();
        Dataset::from_parts(x, y).unwrap()
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let d = noisy_data(1, 300, 4);
        let cfg = ForestConfig {
            n_trees: 50,
            max_depth: 6,
            seed: 42,
            ..Default::default()
        };
        let a = train_random_forest(&d, &cfg).unwrap();
        let b = train_random_forest(&d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.predict_proba(d.features()).unwrap(),
            b.predict_proba(d.features()).unwrap()
        );
    }

    #[test]
    fn leaf_values_match_routed_training_rows() {
        let d = noisy_data(2, 400, 3);
        let cfg = ForestConfig {
            n_trees: 3,
            max_depth: 5,
            bootstrap: false,
            seed: 7,
            ..Default::default()
        };
        let f = train_random_forest(&d, &cfg).unwrap();
        for tree in &f.trees {
            let mut pos = vec![0usize; tree.nodes.len()];
            let mut cnt = vec![0usize; tree.nodes.len()];
            for i in 0..d.n_examples() {
                let leaf = tree.leaf_of(d.row(i));
                cnt[leaf] += 1;
                pos[leaf] += usize::from(d.targets()[i]);
            }
            for (id, node) in tree.nodes.iter().enumerate() {
                if node.kind == NodeKind::Leaf {
                    assert_eq!(cnt[id], node.n_train);
                    assert_eq!(node.positive_fraction, pos[id] as f64 / cnt[id] as f64);
                }
            }
            assert_eq!(tree.root_fraction(), d.base_rate());
        }
    }

    #[test]
    fn gini_single_split_feature() {
        let mut x = Array2::zeros((6, 4));
        for i in 0..6 {
            x[[i, 3]] = i as f64;
            x[[i, 0]] = 1.0;
        }
        let d = Dataset::from_parts(x, vec![0, 0, 0, 1, 1, 1]).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            features_per_split: Some(4),
            bootstrap: false,
            seed: 0,
        };
        let f = train_random_forest(&d, &cfg).unwrap();
        let g = gini_importance(&f, &names(4));
        assert_eq!(g.scores, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gini_hand_accounting() {
        // x0 splits {0,1} | {2..5}; the right side then splits on x1.
        let x = array![
            [1.0, 0.0],
            [2.0, 1.0],
            [3.0, 0.0],
            [4.0, 1.0],
            [5.0, 0.0],
            [6.0, 1.0]
        ];
        let y = vec![0, 0, 1, 1, 0, 1];
        let d = Dataset::from_parts(x, y).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 3,
            min_leaf: 1,
            features_per_split: Some(2),
            bootstrap: false,
            seed: 0,
        };
        let f = train_random_forest(&d, &cfg).unwrap();
        let g = gini_importance(&f, &names(2));
        // Manual accounting, root impurity 0.5.
        // Best root split x0 <= 2.5: left {0,0} (0), right {1,1,0,1} (0.375),
        // weighted 4/6*0.375 = 0.25, credit 0.25.
        // Right node (n=4, imp 0.375): x1 <= 0.5 gives {1,0} (0.5) and {1,1} (0),
        // weighted 0.25; x0 <= 4.5 gives {1,1} | {0,1} also 0.25 -> x0 wins the
        // tie (lowest feature). Credit 4/6 * (0.375 - 0.25) = 1/12.
        // Then {3,4}->{5,6}: node {0,1} at x0 in {5,6}: split x0 <= 5.5 credit
        // 2/6 * 0.5 = 1/6. All credit goes to x0 -> normalized 1.0.
        assert_abs_diff_eq!(g.scores[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.scores[1], 0.0, epsilon = 1e-9);
        let t = &f.trees[0];
        let raw: f64 = t
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { left, right, .. } => {
                    let (l, r) = (&t.nodes[left], &t.nodes[right]);
                    Some(
                        n.n_train as f64 / 6.0
                            * (n.impurity
                                - (l.n_train as f64 * l.impurity + r.n_train as f64 * r.impurity)
                                    / n.n_train as f64),
                    )
                }
                NodeKind::Leaf => None,
            })
            .sum();
        assert_abs_diff_eq!(raw, 0.25 + 1.0 / 12.0 + 1.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn gini_unused_feature_zero_and_normalized() {
        let d = noisy_data(3, 500, 3);
        let cfg = ForestConfig {
            n_trees: 20,
            max_depth: 4,
            seed: 9,
            ..Default::default()
        };
        let f = train_random_forest(&d, &cfg).unwrap();
        let g = gini_importance(&f, &names(3));
        assert_abs_diff_eq!(g.scores.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let used: Vec<bool> = (0..3)
            .map(|j| {
                f.trees.iter().any(|t| {
                    t.nodes
                        .iter()
                        .any(|n| matches!(n.kind, NodeKind::Split { feature, .. } if feature == j))
                })
            })
            .collect();
        for (j, &u) in used.iter().enumerate() {
            if !u {
                assert_eq!(g.scores[j], 0.0);
            }
        }
    }

    #[test]
    fn gini_without_splits_is_zero() {
        let d = Dataset::from_parts(array![[1.0], [2.0], [3.0]], vec![1, 1, 1]).unwrap();
        let f = train_random_forest(
            &d,
            &ForestConfig {
                n_trees: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(gini_importance(&f, &names(1)).scores, vec![0.0]);
    }
}
