//! Permutation importance: backward and forward, single- and multi-pass, plus the
//! grouped and grouped-only joint-permutation variants.
//!
//! Every permuted evaluation is addressed by `(round, feature)` for independent
//! column shuffles or by `(round, permuted set)` for joint shuffles, so the
//! numbers never depend on how rounds and candidates are scheduled on threads.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureGroups};
use crate::metrics::{Naupdc, Scorer};
use crate::models::{check_width, ProbabilisticClassifier};
use crate::rng::{set_key, substream, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Backward,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Multi,
    Grouped,
    GroupedOnly,
    ModelSpecific,
    Relevance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupedVariant {
    Grouped,
    GroupedOnly,
}

/// Scores and ranking of features (or feature groups) from one ranking method.
/// Larger scores mean more important.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub method_id: String,
    pub unit_names: Vec<String>,
    /// Mean over rounds of `per_round_scores`.
    pub scores: Vec<f64>,
    pub per_round_scores: Vec<Vec<f64>>,
    /// Unit indices, most important first.
    pub rank: Vec<usize>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Score of the intact model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_score: Option<f64>,
    /// Mean score with every feature permuted (forward and grouped-only methods).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_permuted_score: Option<f64>,
    /// Raw scorer value of each permuted evaluation, rounds x units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_round_permuted: Option<Vec<Vec<f64>>>,
    /// Multipass only: false for units ranked after the greedy search stopped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub individually_selected: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

/// Indices sorted by descending score, ties (and NaNs) by lowest index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        match (sa.is_nan(), sb.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => sb.total_cmp(&sa).then(a.cmp(&b)),
        }
    });
    idx
}

impl ImportanceResult {
    pub fn from_rounds(
        method_id: impl Into<String>,
        unit_names: Vec<String>,
        per_round_scores: Vec<Vec<f64>>,
        mode: Mode,
    ) -> Self {
        let k = unit_names.len();
        let n_rounds = per_round_scores.len().max(1) as f64;
        let scores: Vec<f64> = (0..k)
            .map(|j| per_round_scores.iter().map(|r| r[j]).sum::<f64>() / n_rounds)
            .collect();
        let rank = rank_descending(&scores);
        Self {
            method_id: method_id.into(),
            unit_names,
            scores,
            per_round_scores,
            rank,
            mode,
            direction: None,
            baseline_score: None,
            all_permuted_score: None,
            per_round_permuted: None,
            individually_selected: None,
            std_errors: None,
            converged: None,
        }
    }

    pub fn n_units(&self) -> usize {
        self.unit_names.len()
    }

    /// 0-based rank position of every unit.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.rank.len()];
        for (p, &u) in self.rank.iter().enumerate() {
            pos[u] = p;
        }
        pos
    }

    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.rank[..k.min(self.rank.len())]
    }

    /// Names of the top `k` units, in rank order.
    pub fn top_k_names(&self, k: usize) -> Vec<&str> {
        self.top_k(k)
            .iter()
            .map(|&u| self.unit_names[u].as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_rounds: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            n_rounds: 30,
            top_k: 10,
            seed: 0,
        }
    }
}

/// Columns to shuffle for one evaluation.
#[derive(Debug, Clone, Copy)]
enum Shuffle<'a> {
    /// Each feature gets its own `(round, feature)` shuffle.
    Independent(&'a [usize]),
    /// One shared row shuffle for the whole (sorted) set.
    Joint(&'a [usize]),
}

struct Evaluator<'a, M: ?Sized, S> {
    model: &'a M,
    data: &'a Dataset,
    scorer: &'a S,
    seed: u64,
    /// `[round][feature]` row permutations for independent shuffles.
    column_perms: Vec<Vec<Vec<usize>>>,
}

fn row_permutation(seed: u64, path: &[u64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, path));
    idx
}

impl<'a, M, S> Evaluator<'a, M, S>
where
    M: ProbabilisticClassifier + ?Sized,
    S: Scorer,
{
    fn new(
        model: &'a M,
        data: &'a Dataset,
        scorer: &'a S,
        seed: u64,
        n_rounds: usize,
        independent: bool,
    ) -> Self {
        let n = data.n_examples();
        let d = data.n_features();
        let column_perms = if independent {
            (0..n_rounds)
                .into_par_iter()
                .map(|r| {
                    (0..d)
                        .map(|j| row_permutation(seed, &[tag::PERMUTE, r as u64, j as u64], n))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            model,
            data,
            scorer,
            seed,
            column_perms,
        }
    }

    fn score_matrix(&self, x: &Array2<f64>) -> Result<f64> {
        let probs = self.model.predict_rows(x.view());
        self.scorer.score(&probs, self.data.targets())
    }

    fn baseline(&self) -> Result<f64> {
        let probs = self.model.predict_rows(self.data.features());
        self.scorer.score(&probs, self.data.targets())
    }

    fn permuted(&self, round: usize, shuffle: Shuffle<'_>) -> Array2<f64> {
        let src = self.data.features();
        let mut x = src.to_owned();
        match shuffle {
            Shuffle::Independent(cols) => {
                for &j in cols {
                    let perm = &self.column_perms[round][j];
                    for (i, &p) in perm.iter().enumerate() {
                        x[[i, j]] = src[[p, j]];
                    }
                }
            }
            Shuffle::Joint(cols) => {
                if !cols.is_empty() {
                    let perm = row_permutation(
                        self.seed,
                        &[tag::JOINT_PERMUTE, round as u64, set_key(cols)],
                        src.nrows(),
                    );
                    for (i, &p) in perm.iter().enumerate() {
                        for &j in cols {
                            x[[i, j]] = src[[p, j]];
                        }
                    }
                }
            }
        }
        x
    }

    fn eval(&self, round: usize, shuffle: Shuffle<'_>) -> Result<f64> {
        self.score_matrix(&self.permuted(round, shuffle))
    }

    /// Scores `[round][unit]` for one permuted set per unit.
    fn eval_grid<F>(&self, n_rounds: usize, n_units: usize, shuffle_of: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(usize) -> (Vec<usize>, bool) + Sync,
    {
        let flat: Vec<f64> = (0..n_rounds * n_units)
            .into_par_iter()
            .map(|t| {
                let (r, u) = (t / n_units, t % n_units);
                let (cols, joint) = shuffle_of(u);
                let s = if joint {
                    Shuffle::Joint(&cols)
                } else {
                    Shuffle::Independent(&cols)
                };
                self.eval(r, s)
            })
            .collect::<Result<_>>()?;
        Ok(flat.chunks(n_units.max(1)).map(<[f64]>::to_vec).collect())
    }
}

/// Permutation importance scored with NAUPDC.
pub fn permutation_importance<M>(
    model: &M,
    data: &Dataset,
    direction: Direction,
    pass: Pass,
    cfg: &PermutationConfig,
) -> Result<ImportanceResult>
where
    M: ProbabilisticClassifier + ?Sized,
{
    permutation_importance_with(model, data, direction, pass, cfg, &Naupdc)
}

pub fn permutation_importance_with<M, S>(
    model: &M,
    data: &Dataset,
    direction: Direction,
    pass: Pass,
    cfg: &PermutationConfig,
    scorer: &S,
) -> Result<ImportanceResult>
where
    M: ProbabilisticClassifier + ?Sized,
    S: Scorer,
{
    check_width(model.n_features(), data.n_features())?;
    if cfg.n_rounds < 1 {
        return Err(Error::InvalidInput("n_rounds must be >= 1".into()));
    }
    let d = data.n_features();
    let rounds = cfg.n_rounds;
    let ev = Evaluator::new(model, data, scorer, cfg.seed, rounds, true);
    let baseline = ev.baseline()?;
    let all: Vec<usize> = (0..d).collect();
    let all_permuted: Option<Vec<f64>> = match direction {
        Direction::Forward => Some(
            (0..rounds)
                .into_par_iter()
                .map(|r| ev.eval(r, Shuffle::Independent(&all)))
                .collect::<Result<_>>()?,
        ),
        Direction::Backward => None,
    };
    let reference = |r: usize| all_permuted.as_ref().map_or(0.0, |a| a[r]);
    // backward: loss relative to the intact model; forward: gain over all-permuted
    let to_score = |r: usize, raw: f64| match direction {
        Direction::Backward => baseline - raw,
        Direction::Forward => raw - reference(r),
    };

    let method_id = match (direction, pass) {
        (Direction::Backward, Pass::Single) => "bsp",
        (Direction::Forward, Pass::Single) => "fsp",
        (Direction::Backward, Pass::Multi) => "bmp",
        (Direction::Forward, Pass::Multi) => "fmp",
    };

    let mut result = match pass {
        Pass::Single => {
            let raw = ev.eval_grid(rounds, d, |j| match direction {
                Direction::Backward => (vec![j], false),
                Direction::Forward => (all.iter().copied().filter(|&k| k != j).collect(), false),
            })?;
            let per_round: Vec<Vec<f64>> = raw
                .iter()
                .enumerate()
                .map(|(r, row)| row.iter().map(|&v| to_score(r, v)).collect())
                .collect();
            let mut res = ImportanceResult::from_rounds(
                method_id,
                data.feature_names().to_vec(),
                per_round,
                Mode::Single,
            );
            res.per_round_permuted = Some(raw);
            res
        }
        Pass::Multi => {
            let top_k = cfg.top_k.clamp(1, d.max(1)).min(d);
            let mut fixed: Vec<usize> = Vec::new();
            let mut remaining: Vec<usize> = all.clone();
            let mut per_round = vec![vec![0.0; d]; rounds];
            let mut raw_out = vec![vec![0.0; d]; rounds];
            let mut last_scores: Vec<f64> = vec![f64::NAN; d];
            for _ in 0..top_k {
                let cands = remaining.clone();
                let raw = ev.eval_grid(rounds, cands.len(), |c| {
                    let cand = cands[c];
                    let cols: Vec<usize> = match direction {
                        Direction::Backward => {
                            let mut s = fixed.clone();
                            s.push(cand);
                            s.sort_unstable();
                            s
                        }
                        Direction::Forward => all
                            .iter()
                            .copied()
                            .filter(|&k| k != cand && !fixed.contains(&k))
                            .collect(),
                    };
                    (cols, false)
                })?;
                let means: Vec<f64> = (0..cands.len())
                    .map(|c| (0..rounds).map(|r| to_score(r, raw[r][c])).sum::<f64>() / rounds as f64)
                    .collect();
                for (c, &u) in cands.iter().enumerate() {
                    last_scores[u] = means[c];
                    for r in 0..rounds {
                        per_round[r][u] = to_score(r, raw[r][c]);
                        raw_out[r][u] = raw[r][c];
                    }
                }
                let winner = cands[rank_descending(&means)[0]];
                fixed.push(winner);
                remaining.retain(|&u| u != winner);
            }
            let mut rank = fixed.clone();
            let leftover: Vec<f64> = remaining.iter().map(|&u| last_scores[u]).collect();
            rank.extend(rank_descending(&leftover).into_iter().map(|i| remaining[i]));
            let mut res = ImportanceResult::from_rounds(
                method_id,
                data.feature_names().to_vec(),
                per_round,
                Mode::Multi,
            );
            res.rank = rank;
            res.individually_selected = Some((0..d).map(|u| fixed.contains(&u)).collect());
            res.per_round_permuted = Some(raw_out);
            res
        }
    };
    result.direction = Some(direction);
    result.baseline_score = Some(baseline);
    result.all_permuted_score = all_permuted.map(|a| a.iter().sum::<f64>() / rounds as f64);
    Ok(result)
}

/// Grouped (remove the group) or grouped-only (keep only the group) importance
/// with one shared row shuffle per permuted set.
pub fn grouped_permutation_importance<M>(
    model: &M,
    data: &Dataset,
    groups: &FeatureGroups,
    variant: GroupedVariant,
    n_rounds: usize,
    seed: u64,
) -> Result<ImportanceResult>
where
    M: ProbabilisticClassifier + ?Sized,
{
    grouped_permutation_importance_with(model, data, groups, variant, n_rounds, seed, &Naupdc)
}

pub fn grouped_permutation_importance_with<M, S>(
    model: &M,
    data: &Dataset,
    groups: &FeatureGroups,
    variant: GroupedVariant,
    n_rounds: usize,
    seed: u64,
    scorer: &S,
) -> Result<ImportanceResult>
where
    M: ProbabilisticClassifier + ?Sized,
    S: Scorer,
{
    check_width(model.n_features(), data.n_features())?;
    if n_rounds < 1 {
        return Err(Error::InvalidInput("n_rounds must be >= 1".into()));
    }
    let d = data.n_features();
    if let Some(bad) = groups
        .groups()
        .iter()
        .flat_map(|g| g.members.iter())
        .find(|&&j| j >= d)
    {
        return Err(Error::InvalidInput(format!("invalid group index {bad}")));
    }
    let ev = Evaluator::new(model, data, scorer, seed, n_rounds, false);
    let baseline = ev.baseline()?;
    let all: Vec<usize> = (0..d).collect();
    let sets: Vec<Vec<usize>> = groups
        .groups()
        .iter()
        .map(|g| match variant {
            GroupedVariant::Grouped => g.members.clone(),
            GroupedVariant::GroupedOnly => all.iter().copied().filter(|j| !g.members.contains(j)).collect(),
        })
        .collect();
    let raw = ev.eval_grid(n_rounds, sets.len(), |u| (sets[u].clone(), true))?;
    let all_permuted: Option<Vec<f64>> = match variant {
        GroupedVariant::Grouped => None,
        GroupedVariant::GroupedOnly => Some(
            (0..n_rounds)
                .into_par_iter()
                .map(|r| ev.eval(r, Shuffle::Joint(&all)))
                .collect::<Result<_>>()?,
        ),
    };
    let per_round: Vec<Vec<f64>> = raw
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .map(|&v| match &all_permuted {
                    None => baseline - v,
                    Some(a) => v - a[r],
                })
                .collect()
        })
        .collect();
    let (method_id, mode) = match variant {
        GroupedVariant::Grouped => ("grouped", Mode::Grouped),
        GroupedVariant::GroupedOnly => ("grouped_only", Mode::GroupedOnly),
    };
    let names = groups.groups().iter().map(|g| g.name.clone()).collect();
    let mut res = ImportanceResult::from_rounds(method_id, names, per_round, mode);
    res.direction = Some(match variant {
        GroupedVariant::Grouped => Direction::Backward,
        GroupedVariant::GroupedOnly => Direction::Forward,
    });
    res.baseline_score = Some(baseline);
    res.all_permuted_score = all_permuted.map(|a| a.iter().sum::<f64>() / n_rounds as f64);
    res.per_round_permuted = Some(raw);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{correlation_matrix, FeatureGroup, StandardizationParams};
    use crate::models::LogisticRegressionModel;
    use crate::synth::{logistic_dataset, LogisticSpec};

    fn logistic(coefs: &[f64]) -> LogisticRegressionModel {
        LogisticRegressionModel {
            bias: -0.5,
            coefficients: coefs.to_vec(),
            standardization: StandardizationParams::identity(coefs.len()),
        }
    }

    fn sample(coefs: &[f64], n: usize, seed: u64) -> (LogisticRegressionModel, Dataset) {
        let m = logistic(coefs);
        let spec = LogisticSpec {
            n,
            bias: m.bias,
            coefficients: coefs.to_vec(),
            correlation: None,
        };
        (m, logistic_dataset(&spec, seed))
    }

    #[test]
    fn rank_ties_by_lowest_index() {
        assert_eq!(
            rank_descending(&[1.0, 3.0, 3.0, f64::NAN, 0.5]),
            vec![1, 2, 0, 4, 3]
        );
    }

    #[test]
    fn noise_feature_scores_zero() {
        let (m, d) = sample(&[1.5, 0.0, -1.0], 2000, 1);
        let cfg = PermutationConfig {
            n_rounds: 5,
            top_k: 3,
            seed: 3,
        };
        let r = permutation_importance(&m, &d, Direction::Backward, Pass::Single, &cfg).unwrap();
        for round in &r.per_round_scores {
            assert!(round[1].abs() < 1e-12);
        }
        assert_eq!(r.scores[1], 0.0);
        assert!(r.scores[0] > 0.0 && r.scores[2] > 0.0);
        assert_eq!(r.rank, vec![0, 2, 1]);
    }

    #[test]
    fn multipass_first_step_is_single_pass() {
        let (m, d) = sample(&[0.7, 1.3, -0.9, 0.2], 1500, 2);
        let cfg = PermutationConfig {
            n_rounds: 4,
            top_k: 2,
            seed: 11,
        };
        for dir in [Direction::Backward, Direction::Forward] {
            let single = permutation_importance(&m, &d, dir, Pass::Single, &cfg).unwrap();
            let multi = permutation_importance(&m, &d, dir, Pass::Multi, &cfg).unwrap();
            assert_eq!(single.rank[0], multi.rank[0]);
            let top = multi.rank[0];
            assert_eq!(single.scores[top], multi.scores[top]);
            let sel = multi.individually_selected.as_ref().unwrap();
            assert_eq!(sel.iter().filter(|&&s| s).count(), 2);
            let mut sorted = multi.rank.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn top_k_clamped_and_rounds_checked() {
        let (m, d) = sample(&[0.7, 1.3], 300, 4);
        let cfg = PermutationConfig {
            n_rounds: 2,
            top_k: 10,
            seed: 1,
        };
        let r = permutation_importance(&m, &d, Direction::Backward, Pass::Multi, &cfg).unwrap();
        assert_eq!(r.individually_selected, Some(vec![true, true]));
        let bad = PermutationConfig { n_rounds: 0, ..cfg };
        assert!(permutation_importance(&m, &d, Direction::Backward, Pass::Single, &bad).is_err());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (m, d) = sample(&[0.7, 1.3, -0.4], 800, 5);
        let cfg = PermutationConfig {
            n_rounds: 6,
            top_k: 3,
            seed: 21,
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| permutation_importance(&m, &d, Direction::Forward, Pass::Multi, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn joint_shuffle_preserves_within_set_correlation() {
        let spec = LogisticSpec {
            n: 500,
            bias: 0.0,
            coefficients: vec![1.0, 1.0, 1.0],
            correlation: Some(0.8),
        };
        let d = logistic_dataset(&spec, 9);
        let m = logistic(&[1.0, 1.0, 1.0]);
        let ev = Evaluator::new(&m, &d, &Naupdc, 4, 1, false);
        let x = ev.permuted(0, Shuffle::Joint(&[0, 1]));
        let before = correlation_matrix(&d);
        let after = correlation_matrix(&d.with_features(x).unwrap());
        assert!((before[[0, 1]] - after[[0, 1]]).abs() < 1e-12);
        assert!((before[[0, 2]] - after[[0, 2]]).abs() > 1e-3);
    }

    #[test]
    fn grouped_noise_group_near_zero_and_duality() {
        let (m, d) = sample(&[1.5, -1.0, 0.0, 0.0], 2000, 6);
        let groups = FeatureGroups::new(
            vec![
                FeatureGroup {
                    name: "signal".into(),
                    members: vec![0, 1],
                },
                FeatureGroup {
                    name: "noise".into(),
                    members: vec![2, 3],
                },
            ],
            4,
        )
        .unwrap();
        let g = grouped_permutation_importance(&m, &d, &groups, GroupedVariant::Grouped, 5, 8).unwrap();
        assert_eq!(g.scores[1], 0.0);
        assert!(g.scores[0] > 0.1);
        let go = grouped_permutation_importance(&m, &d, &groups, GroupedVariant::GroupedOnly, 5, 8).unwrap();
        let raw_g = g.per_round_permuted.as_ref().unwrap();
        let raw_go = go.per_round_permuted.as_ref().unwrap();
        for r in 0..5 {
            assert_eq!(raw_g[r][0], raw_go[r][1]);
            assert_eq!(raw_g[r][1], raw_go[r][0]);
        }
        assert_eq!(g.rank, go.rank);
    }

    #[test]
    fn invalid_group_index() {
        let (m, d) = sample(&[1.0, 1.0], 100, 1);
        let groups = FeatureGroups::new(
            vec![FeatureGroup {
                name: "g".into(),
                members: vec![4],
            }],
            5,
        )
        .unwrap();
        assert!(grouped_permutation_importance(&m, &d, &groups, GroupedVariant::Grouped, 2, 0).is_err());
    }
}
