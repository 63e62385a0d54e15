//! Config-driven end-to-end run: train or load a model, compute the requested
//! explanations, measure their agreement, and write plot-ready artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributions::{
    background_rows, binned_effect, exact_shapley, explain_rows, global_relevance, lime_explain, owen_values,
    sage_values, sample_rows, tree_interpreter, AttributionSet, LimeConfig, PartitionTree,
    QuartileDiscretizer, SageConfig,
};
use crate::data::{
    cluster_features, complete_linkage, correlation_matrix, load_csv, quantile_bins, BinGrid, Dataset,
};
use crate::disagreement::{
    effect_agreement_matrix, ranking_agreement_matrix, AgreementMatrix, Category, CurveSet, Statistic,
};
use crate::effects::{
    ale_first_order, ale_variance_ranking, event_rate_histogram, method_average_effect, partial_dependence,
    EffectCurve, EventRateConfig, EventRateCurve,
};
use crate::importance::{
    grouped_permutation_importance, permutation_importance, Direction, GroupedVariant, ImportanceResult,
    Pass, PermutationConfig,
};
use crate::models::{
    coefficient_relevance, fit_logistic, gini_importance, train_random_forest, ForestConfig, LogisticConfig,
    Model, ModelDocument,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Coef,
    Gini,
    Bsp,
    Fsp,
    Bmp,
    Fmp,
    Grouped,
    GroupedOnly,
    Pd,
    Ale,
    AleVar,
    Shap,
    Owen,
    Lime,
    Ti,
    Sage,
    EventRate,
}

impl MethodId {
    pub const ALL: [MethodId; 17] = [
        MethodId::Coef,
        MethodId::Gini,
        MethodId::Bsp,
        MethodId::Fsp,
        MethodId::Bmp,
        MethodId::Fmp,
        MethodId::Grouped,
        MethodId::GroupedOnly,
        MethodId::Pd,
        MethodId::Ale,
        MethodId::AleVar,
        MethodId::Shap,
        MethodId::Owen,
        MethodId::Lime,
        MethodId::Ti,
        MethodId::Sage,
        MethodId::EventRate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Coef => "coef",
            MethodId::Gini => "gini",
            MethodId::Bsp => "bsp",
            MethodId::Fsp => "fsp",
            MethodId::Bmp => "bmp",
            MethodId::Fmp => "fmp",
            MethodId::Grouped => "grouped",
            MethodId::GroupedOnly => "grouped_only",
            MethodId::Pd => "pd",
            MethodId::Ale => "ale",
            MethodId::AleVar => "ale_var",
            MethodId::Shap => "shap",
            MethodId::Owen => "owen",
            MethodId::Lime => "lime",
            MethodId::Ti => "ti",
            MethodId::Sage => "sage",
            MethodId::EventRate => "event_rate",
        }
    }

    /// Performance-based rankings are importance; everything else that ranks
    /// is relevance.
    pub fn category(self) -> Category {
        match self {
            MethodId::Gini
            | MethodId::Bsp
            | MethodId::Fsp
            | MethodId::Bmp
            | MethodId::Fmp
            | MethodId::Grouped
            | MethodId::GroupedOnly
            | MethodId::Sage => Category::Importance,
            _ => Category::Relevance,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSettings {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestSettings {
    fn default() -> Self {
        let c = ForestConfig::default();
        Self {
            n_trees: c.n_trees,
            max_depth: c.max_depth,
            min_leaf: c.min_leaf,
            features_per_split: c.features_per_split,
            bootstrap: c.bootstrap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Logistic {
        #[serde(default)]
        params: LogisticConfig,
    },
    RandomForest {
        #[serde(default)]
        params: ForestSettings,
    },
    /// A model document written by `train`.
    Saved { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainOn {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SageSettings {
    pub n_outer_samples: usize,
    pub batch: usize,
    pub check_every: usize,
}

impl Default for SageSettings {
    fn default() -> Self {
        let c = SageConfig::default();
        Self {
            n_outer_samples: c.n_outer_samples,
            batch: c.batch,
            check_every: c.check_every,
        }
    }
}

fn default_n_rounds() -> usize {
    30
}
fn default_top_k() -> usize {
    10
}
fn default_n_bins() -> usize {
    30
}
fn default_sample_cap() -> usize {
    50_000
}
fn default_correlation_threshold() -> f64 {
    0.5
}
fn default_background_size() -> usize {
    100
}
fn default_lime_samples() -> usize {
    2500
}
fn default_rank_tolerance() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub explain_on: ExplainOn,
    pub model: ModelSpec,
    pub methods: Vec<MethodId>,
    pub seed: u64,
    #[serde(default = "default_n_rounds")]
    pub n_rounds: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    #[serde(default = "default_correlation_threshold")]
    pub correlation_threshold: f64,
    #[serde(default = "default_background_size")]
    pub background_size: usize,
    #[serde(default = "default_lime_samples")]
    pub lime_samples: usize,
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: usize,
    #[serde(default)]
    pub sage: SageSettings,
    #[serde(default)]
    pub event_rate: EventRateConfig,
    /// Where artifacts go. Not echoed in reports.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    /// Thread count; results do not depend on it. Not echoed in reports.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.path);
        if let Some(e) = &mut cfg.eval_dataset {
            resolve(&mut e.path);
        }
        if let ModelSpec::Saved { path } = &mut cfg.model {
            resolve(path);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_rounds < 1 {
            return bad("n_rounds must be >= 1");
        }
        if self.top_k < 1 {
            return bad("top_k must be >= 1");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be >= 2");
        }
        if self.sample_cap < 1 || self.background_size < 1 || self.lime_samples < 2 {
            return bad("sample_cap and background_size must be >= 1, lime_samples >= 2");
        }
        if !(0.0..=1.0).contains(&self.correlation_threshold) {
            return bad("correlation_threshold must lie in [0, 1]");
        }
        if self.explain_on == ExplainOn::Eval && self.eval_dataset.is_none() {
            return bad("explain_on = eval needs eval_dataset");
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1");
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedMethod {
    pub method: MethodId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageEffect {
    pub feature_index: usize,
    pub methods: Vec<String>,
    pub mean: EffectCurve,
    pub spread: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub model_kind: String,
    pub feature_names: Vec<String>,
    pub n_examples: usize,
    pub base_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: RunManifest,
    #[serde(default)]
    pub rankings: Vec<ImportanceResult>,
    #[serde(default)]
    pub effects: Vec<EffectCurve>,
    #[serde(default)]
    pub average_effects: Vec<AverageEffect>,
    #[serde(default)]
    pub attributions: Vec<AttributionSet>,
    #[serde(default)]
    pub agreement: Vec<AgreementMatrix>,
    #[serde(default)]
    pub event_rate: Vec<EventRateCurve>,
    /// Shared per-feature grids used by effect curves and effect agreement.
    #[serde(default)]
    pub grids: BTreeMap<usize, BinGrid>,
    #[serde(default)]
    pub skipped: Vec<SkippedMethod>,
    /// Wall-clock seconds per stage; written to `timings.json`, never to the
    /// report itself.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    /// Reads a `report.json` written by [`emit_report`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn empty(manifest: RunManifest) -> Self {
        Self {
            manifest,
            rankings: Vec::new(),
            effects: Vec::new(),
            average_effects: Vec::new(),
            attributions: Vec::new(),
            agreement: Vec::new(),
            event_rate: Vec::new(),
            grids: BTreeMap::new(),
            skipped: Vec::new(),
            timings: Vec::new(),
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    load_csv(&spec.path, &spec.target)
}

/// Trains (or loads) the configured model on the training dataset.
pub fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<(ModelDocument, Option<f64>)> {
    let names = data.feature_names().to_vec();
    match &cfg.model {
        ModelSpec::Logistic { params } => {
            let fit = fit_logistic(data, params)?;
            let loss = fit.loss_history.last().copied();
            Ok((ModelDocument::new(Model::Logistic(fit.model), names), loss))
        }
        ModelSpec::RandomForest { params } => {
            let fc = ForestConfig {
                n_trees: params.n_trees,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
                features_per_split: params.features_per_split,
                bootstrap: params.bootstrap,
                seed: cfg.seed,
            };
            Ok((
                ModelDocument::new(Model::RandomForest(train_random_forest(data, &fc)?), names),
                None,
            ))
        }
        ModelSpec::Saved { path } => {
            let doc = ModelDocument::load(path)?;
            if doc.feature_names != names {
                return Err(Error::Config(format!(
                    "saved model features {:?} do not match the dataset",
                    doc.feature_names
                )));
            }
            Ok((doc, None))
        }
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(f)
}

/// Per-method failures that become skip reasons instead of aborting.
fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::TooManyFeatures(_)
            | Error::InvalidInput(_)
            | Error::DegenerateFeature
            | Error::NormalizationUndefined
    )
}

struct Context<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    data: &'a Dataset,
    grids: BTreeMap<usize, BinGrid>,
    sample: Vec<usize>,
}

impl Context<'_> {
    fn names(&self) -> &[String] {
        self.data.feature_names()
    }

    fn perm_cfg(&self) -> PermutationConfig {
        PermutationConfig {
            n_rounds: self.cfg.n_rounds,
            top_k: self.cfg.top_k,
            seed: self.cfg.seed,
        }
    }

    fn ale_curves(&self) -> Result<Vec<EffectCurve>> {
        self.grids
            .iter()
            .map(|(&j, g)| ale_first_order(self.model, self.data, j, g))
            .collect()
    }

    fn binned(&self, set: &AttributionSet) -> Result<Vec<EffectCurve>> {
        self.grids
            .iter()
            .map(|(&j, g)| binned_effect(set, self.data, j, g))
            .collect()
    }
}

#[derive(Default)]
struct Outcome {
    rankings: Vec<ImportanceResult>,
    effects: Vec<EffectCurve>,
    attributions: Vec<AttributionSet>,
    event_rate: Vec<EventRateCurve>,
}

fn model_specific(method: MethodId, needs: &str) -> Error {
    Error::InvalidInput(format!(
        "model-specific method: {method} requires a {needs} model"
    ))
}

fn run_method(ctx: &Context<'_>, method: MethodId) -> Result<Outcome> {
    let mut out = Outcome::default();
    let (model, data, cfg) = (ctx.model, ctx.data, ctx.cfg);
    match method {
        MethodId::Coef => {
            let m = model
                .as_logistic()
                .ok_or_else(|| model_specific(method, "logistic"))?;
            out.rankings
                .push(coefficient_relevance(m, &m.standardized_stds(), ctx.names())?);
        }
        MethodId::Gini => {
            let m = model
                .as_forest()
                .ok_or_else(|| model_specific(method, "random forest"))?;
            out.rankings.push(gini_importance(m, ctx.names()));
        }
        MethodId::Bsp | MethodId::Fsp | MethodId::Bmp | MethodId::Fmp => {
            let (dir, pass) = match method {
                MethodId::Bsp => (Direction::Backward, Pass::Single),
                MethodId::Fsp => (Direction::Forward, Pass::Single),
                MethodId::Bmp => (Direction::Backward, Pass::Multi),
                _ => (Direction::Forward, Pass::Multi),
            };
            out.rankings
                .push(permutation_importance(model, data, dir, pass, &ctx.perm_cfg())?);
        }
        MethodId::Grouped | MethodId::GroupedOnly => {
            let corr = correlation_matrix(data);
            let groups = cluster_features(corr.view(), cfg.correlation_threshold).labelled(ctx.names());
            let variant = if method == MethodId::Grouped {
                GroupedVariant::Grouped
            } else {
                GroupedVariant::GroupedOnly
            };
            out.rankings.push(grouped_permutation_importance(
                model,
                data,
                &groups,
                variant,
                cfg.n_rounds,
                cfg.seed,
            )?);
        }
        MethodId::Pd => {
            for (&j, g) in &ctx.grids {
                out.effects.push(partial_dependence(model, data, j, g)?);
            }
        }
        MethodId::Ale => {
            let curves = ctx.ale_curves()?;
            let mut r = ale_variance_ranking(&curves, ctx.names())?;
            r.method_id = "ale".into();
            out.rankings.push(r);
            out.effects = curves;
        }
        MethodId::AleVar => {
            out.rankings
                .push(ale_variance_ranking(&ctx.ale_curves()?, ctx.names())?);
        }
        MethodId::Shap | MethodId::Owen | MethodId::Lime | MethodId::Ti => {
            let set = match method {
                MethodId::Shap => {
                    let bg = background_rows(data, cfg.background_size, cfg.seed);
                    explain_rows("shap", data, &ctx.sample, |_, x| {
                        exact_shapley(model, x, bg.view())
                    })?
                }
                MethodId::Owen => {
                    let bg = background_rows(data, cfg.background_size, cfg.seed);
                    let corr = correlation_matrix(data);
                    let tree = PartitionTree::from_dendrogram(&complete_linkage(corr.view()))?;
                    explain_rows("owen", data, &ctx.sample, |_, x| {
                        owen_values(model, x, bg.view(), &tree)
                    })?
                }
                MethodId::Lime => {
                    let disc = QuartileDiscretizer::fit(data);
                    let lc = LimeConfig {
                        n_samples: cfg.lime_samples,
                        kernel_width: None,
                        seed: cfg.seed,
                    };
                    explain_rows("lime", data, &ctx.sample, |i, x| {
                        lime_explain(model, x, &disc, &lc, i as u64)
                    })?
                }
                _ => {
                    let m = model
                        .as_forest()
                        .ok_or_else(|| model_specific(method, "random forest"))?;
                    explain_rows("ti", data, &ctx.sample, |_, x| tree_interpreter(m, x))?
                }
            };
            out.rankings.push(global_relevance(&set));
            out.effects = ctx.binned(&set)?;
            out.attributions.push(set);
        }
        MethodId::Sage => {
            let sc = SageConfig {
                n_outer_samples: cfg.sage.n_outer_samples,
                batch: cfg.sage.batch,
                check_every: cfg.sage.check_every,
                seed: cfg.seed,
                ..SageConfig::default()
            };
            out.rankings.push(sage_values(model, data, &sc)?);
        }
        MethodId::EventRate => {
            for &j in ctx.grids.keys() {
                out.event_rate
                    .push(event_rate_histogram(data, j, &cfg.event_rate)?);
            }
        }
    }
    Ok(out)
}

/// Method-average curve per feature over every curve-producing method present.
fn average_effects(effects: &[EffectCurve], grids: &BTreeMap<usize, BinGrid>) -> Result<Vec<AverageEffect>> {
    let mut out = Vec::new();
    for (&j, grid) in grids {
        let curves: Vec<EffectCurve> = effects.iter().filter(|c| c.feature_index == j).cloned().collect();
        if curves.len() < 2 {
            continue;
        }
        let (mean, spread) = method_average_effect(&curves, grid)?;
        out.push(AverageEffect {
            feature_index: j,
            methods: curves.iter().map(|c| c.method_id.clone()).collect(),
            mean,
            spread,
        });
    }
    Ok(out)
}

/// Computes every requested method without the agreement stage.
pub fn run_explanations(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    with_pool(cfg.workers, || {
        let train = load_dataset(&cfg.dataset)?;
        let t0 = Instant::now();
        let (doc, training_loss) = train_model(cfg, &train)?;
        let mut timings = vec![("train".to_string(), t0.elapsed().as_secs_f64())];
        let data = match (cfg.explain_on, &cfg.eval_dataset) {
            (ExplainOn::Eval, Some(spec)) => {
                let eval = load_dataset(spec)?;
                if eval.feature_names() != train.feature_names() {
                    return Err(Error::Config("eval dataset columns differ from training".into()));
                }
                eval
            }
            _ => train,
        };
        let grids: BTreeMap<usize, BinGrid> = (0..data.n_features())
            .filter_map(|j| {
                quantile_bins(&data.column(j).to_vec(), cfg.n_bins)
                    .ok()
                    .map(|g| (j, g))
            })
            .collect();
        let ctx = Context {
            cfg,
            model: &doc.model,
            data: &data,
            sample: sample_rows(data.n_examples(), cfg.sample_cap, cfg.seed, 0),
            grids,
        };
        let mut report = RunReport::empty(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            model_kind: doc.model.kind().to_string(),
            feature_names: data.feature_names().to_vec(),
            n_examples: data.n_examples(),
            base_rate: data.base_rate(),
            training_loss,
        });
        for &method in &cfg.methods {
            let t = Instant::now();
            match run_method(&ctx, method) {
                Ok(o) => {
                    report.rankings.extend(o.rankings);
                    report.effects.extend(o.effects);
                    report.attributions.extend(o.attributions);
                    report.event_rate.extend(o.event_rate);
                }
                Err(e) if skippable(&e) => report.skipped.push(SkippedMethod {
                    method,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
            timings.push((method.to_string(), t.elapsed().as_secs_f64()));
        }
        report.average_effects = average_effects(&report.effects, &ctx.grids)?;
        if !report.effects.is_empty() {
            report.grids = ctx.grids;
        }
        report.timings = timings;
        Ok(report)
    })
}

fn category_map(report: &RunReport) -> HashMap<String, Category> {
    let mut map: HashMap<String, Category> = MethodId::ALL
        .iter()
        .map(|m| (m.as_str().to_string(), m.category()))
        .collect();
    for r in &report.rankings {
        map.entry(r.method_id.clone()).or_insert(Category::Relevance);
    }
    map
}

/// Replaces the report's agreement matrices: top-k and rank over every ranking
/// of individual features, effect over every method with curves.
pub fn add_agreement(report: &mut RunReport) -> Result<()> {
    let t = Instant::now();
    let cfg = &report.manifest.config;
    let cats = category_map(report);
    let names = &report.manifest.feature_names;
    let feature_rankings: Vec<ImportanceResult> = report
        .rankings
        .iter()
        .filter(|r| {
            let mut u = r.unit_names.clone();
            u.sort();
            let mut n = names.clone();
            n.sort();
            u == n
        })
        .cloned()
        .collect();
    let mut matrices = Vec::new();
    if feature_rankings.len() >= 2 {
        for stat in [Statistic::TopK, Statistic::Rank] {
            matrices.push(ranking_agreement_matrix(
                &feature_rankings,
                stat,
                cfg.top_k,
                cfg.rank_tolerance,
                &cats,
            )?);
        }
    }
    let mut sets: Vec<(String, CurveSet)> = Vec::new();
    for c in &report.effects {
        match sets.iter_mut().find(|(id, _)| *id == c.method_id) {
            Some((_, set)) => {
                set.insert(c.feature_index, c.clone());
            }
            None => sets.push((
                c.method_id.clone(),
                BTreeMap::from([(c.feature_index, c.clone())]),
            )),
        }
    }
    if sets.len() >= 2 {
        matrices.push(effect_agreement_matrix(&sets, &report.grids, &cats)?);
    }
    report.agreement = matrices;
    report
        .timings
        .push(("agreement".into(), t.elapsed().as_secs_f64()));
    Ok(())
}

/// Full run: explanations followed by agreement.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = run_explanations(cfg)?;
    with_pool(cfg.workers, || add_agreement(&mut report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileManifest {
    pub files: Vec<FileEntry>,
}

struct Writer<'a> {
    root: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn write(&mut self, rel: &str, content: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, content)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(content)),
            bytes: content.len() as u64,
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn csv(&mut self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(rel, &bytes)
    }
}

/// Writes every artifact of `report` under `out_dir` and returns the list of
/// files with their SHA-256, also saved as `manifest.json`.
pub fn emit_report(report: &RunReport, out_dir: impl AsRef<Path>) -> Result<FileManifest> {
    let root = out_dir.as_ref();
    fs::create_dir_all(root)?;
    let mut w = Writer {
        root,
        files: Vec::new(),
    };
    w.json("report.json", report)?;

    if !report.rankings.is_empty() {
        let rows = report.rankings.iter().flat_map(|r| {
            let pos = r.positions();
            (0..r.n_units()).map(move |u| {
                vec![
                    r.method_id.clone(),
                    r.unit_names[u].clone(),
                    r.scores[u].to_string(),
                    (pos[u] + 1).to_string(),
                ]
            })
        });
        w.csv("rankings.csv", &["method", "unit", "score", "rank"], rows)?;
    }
    if !report.effects.is_empty() || !report.average_effects.is_empty() {
        let names = &report.manifest.feature_names;
        let curves = report
            .effects
            .iter()
            .chain(report.average_effects.iter().map(|a| &a.mean));
        let rows = curves.flat_map(|c| {
            c.grid.iter().zip(&c.values).map(move |(x, y)| {
                vec![
                    names[c.feature_index].clone(),
                    c.method_id.clone(),
                    x.to_string(),
                    y.to_string(),
                ]
            })
        });
        w.csv("effects.csv", &["feature", "method", "x", "y"], rows)?;
    }
    for m in &report.agreement {
        let rows = (0..m.method_ids.len()).flat_map(|a| {
            (0..m.method_ids.len()).map(move |b| {
                vec![
                    m.method_ids[a].clone(),
                    m.method_ids[b].clone(),
                    m.values[a][b].to_string(),
                ]
            })
        });
        w.csv(
            &format!("agreement_{}.csv", m.statistic_id.id()),
            &["row", "col", "value"],
            rows,
        )?;
    }
    if !report.event_rate.is_empty() {
        let names = &report.manifest.feature_names;
        let rows = report.event_rate.iter().flat_map(|h| {
            (0..h.posterior_mean.len()).map(move |k| {
                vec![
                    names[h.feature_index].clone(),
                    h.bin_edges[k].to_string(),
                    h.bin_edges[k + 1].to_string(),
                    (h.positives[k] + h.negatives[k]).to_string(),
                    h.posterior_mean[k].to_string(),
                    h.ci_low[k].to_string(),
                    h.ci_high[k].to_string(),
                ]
            })
        });
        w.csv(
            "event_rate.csv",
            &[
                "feature",
                "lower",
                "upper",
                "count",
                "posterior_mean",
                "ci_low",
                "ci_high",
            ],
            rows,
        )?;
    }
    for set in &report.attributions {
        w.json(&format!("attributions/{}.json", set.method_id), set)?;
        let rows = set.explained_row_indices.iter().enumerate().flat_map(|(r, &i)| {
            set.feature_names.iter().enumerate().map(move |(j, name)| {
                vec![
                    i.to_string(),
                    name.clone(),
                    set.values[r][j].to_string(),
                    set.phi[r][j].to_string(),
                ]
            })
        });
        w.csv(
            &format!("attributions/{}_cards.csv", set.method_id),
            &["row", "feature", "value", "phi"],
            rows,
        )?;
    }
    let timings: BTreeMap<&str, f64> = report.timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    w.json("timings.json", &timings)?;

    let manifest = FileManifest { files: w.files };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(root.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json(methods: &str, model: &str) -> String {
        format!(
            r#"{{"dataset": {{"path": "d.csv", "target": "y"}},
                "model": {model}, "methods": [{methods}], "seed": 5}}"#
        )
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = RunConfig::from_json(&config_json(r#""coef", "bsp""#, r#"{"kind": "logistic"}"#)).unwrap();
        assert_eq!(c.n_rounds, 30);
        assert_eq!(c.top_k, 10);
        assert_eq!(c.n_bins, 30);
        assert_eq!(c.sample_cap, 50_000);
        assert_eq!(c.correlation_threshold, 0.5);
        assert_eq!(c.methods, vec![MethodId::Coef, MethodId::Bsp]);

        let no_seed =
            r#"{"dataset": {"path": "d.csv", "target": "y"}, "model": {"kind": "logistic"}, "methods": []}"#;
        assert!(RunConfig::from_json(no_seed).unwrap_err().is_config());
        let typo =
            config_json(r#""coef""#, r#"{"kind": "logistic"}"#).replace("\"seed\"", "\"sed\": 1, \"seed\"");
        assert!(RunConfig::from_json(&typo).unwrap_err().is_config());
        let unknown = config_json(r#""magic""#, r#"{"kind": "logistic"}"#);
        assert!(RunConfig::from_json(&unknown).unwrap_err().is_config());
        let dup = config_json(r#""pd", "pd""#, r#"{"kind": "logistic"}"#);
        assert!(RunConfig::from_json(&dup).unwrap_err().is_config());
        let forest = config_json(
            r#""ti""#,
            r#"{"kind": "random_forest", "params": {"n_trees": 5, "max_depth": 3}}"#,
        );
        let c = RunConfig::from_json(&forest).unwrap();
        assert!(
            matches!(c.model, ModelSpec::RandomForest { params } if params.n_trees == 5 && params.min_leaf == 5)
        );
        let bad_param = config_json(r#""ti""#, r#"{"kind": "random_forest", "params": {"trees": 5}}"#);
        assert!(RunConfig::from_json(&bad_param).is_err());
    }

    #[test]
    fn method_ids_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }

    #[test]
    fn empty_report_emits_manifest_only() {
        let cfg = RunConfig::from_json(&config_json("", r#"{"kind": "logistic"}"#)).unwrap();
        let report = RunReport::empty(RunManifest {
            tool_version: "0".into(),
            config: cfg,
            model_kind: "logistic".into(),
            feature_names: vec!["a".into()],
            n_examples: 1,
            base_rate: 0.5,
            training_loss: None,
        });
        let dir = tempfile::tempdir().unwrap();
        let m = emit_report(&report, dir.path()).unwrap();
        let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, vec!["report.json", "timings.json"]);
        let back: RunReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
        let again = emit_report(&report, dir.path()).unwrap();
        assert_eq!(again.files[0].sha256, m.files[0].sha256);
    }
}
