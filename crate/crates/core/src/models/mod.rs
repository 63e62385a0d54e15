//! Built-in classifiers behind one black-box prediction interface.

mod forest;
mod logistic;

use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub use forest::{
    gini_importance, train_random_forest, DecisionTree, ForestConfig, NodeKind, RandomForestModel, TreeNode,
};
pub use logistic::{
    coefficient_relevance, fit_logistic, train_logistic, LogisticConfig, LogisticFit, LogisticRegressionModel,
};

use crate::{Error, Result};

/// A trained binary classifier seen as a black box: rows in, `P(y = 1 | x)` out.
///
/// Implementations must be deterministic and callable from many threads at once.
pub trait ProbabilisticClassifier: Sync {
    fn n_features(&self) -> usize;

    /// Probabilities for rows whose width is already known to match.
    fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64>;

    fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let rows = row.insert_axis(ndarray::Axis(0));
        self.predict_rows(rows)[0]
    }

    fn predict_proba(&self, rows: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        check_width(self.n_features(), rows.ncols())?;
        Ok(self.predict_rows(rows))
    }
}

/// Row-chunked parallel prediction; output order matches input order.
pub(crate) fn predict_par<M: ProbabilisticClassifier + ?Sized>(
    model: &M,
    rows: ArrayView2<'_, f64>,
) -> Vec<f64> {
    use rayon::prelude::*;
    const CHUNK: usize = 512;
    if rows.nrows() <= CHUNK {
        return model.predict_rows(rows);
    }
    rows.axis_chunks_iter(ndarray::Axis(0), CHUNK)
        .into_par_iter()
        .flat_map_iter(|c| model.predict_rows(c))
        .collect()
}

pub(crate) fn check_width(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::WidthMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Logistic(LogisticRegressionModel),
    RandomForest(RandomForestModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Logistic(_) => "logistic",
            Model::RandomForest(_) => "random_forest",
        }
    }

    pub fn as_logistic(&self) -> Option<&LogisticRegressionModel> {
        match self {
            Model::Logistic(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_forest(&self) -> Option<&RandomForestModel> {
        match self {
            Model::RandomForest(m) => Some(m),
            _ => None,
        }
    }
}

impl ProbabilisticClassifier for Model {
    fn n_features(&self) -> usize {
        match self {
            Model::Logistic(m) => m.n_features(),
            Model::RandomForest(m) => m.n_features(),
        }
    }

    fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            Model::Logistic(m) => m.predict_rows(rows),
            Model::RandomForest(m) => m.predict_rows(rows),
        }
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Versioned on-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub model: Model,
}

impl ModelDocument {
    pub fn new(model: Model, feature_names: Vec<String>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            feature_names,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let doc: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StandardizationParams;
    use ndarray::array;

    #[test]
    fn model_document_round_trip() {
        let m = Model::Logistic(LogisticRegressionModel {
            bias: 0.3,
            coefficients: vec![1.0, -2.0],
            standardization: StandardizationParams {
                means: vec![0.5, 1.0],
                stds: vec![2.0, 0.0],
            },
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let doc = ModelDocument::new(m, vec!["a".into(), "b".into()]);
        doc.save(&p).unwrap();
        let back = ModelDocument::load(&p).unwrap();
        assert_eq!(back, doc);
        let x = array![[1.0, 3.0], [-1.0, 0.0]];
        assert_eq!(
            back.model.predict_proba(x.view()).unwrap(),
            doc.model.predict_proba(x.view()).unwrap()
        );
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = LogisticRegressionModel {
            bias: 0.0,
            coefficients: vec![0.0; 3],
            standardization: StandardizationParams::identity(3),
        };
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            m.predict_proba(x.view()),
            Err(Error::WidthMismatch { expected: 3, got: 2 })
        ));
    }
}
