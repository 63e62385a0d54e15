//! Elastic-net logistic regression fitted by proximal gradient descent.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ProbabilisticClassifier;
use crate::data::{Dataset, StandardizationParams};
use crate::importance::{ImportanceResult, Mode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegressionModel {
    pub bias: f64,
    pub coefficients: Vec<f64>,
    /// Applied to raw rows before scoring.
    pub standardization: StandardizationParams,
}

#[inline]
pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
#[inline]
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

impl LogisticRegressionModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    /// Linear score on the standardized scale.
    pub fn logit(&self, row: impl IntoIterator<Item = f64>) -> f64 {
        row.into_iter().enumerate().fold(self.bias, |acc, (j, v)| {
            acc + self.coefficients[j] * self.standardization.scale(j, v)
        })
    }
}

impl ProbabilisticClassifier for LogisticRegressionModel {
    fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64> {
        rows.rows()
            .into_iter()
            .map(|r| sigmoid(self.logit(r.iter().copied())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub l1_penalty: f64,
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l1_penalty: 1e-3,
            l2_penalty: 1e-3,
            max_iters: 5000,
            tol: 1e-8,
        }
    }
}

/// Trained model plus the objective value after every iteration.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticRegressionModel,
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn objective(z: ArrayView2<'_, f64>, y: &[f64], bias: f64, beta: &Array1<f64>, cfg: &LogisticConfig) -> f64 {
    let n = y.len() as f64;
    let scores = z.dot(beta);
    let data_loss: f64 = scores
        .iter()
        .zip(y)
        .map(|(s, &t)| softplus(s + bias) - t * (s + bias))
        .sum::<f64>()
        / n;
    data_loss
        + cfg.l1_penalty * beta.iter().map(|b| b.abs()).sum::<f64>()
        + 0.5 * cfg.l2_penalty * beta.dot(beta)
}

/// Upper bound on the largest eigenvalue of `[1 Z]^T [1 Z] / n`: the smaller of
/// the Gershgorin bound and the trace.
fn gram_eigen_bound(z: ArrayView2<'_, f64>) -> f64 {
    let n = z.nrows() as f64;
    let d = z.ncols();
    let mut gram = ndarray::Array2::<f64>::zeros((d + 1, d + 1));
    gram[[0, 0]] = 1.0;
    let col_means: Vec<f64> = z.columns().into_iter().map(|c| c.sum() / n).collect();
    for j in 0..d {
        gram[[0, j + 1]] = col_means[j];
        gram[[j + 1, 0]] = col_means[j];
    }
    let zz = z.t().dot(&z) / n;
    gram.slice_mut(ndarray::s![1.., 1..]).assign(&zz);
    let gershgorin = gram
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let trace = gram.diag().sum();
    gershgorin.min(trace).max(1e-12)
}

/// Minimizes mean log-loss + `l1 * |beta|_1 + l2 / 2 * |beta|_2^2` with ISTA on
/// standardized inputs. The intercept is not penalized.
pub fn fit_logistic(data: &Dataset, cfg: &LogisticConfig) -> Result<LogisticFit> {
    if cfg.l1_penalty < 0.0 || cfg.l2_penalty < 0.0 || cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::InvalidInput("penalties must be >= 0 and tol > 0".into()));
    }
    let standardization = StandardizationParams::fit(data.features());
    let z = standardization.transform(data.features());
    let y: Vec<f64> = data.targets().iter().map(|&t| f64::from(t)).collect();
    let n = y.len() as f64;
    let d = data.n_features();

    let lipschitz = 0.25 * gram_eigen_bound(z.view()) + cfg.l2_penalty;
    let step = 1.0 / lipschitz;

    let mut bias = 0.0;
    let mut beta = Array1::<f64>::zeros(d);
    let mut loss_history = vec![objective(z.view(), &y, bias, &beta, cfg)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let scores = z.dot(&beta);
        let resid: Array1<f64> = scores
            .iter()
            .zip(&y)
            .map(|(s, &t)| sigmoid(s + bias) - t)
            .collect();
        let grad_bias = resid.sum() / n;
        let grad = z.t().dot(&resid) / n + cfg.l2_penalty * &beta;

        let new_bias = bias - step * grad_bias;
        let thresh = step * cfg.l1_penalty;
        let new_beta: Array1<f64> = beta
            .iter()
            .zip(grad.iter())
            .map(|(b, g)| {
                let u = b - step * g;
                u.signum() * (u.abs() - thresh).max(0.0)
            })
            .collect();

        let change = new_beta
            .iter()
            .zip(beta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold((new_bias - bias).abs(), f64::max);
        bias = new_bias;
        beta = new_beta;

        let loss = objective(z.view(), &y, bias, &beta, cfg);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at iteration {iterations}"
            )));
        }
        loss_history.push(loss);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(LogisticFit {
        model: LogisticRegressionModel {
            bias,
            coefficients: beta.to_vec(),
            standardization,
        },
        loss_history,
        iterations,
        converged,
    })
}

pub fn train_logistic(
    data: &Dataset,
    l1_penalty: f64,
    l2_penalty: f64,
    max_iters: usize,
    tol: f64,
) -> Result<LogisticRegressionModel> {
    let cfg = LogisticConfig {
        l1_penalty,
        l2_penalty,
        max_iters,
        tol,
    };
    Ok(fit_logistic(data, &cfg)?.model)
}

/// `|beta_i| * std(x_i)` where `stds` describe the inputs as the model sees them.
pub fn coefficient_relevance(
    model: &LogisticRegressionModel,
    stds: &[f64],
    feature_names: &[String],
) -> Result<ImportanceResult> {
    if stds.len() != model.coefficients.len() || feature_names.len() != stds.len() {
        return Err(Error::InvalidInput("coefficient/std length mismatch".into()));
    }
    let scores: Vec<f64> = model
        .coefficients
        .iter()
        .zip(stds)
        .map(|(b, s)| b.abs() * s)
        .collect();
    Ok(ImportanceResult::from_rounds(
        "coef",
        feature_names.to_vec(),
        vec![scores],
        Mode::Relevance,
    ))
}

impl LogisticRegressionModel {
    /// Std of every input after the model's own standardization: 1, or 0 for
    /// features that were constant in training.
    pub fn standardized_stds(&self) -> Vec<f64> {
        self.standardization
            .stds
            .iter()
            .map(|&s| if s > 0.0 { 1.0 } else { 0.0 })
            .collect()
    }
}
