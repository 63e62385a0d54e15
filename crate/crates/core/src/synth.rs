//! Seeded synthetic datasets with known structure.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::rng::{substream, tag};
use crate::Result;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gaussian features with an optional common pairwise correlation and labels
/// drawn from `sigmoid(bias + coefficients . x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSpec {
    pub n: usize,
    pub bias: f64,
    pub coefficients: Vec<f64>,
    /// Equicorrelation in `[0, 1)`; `None` means independent features.
    pub correlation: Option<f64>,
}

fn gaussian_features(n: usize, d: usize, rho: f64, seed: u64) -> Array2<f64> {
    let mut rng = substream(seed, &[tag::SYNTH, 0]);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = Array2::zeros((n, d));
    for mut row in x.rows_mut() {
        let common: f64 = rng.sample(StandardNormal);
        for v in row.iter_mut() {
            let own: f64 = rng.sample(StandardNormal);
            *v = a * common + b * own;
        }
    }
    x
}

fn draw_labels(logits: impl Iterator<Item = f64>, seed: u64) -> Vec<u8> {
    let mut rng = substream(seed, &[tag::SYNTH, 1]);
    logits
        .map(|z| u8::from(rng.random::<f64>() < sigmoid(z)))
        .collect()
}

pub fn logistic_dataset(spec: &LogisticSpec, seed: u64) -> Dataset {
    let d = spec.coefficients.len();
    let x = gaussian_features(spec.n, d, spec.correlation.unwrap_or(0.0), seed);
    let y = draw_labels(
        x.rows()
            .into_iter()
            .map(|r| spec.bias + r.iter().zip(&spec.coefficients).map(|(v, b)| v * b).sum::<f64>()),
        seed,
    );
    Dataset::from_parts(x, y).expect("synthetic data is well formed")
}

/// Appends a noisy copy of feature `j` whose correlation with the original is
/// `rho` (in expectation). The copy is named `<name>_copy`.
pub fn append_noisy_copy(data: &Dataset, j: usize, rho: f64, seed: u64) -> Result<Dataset> {
    let col = data.column(j);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut rng = substream(seed, &[tag::SYNTH, 2, j as u64]);
    let noise = (1.0 - rho * rho).sqrt();
    let copy: Vec<f64> = col
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            mean + std * (rho * (v - mean) / std + noise * e)
        })
        .collect();
    let (rows, d) = data.features().dim();
    let mut x = Array2::zeros((rows, d + 1));
    x.slice_mut(ndarray::s![.., ..d]).assign(&data.features());
    for (i, v) in copy.into_iter().enumerate() {
        x[[i, d]] = v;
    }
    let mut names = data.feature_names().to_vec();
    names.push(format!("{}_copy", names[j]));
    Dataset::new(x, names, data.targets().to_vec())
}

/// Ten-feature benchmark: a correlated pair, a quadratic term, an interaction,
/// a step, and four pure-noise columns.
pub fn bundled_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, &[tag::SYNTH, 3]);
    let names = [
        "temp", "dewpoint", "wind", "pressure", "humidity", "cape", "noise_a", "noise_b", "noise_c",
        "noise_d",
    ];
    let mut x = Array2::zeros((n, names.len()));
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = [0.0f64; 10];
        for v in &mut z {
            *v = rng.sample(StandardNormal);
        }
        let temp = z[0];
        let dewpoint = 0.8 * z[0] + 0.6 * z[1];
        let wind = z[2];
        let pressure = z[3];
        let humidity = 0.5 * z[1] + (0.75f64).sqrt() * z[4];
        let cape = z[5].exp();
        let row = [
            temp, dewpoint, wind, pressure, humidity, cape, z[6], z[7], z[8], z[9],
        ];
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
        logits.push(
            -1.0 + 1.2 * temp + 0.8 * dewpoint - 0.6 * wind * wind
                + 0.5 * pressure * humidity
                + if cape > 1.5 { 0.9 } else { 0.0 },
        );
    }
    let y = draw_labels(logits.into_iter(), seed);
    Dataset::new(x, names.iter().map(|s| s.to_string()).collect(), y).expect("synthetic data is well formed")
}
