//! One-dimensional vibration samples and their two-dimensional encodings.
//!
//! A length-`m·n` signal is reshaped row-major into the raw signal matrix
//! (RSM) `X` of shape `m × n`, so column `j` holds every `n`-th sample
//! starting at offset `j`: the `j`-th state vector of the delay embedding.
//! The embedding Gramian representation (EGR) is `G = XᵀX`, the `n × n`
//! matrix of inner products between all pairs of state vectors.
//!
//! Indices in this crate are 0-based throughout: entry `(i, j)` of the RSM
//! holds sample `i·n + j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single vibration sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate_hz: f64,
    label: Option<usize>,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("signal has no samples"));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        check_finite(&samples)?;
        Ok(Signal {
            samples,
            sample_rate_hz,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of squared samples.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    /// Same metadata, new sample values. Values must be finite.
    fn map_samples(&self, samples: Vec<f64>) -> Result<Self> {
        check_finite(&samples)?;
        Ok(Signal {
            samples,
            sample_rate_hz: self.sample_rate_hz,
            label: self.label,
        })
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn mean_square(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// Embedding dimension `m` (rows) and state-vector count `n` (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsmConfig {
    pub m: usize,
    pub n: usize,
}

impl RsmConfig {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!(
                "RSM dimensions must be positive, got {m}x{n}"
            )));
        }
        Ok(RsmConfig { m, n })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn sample_length(&self) -> usize {
        self.m * self.n
    }

    pub fn is_square(&self) -> bool {
        self.m == self.n
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `vᵀ M v` for a square matrix.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        assert_eq!(self.rows, self.cols);
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| v[i] * self.row(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// Raw signal matrix: `m × n`, entry `(i, j)` is sample `i·n + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rsm(Matrix);

impl Rsm {
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        check_finite(matrix.as_slice())?;
        Ok(Rsm(matrix))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// State vector `j` (column `j`).
    pub fn state_vector(&self, j: usize) -> Vec<f64> {
        self.0.column(j)
    }
}

/// Embedding Gramian representation: the symmetric PSD `n × n` Gram matrix of an [`Rsm`].
#[derive(Debug, Clone, PartialEq)]
pub struct Egr(Matrix);

impl Egr {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows
    }
}

pub fn build_rsm(signal: &Signal, cfg: RsmConfig) -> Result<Rsm> {
    let expected = cfg.sample_length();
    if signal.len() != expected {
        return Err(Error::Dimension {
            expected: format!("{expected} samples ({}x{})", cfg.m, cfg.n),
            actual: format!("{} samples", signal.len()),
        });
    }
    Ok(Rsm(Matrix {
        rows: cfg.m,
        cols: cfg.n,
        data: signal.samples.clone(),
    }))
}

/// `XᵀX`, accumulated one row of `X` at a time over the upper triangle and
/// mirrored, so the result is exactly symmetric.
pub fn gram(rsm: &Rsm) -> Result<Egr> {
    let x = &rsm.0;
    check_finite(x.as_slice())?;
    let n = x.cols;
    let mut g = vec![0.0; n * n];
    for r in 0..x.rows {
        let row = x.row(r);
        for i in 0..n {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let out = &mut g[i * n + i..(i + 1) * n];
            for (o, b) in out.iter_mut().zip(&row[i..]) {
                *o += a * b;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g[i * n + j] = g[j * n + i];
        }
    }
    Ok(Egr(Matrix {
        rows: n,
        cols: n,
        data: g,
    }))
}

pub fn egr_of_signal(signal: &Signal, cfg: RsmConfig) -> Result<Egr> {
    gram(&build_rsm(signal, cfg)?)
}

/// Mean of each diagonal of an EGR, by lag.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeProfile {
    pub lag_means: Vec<f64>,
}

impl StripeProfile {
    /// Relative tolerance under which two lag means count as tied.
    pub const TIE_TOLERANCE: f64 = 1e-9;

    /// Lag in `1..=max_lag` with the largest mean. Means within
    /// [`Self::TIE_TOLERANCE`] (relative to the largest magnitude in the
    /// profile) of each other are ties, and the smallest lag wins.
    pub fn dominant_lag(&self, max_lag: usize) -> Option<usize> {
        let max_lag = max_lag.min(self.lag_means.len().saturating_sub(1));
        if max_lag == 0 {
            return None;
        }
        let scale = self
            .lag_means
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let tol = Self::TIE_TOLERANCE * scale;
        let best = self.lag_means[1..=max_lag]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (1..=max_lag).find(|&k| self.lag_means[k] >= best - tol)
    }
}

pub fn stripe_profile(egr: &Egr) -> StripeProfile {
    let g = &egr.0;
    let n = g.rows;
    let lag_means = (0..n)
        .map(|k| {
            let sum: f64 = (0..n - k).map(|i| g.get(i, i + k)).sum();
            sum / (n - k) as f64
        })
        .collect();
    StripeProfile { lag_means }
}

/// Divisor applied after mean removal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the population variance.
    #[default]
    Variance,
    /// Divide by the population standard deviation.
    StdDev,
}

/// Subtract the mean and divide by the population variance.
pub fn normalize_sample(signal: &Signal) -> Result<Signal> {
    normalize_sample_with(signal, Normalization::Variance)
}

pub fn normalize_sample_with(signal: &Signal, scaling: Normalization) -> Result<Signal> {
    let x = signal.samples();
    if x.len() < 2 {
        return Err(Error::Degenerate(
            "normalization needs at least two samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Degenerate(format!(
            "zero variance (constant signal at {mean})"
        )));
    }
    let div = match scaling {
        Normalization::Variance => var,
        Normalization::StdDev => var.sqrt(),
    };
    signal.map_samples(x.iter().map(|v| (v - mean) / div).collect())
}

/// Target SNR and the seed of the noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn new(snr_db: f64, rng_seed: u64) -> Self {
        NoiseSpec { snr_db, rng_seed }
    }

    /// Noise power that yields `snr_db` against a signal of power `signal_power`.
    pub fn noise_power_for(&self, signal_power: f64) -> f64 {
        signal_power / 10f64.powf(self.snr_db / 10.0)
    }
}

/// Standard normal deviates by the Box–Muller transform over a ChaCha8 stream.
///
/// Each pair of uniforms `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)` gives
/// `√(−2 ln u1)·cos(2πu2)` followed by `√(−2 ln u1)·sin(2πu2)`.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_value(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_value();
        }
    }
}

/// Add white Gaussian noise at `spec.snr_db` relative to the signal's own power.
///
/// The drawn noise is rescaled so its realized mean square equals the target
/// noise power, so the realized SNR of the output matches `snr_db` per sample.
pub fn add_noise_snr(signal: &Signal, spec: NoiseSpec) -> Result<Signal> {
    let p_signal = signal.power();
    if p_signal <= 0.0 {
        return Err(Error::Degenerate(
            "signal has zero power; SNR is undefined".into(),
        ));
    }
    let target = spec.noise_power_for(p_signal);
    let mut noise = vec![0.0; signal.len()];
    GaussianStream::new(spec.rng_seed).fill(&mut noise);
    let drawn = mean_square(&noise);
    let scale = if drawn > 0.0 {
        (target / drawn).sqrt()
    } else {
        0.0
    };
    let samples = signal
        .samples()
        .iter()
        .zip(&noise)
        .map(|(x, w)| x + scale * w)
        .collect();
    signal.map_samples(samples)
}

/// Square RSM dimensions for a sample length that is a perfect square.
pub fn suggest_dims(sample_length: usize) -> Result<RsmConfig> {
    let root = (sample_length as f64).sqrt().round() as usize;
    if sample_length == 0 || root * root != sample_length {
        return Err(Error::invalid(format!(
            "sample length {sample_length} is not a perfect square; truncate or pad \
             explicitly (e.g. {} or {})",
            root.saturating_sub(1).pow(2).max(1),
            (root + 1).pow(2)
        )));
    }
    RsmConfig::square(root)
}
