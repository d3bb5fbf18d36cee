//! Synthetic cohorts with non-linear varying coefficients and a calibrated
//! signal-to-noise ratio.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::Cohort;
use crate::nn::sigmoid;
use crate::rng;
use crate::{Error, Result};

pub const SCALE_BRACKET: (f64, f64) = (1e-4, 1e4);
/// Relative tolerance of the scale search.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// `sin(Z'a) + cos(Z'b) X`
    #[serde(alias = "correct")]
    CorrectModel,
    /// `-X sin(Z'a) + sqrt|cos(Z'b) X|`
    #[serde(alias = "misspec")]
    Misspecified,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "correct" | "correctmodel" => Ok(Self::CorrectModel),
            "misspec" | "misspecified" => Ok(Self::Misspecified),
            other => Err(Error::config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl Scenario {
    /// Unscaled logit for one subject from its signal covariates.
    pub fn signal(self, z: ArrayView1<f64>, pain: f64, alpha: &[f64], beta: &[f64]) -> f64 {
        let za: f64 = z.iter().zip(alpha).map(|(a, b)| a * b).sum();
        let zb: f64 = z.iter().zip(beta).map(|(a, b)| a * b).sum();
        match self {
            Scenario::CorrectModel => za.sin() + zb.cos() * pain,
            Scenario::Misspecified => -pain * za.sin() + (zb.cos() * pain).abs().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_samples: usize,
    pub p_signal: usize,
    #[serde(default)]
    pub p_noise: usize,
    pub snr_target: f64,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    /// Euclidean length of the coefficient vectors.
    #[serde(default = "default_coef_norm")]
    pub coef_norm: f64,
    #[serde(default = "default_calib_size")]
    pub calib_sample_size: usize,
}

fn default_coef_norm() -> f64 {
    2.5
}

fn default_calib_size() -> usize {
    40_000
}

impl SimConfig {
    pub fn new(scenario: Scenario, n_samples: usize, p_signal: usize, snr_target: f64, seed: u64) -> Self {
        Self {
            n_samples,
            p_signal,
            p_noise: 0,
            snr_target,
            scenario,
            seed,
            coef_norm: default_coef_norm(),
            calib_sample_size: default_calib_size(),
        }
    }

    pub fn with_noise(mut self, p_noise: usize) -> Self {
        self.p_noise = p_noise;
        self
    }

    pub fn dim(&self) -> usize {
        self.p_signal + self.p_noise
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 100 {
            return Err(Error::config(format!("n_samples must be at least 100, got {}", self.n_samples)));
        }
        if self.p_signal == 0 {
            return Err(Error::config("p_signal must be positive"));
        }
        if !(self.snr_target > 0.0 && self.snr_target.is_finite()) {
            return Err(Error::config(format!("snr_target must be positive, got {}", self.snr_target)));
        }
        if !(self.coef_norm > 0.0 && self.coef_norm.is_finite()) {
            return Err(Error::config("coef_norm must be positive"));
        }
        if self.calib_sample_size < 2 {
            return Err(Error::config("calibration sample needs at least 2 draws"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub scenario: Scenario,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Logit scale `c`.
    pub scale: f64,
    /// SNR of the generated sample's true probabilities.
    pub achieved_snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub cohort: Cohort,
    pub true_prob: Vec<f64>,
    pub truth: SimTruth,
}

impl SimDataset {
    /// Header `y,x,z1..zp`, one row per subject.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.cohort.dim();
        let mut header = vec!["y".to_string(), "x".to_string()];
        header.extend((1..=p).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        let labels = self.cohort.require_labels()?;
        let z = self.cohort.covariates();
        let x = self.cohort.pain();
        for i in 0..self.cohort.len() {
            let mut row = Vec::with_capacity(p + 2);
            row.push(labels[i].to_string());
            row.push(x[i].to_string());
            row.extend(z.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn truth_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.truth)?)
    }
}

fn unit_draw<R: Rng + ?Sized>(p: usize, norm: f64, r: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| r.sample(StandardNormal)).collect();
        let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|a| a * norm / len).collect();
        }
    }
}

/// Coefficient vectors of a configuration, drawn from its own stream.
pub fn draw_coefficients(cfg: &SimConfig) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(cfg.seed, "coefficients");
    let alpha = unit_draw(cfg.p_signal, cfg.coef_norm, &mut r);
    let beta = unit_draw(cfg.p_signal, cfg.coef_norm, &mut r);
    (alpha, beta)
}

fn draw_design<R: Rng + ?Sized>(n: usize, p: usize, r: &mut R) -> (Array2<f64>, Array1<f64>) {
    let mut z = Array2::zeros((n, p));
    let mut x = Array1::zeros(n);
    for i in 0..n {
        for j in 0..p {
            z[[i, j]] = r.sample(StandardNormal);
        }
        x[i] = r.random_range(0.0..10.0);
    }
    (z, x)
}

fn signals(scenario: Scenario, z: &Array2<f64>, x: &Array1<f64>, p_signal: usize, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    (0..z.nrows())
        .map(|i| {
            let row = z.row(i);
            scenario.signal(row.slice(ndarray::s![..p_signal]), x[i], alpha, beta)
        })
        .collect()
}

/// `Var(P) / mean(P(1-P))` with 1/n variance.
pub fn estimate_snr(true_prob: &[f64]) -> Result<f64> {
    if true_prob.len() < 2 {
        return Err(Error::contract("SNR needs at least two probabilities"));
    }
    if true_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numeric("probabilities must lie in [0, 1]".into()));
    }
    let n = true_prob.len() as f64;
    let mean = true_prob.iter().sum::<f64>() / n;
    let var = true_prob.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let resid = true_prob.iter().map(|p| p * (1.0 - p)).sum::<f64>() / n;
    if resid <= 0.0 {
        return Err(Error::DegenerateSignal("every probability is 0 or 1".into()));
    }
    Ok(var / resid)
}

fn snr_at(scale: f64, signal: &[f64]) -> Result<f64> {
    let probs: Vec<f64> = signal.iter().map(|g| sigmoid(scale * g)).collect();
    estimate_snr(&probs)
}

/// Finds `c` such that the SNR of `sigmoid(c g)` on a fresh calibration
/// sample is within 2% of the target, by bisection on a log scale over
/// [1e-4, 1e4].
pub fn calibrate_scale(cfg: &SimConfig, alpha: &[f64], beta: &[f64], calib_sample_size: usize) -> Result<f64> {
    if !(cfg.snr_target > 0.0) {
        return Err(Error::config("snr_target must be positive"));
    }
    if alpha.len() != cfg.p_signal || beta.len() != cfg.p_signal {
        return Err(Error::contract("coefficient length differs from p_signal"));
    }
    let mut r = rng::stream(cfg.seed, "calibration");
    let (z, x) = draw_design(calib_sample_size.max(2), cfg.p_signal, &mut r);
    let g = signals(cfg.scenario, &z, &x, cfg.p_signal, alpha, beta);
    let target = cfg.snr_target;
    let close = |s: f64| (s / target - 1.0).abs() <= CALIBRATION_TOLERANCE;

    let (mut lo, mut hi) = SCALE_BRACKET;
    let snr_lo = snr_at(lo, &g)?;
    let snr_hi = snr_at(hi, &g).unwrap_or(f64::INFINITY);
    if close(snr_lo) {
        return Ok(lo);
    }
    if snr_lo > target || snr_hi < target {
        return Err(Error::Calibration(format!(
            "target SNR {target} outside bracket: SNR({lo}) = {snr_lo}, SNR({hi}) = {snr_hi}"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let s = snr_at(mid, &g).unwrap_or(f64::INFINITY);
        if close(s) {
            return Ok(mid);
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!("no scale in [{lo}, {hi}] reaches SNR {target}")))
}

/// Generates a cohort: Z standard normal (signal then noise columns),
/// X uniform on [0, 10), Y Bernoulli of `sigmoid(c g(Z, X))`.
pub fn generate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let (alpha, beta) = draw_coefficients(cfg);
    let scale = calibrate_scale(cfg, &alpha, &beta, cfg.calib_sample_size)?;
    let mut design_rng = rng::stream(cfg.seed, "covariates");
    let (z, x) = draw_design(cfg.n_samples, cfg.dim(), &mut design_rng);
    let true_prob: Vec<f64> = signals(cfg.scenario, &z, &x, cfg.p_signal, &alpha, &beta)
        .into_iter()
        .map(|g| sigmoid(scale * g))
        .collect();
    let mut label_rng = rng::stream(cfg.seed, "labels");
    let labels: Vec<u8> = true_prob.iter().map(|&p| u8::from(label_rng.random::<f64>() < p)).collect();
    let achieved_snr = estimate_snr(&true_prob)?;
    log::debug!(
        "generated {:?} n={} p={}+{} scale={scale:.5} snr={achieved_snr:.4}",
        cfg.scenario,
        cfg.n_samples,
        cfg.p_signal,
        cfg.p_noise
    );
    Ok(SimDataset {
        cohort: Cohort::new(z, x, Some(labels))?,
        true_prob,
        truth: SimTruth {
            scenario: cfg.scenario,
            alpha,
            beta,
            scale,
            achieved_snr,
        },
    })
}

/// Axes of a simulation grid. An absent axis takes its default level; a spec
/// with every axis absent expands to nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(default)]
    pub snr: Option<Vec<f64>>,
    #[serde(default)]
    pub noise: Option<Vec<usize>>,
    /// `(p_signal, n_samples)` pairs.
    #[serde(default)]
    pub cells: Option<Vec<(usize, usize)>>,
}

pub const DEFAULT_SNR: f64 = 3.2;
pub const DEFAULT_P: usize = 16;
pub const DEFAULT_N: usize = 40_000;

impl GridSpec {
    pub fn empty(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            snr: None,
            noise: None,
            cells: None,
        }
    }

    /// SNR 0.2, 0.8 and 3.2 at n = 40,000 and p = 16.
    pub fn snr_block(scenario: Scenario, seed: u64) -> Self {
        Self {
            snr: Some(vec![0.2, 0.8, 3.2]),
            ..Self::empty(scenario, seed)
        }
    }

    /// 8, 12 and 16 noise covariates at SNR 3.2.
    pub fn noise_block(scenario: Scenario, seed: u64) -> Self {
        Self {
            noise: Some(vec![8, 12, 16]),
            ..Self::empty(scenario, seed)
        }
    }

    /// p in {8, 16, 18} by n in {5,000, 10,000, 20,000}.
    pub fn size_block(scenario: Scenario, seed: u64) -> Self {
        let cells = [8, 16, 18]
            .into_iter()
            .flat_map(|p| [5_000, 10_000, 20_000].into_iter().map(move |n| (p, n)))
            .collect();
        Self {
            cells: Some(cells),
            ..Self::empty(scenario, seed)
        }
    }
}

/// Cartesian expansion of a grid spec; each cell gets its own derived seed.
pub fn experiment_grid(spec: &GridSpec) -> Vec<SimConfig> {
    if spec.snr.is_none() && spec.noise.is_none() && spec.cells.is_none() {
        return Vec::new();
    }
    let snrs = spec.snr.clone().unwrap_or_else(|| vec![DEFAULT_SNR]);
    let noises = spec.noise.clone().unwrap_or_else(|| vec![0]);
    let cells = spec.cells.clone().unwrap_or_else(|| vec![(DEFAULT_P, DEFAULT_N)]);
    let mut out = Vec::new();
    for &snr in &snrs {
        for &noise in &noises {
            for &(p, n) in &cells {
                let seed = rng::derive_indexed(spec.seed, "grid-cell", out.len() as u64);
                out.push(SimConfig::new(spec.scenario, n, p, snr, seed).with_noise(noise));
            }
        }
    }
    out
}
