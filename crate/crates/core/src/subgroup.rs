//! Tendency-score subgroups: local false discovery rates on log-BOT and
//! log-POT, per-subgroup risk curves over pain, and per-covariate R².

use std::fmt;
use std::io::Write;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::model::{probability, Cohort, InnerModel, TendencyScore};
use crate::plot::{LineChart, Series};
use crate::{Error, Result};

pub const DEFAULT_Q: f64 = 0.2;
pub const MIN_LFDR_SAMPLES: usize = 200;
const KERNEL_REACH: f64 = 8.0;

/// Eval-mode tendency scores, one per subject in cohort order.
pub fn score_cohort(model: &InnerModel, cohort: &Cohort) -> Result<Vec<TendencyScore>> {
    let (a, b) = model.log_scores(cohort.covariates())?;
    Ok(a.iter().zip(b.iter()).map(|(&a, &b)| TendencyScore::from_logs(a, b)).collect())
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Nelder–Mead minimisation in two dimensions.
fn nelder_mead(f: impl Fn([f64; 2]) -> f64, start: [f64; 2], step: [f64; 2]) -> [f64; 2] {
    let mut simplex = [start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]];
    let mut values = simplex.map(&f);
    for _ in 0..500 {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.map(|i| simplex[i]);
        values = idx.map(|i| values[i]);
        if (values[2] - values[0]).abs() < 1e-12 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let reflected = along(-1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(expanded);
            (simplex[2], values[2]) = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < values[1] {
            (simplex[2], values[2]) = (reflected, fr);
        } else {
            let contracted = if fr < values[2] { along(-0.5) } else { along(0.5) };
            let fc = f(contracted);
            if fc < values[2].min(fr) {
                (simplex[2], values[2]) = (contracted, fc);
            } else {
                for k in 1..3 {
                    simplex[k] = [
                        simplex[0][0] + 0.5 * (simplex[k][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[k][1] - simplex[0][1]),
                    ];
                    values[k] = f(simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    simplex[best]
}

/// Two-group local false discovery rate model on standardized scores.
///
/// Scores are standardized with the sample mean and sd; the null
/// `N(null_mean, null_sd²)` (standardized units) is fitted by maximum
/// likelihood on the interquartile band: observations inside it enter with
/// their density, those outside only through the tail mass on their side. The marginal density is a Gaussian
/// KDE with Silverman's bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfdrModel {
    pub center: f64,
    pub spread: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub pi0: f64,
    pub bandwidth: f64,
    sorted: Vec<f64>,
}

pub fn fit_lfdr(z_scores: &[f64]) -> Result<LfdrModel> {
    let n = z_scores.len();
    if n < MIN_LFDR_SAMPLES {
        return Err(Error::contract(format!("lfdr needs at least {MIN_LFDR_SAMPLES} scores, got {n}")));
    }
    if z_scores.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let nf = n as f64;
    let center = z_scores.iter().sum::<f64>() / nf;
    let spread = (z_scores.iter().map(|z| (z - center).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(spread > 1e-12 * center.abs().max(1.0)) {
        return Err(Error::DegenerateSpread(format!("scores have sd {spread}")));
    }
    let mut sorted: Vec<f64> = z_scores.iter().map(|z| (z - center) / spread).collect();
    sorted.sort_by(f64::total_cmp);

    let (lo, hi) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
    if hi - lo <= 0.0 {
        return Err(Error::DegenerateSpread("interquartile range is zero".into()));
    }
    let band: Vec<f64> = sorted.iter().copied().filter(|y| (lo..=hi).contains(y)).collect();
    let n_left = sorted.iter().filter(|&&y| y < lo).count() as f64;
    let n_right = sorted.iter().filter(|&&y| y > hi).count() as f64;
    let k = band.len() as f64;
    // in-band points contribute their density, the rest their tail mass
    let nll = |[mu, log_sd]: [f64; 2]| {
        let sd = log_sd.exp();
        let left = std_normal_cdf((lo - mu) / sd);
        let right = std_normal_cdf(-(hi - mu) / sd);
        if !(left > 0.0 && right > 0.0) {
            return f64::INFINITY;
        }
        let sq: f64 = band.iter().map(|y| ((y - mu) / sd).powi(2)).sum();
        0.5 * sq + k * log_sd - n_left * left.ln() - n_right * right.ln()
    };
    let start = [quantile(&sorted, 0.5), ((hi - lo) / 1.349).ln()];
    let [null_mean, log_sd] = nelder_mead(nll, start, [0.1, 0.1]);
    let null_sd = log_sd.exp();
    if !(null_sd.is_finite() && null_sd > 0.0) {
        return Err(Error::DegenerateSpread(format!("fitted null sd {null_sd}")));
    }
    let null_mass = std_normal_cdf((hi - null_mean) / null_sd) - std_normal_cdf((lo - null_mean) / null_sd);
    let pi0 = ((k / nf) / null_mass).min(1.0);

    let iqr = hi - lo;
    let sd = (sorted.iter().map(|y| y * y).sum::<f64>() / (nf - 1.0)).sqrt();
    let bandwidth = 0.9 * sd.min(iqr / 1.34) * nf.powf(-0.2);
    Ok(LfdrModel {
        center,
        spread,
        null_mean,
        null_sd,
        pi0,
        bandwidth,
        sorted,
    })
}

impl LfdrModel {
    pub fn standardize(&self, z: f64) -> f64 {
        (z - self.center) / self.spread
    }

    /// Kernel density of the standardized scores at standardized `y`.
    pub fn density(&self, y: f64) -> f64 {
        let h = self.bandwidth;
        let start = self.sorted.partition_point(|&v| v < y - KERNEL_REACH * h);
        let end = self.sorted.partition_point(|&v| v <= y + KERNEL_REACH * h);
        let s: f64 = self.sorted[start..end].iter().map(|&v| std_normal_pdf((y - v) / h)).sum();
        s / (self.sorted.len() as f64 * h)
    }

    pub fn null_density(&self, y: f64) -> f64 {
        std_normal_pdf((y - self.null_mean) / self.null_sd) / self.null_sd
    }

    /// Local false discovery rate of a raw score, clipped to [0, 1].
    pub fn lfdr(&self, z: f64) -> f64 {
        let y = self.standardize(z);
        let null = self.pi0 * self.null_density(y);
        let f = self.density(y);
        if f <= 0.0 {
            return if null > 0.0 { 1.0 } else { 0.0 };
        }
        (null / f).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Normal,
    High,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::Normal => "normal",
            Level::High => "high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAssignment {
    pub log_bot: f64,
    pub log_pot: f64,
    pub lfdr_bot: f64,
    pub lfdr_pot: f64,
    pub bot_class: Level,
    pub pot_class: Level,
}

impl SubgroupAssignment {
    pub fn group(&self) -> (Level, Level) {
        (self.bot_class, self.pot_class)
    }
}

pub fn group_name((bot, pot): (Level, Level)) -> String {
    format!("{bot} BOT & {pot} POT")
}

fn classify(model: &LfdrModel, z: f64, q: f64) -> (f64, Level) {
    let l = model.lfdr(z);
    let level = if l >= q {
        Level::Normal
    } else if model.standardize(z) > model.null_mean {
        Level::High
    } else {
        Level::Low
    };
    (l, level)
}

/// Fits one lfdr model per score and labels each subject Low/Normal/High on
/// both.
pub fn assign_subgroups(scores: &[TendencyScore], q: f64) -> Result<Vec<SubgroupAssignment>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("lfdr cutoff {q} outside (0, 1)")));
    }
    let bots: Vec<f64> = scores.iter().map(|s| s.log_bot).collect();
    let pots: Vec<f64> = scores.iter().map(|s| s.log_pot).collect();
    let (mb, mp) = (fit_lfdr(&bots)?, fit_lfdr(&pots)?);
    Ok(scores
        .par_iter()
        .map(|s| {
            let (lfdr_bot, bot_class) = classify(&mb, s.log_bot, q);
            let (lfdr_pot, pot_class) = classify(&mp, s.log_pot, q);
            SubgroupAssignment {
                log_bot: s.log_bot,
                log_pot: s.log_pot,
                lfdr_bot,
                lfdr_pot,
                bot_class,
                pot_class,
            }
        })
        .collect())
}

/// Per-subject subgroup table.
pub fn write_assignments_csv<W: Write>(out: W, assignments: &[SubgroupAssignment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["log_bot", "log_pot", "lfdr_bot", "lfdr_pot", "bot_class", "pot_class"])?;
    for a in assignments {
        w.write_record([
            a.log_bot.to_string(),
            a.log_pot.to_string(),
            a.lfdr_bot.to_string(),
            a.lfdr_pot.to_string(),
            a.bot_class.to_string(),
            a.pot_class.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Subgroup sizes in a fixed order; empty groups are left out.
pub fn group_counts(assignments: &[SubgroupAssignment]) -> Vec<((Level, Level), usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for a in assignments {
        *counts.entry(a.group()).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCurve {
    pub group: (Level, Level),
    pub name: String,
    pub size: usize,
    pub mean_prob: Vec<f64>,
    /// First pain value where the curve reaches 0.5, interpolated linearly.
    pub crossing_pain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub pain_grid: Vec<f64>,
    pub groups: Vec<GroupCurve>,
}

/// Pain values 0, 0.1, ..., 10.
pub fn pain_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 10.0).collect()
}

fn crossing(grid: &[f64], curve: &[f64]) -> Option<f64> {
    let k = curve.iter().position(|&m| m >= 0.5)?;
    if k == 0 {
        return Some(grid[0]);
    }
    let (m0, m1) = (curve[k - 1], curve[k]);
    Some(grid[k - 1] + (0.5 - m0) / (m1 - m0) * (grid[k] - grid[k - 1]))
}

/// Mean predicted probability per subgroup with every member's pain set to
/// each grid value.
pub fn risk_curves(model: &InnerModel, cohort: &Cohort, assignments: &[SubgroupAssignment]) -> Result<RiskCurve> {
    if assignments.len() != cohort.len() {
        return Err(Error::contract(format!(
            "{} assignments for {} subjects",
            assignments.len(),
            cohort.len()
        )));
    }
    let (a, b) = model.log_scores(cohort.covariates())?;
    let grid = pain_grid();
    let groups = group_counts(assignments)
        .into_iter()
        .map(|(group, size)| {
            let members: Vec<usize> = (0..cohort.len()).filter(|&i| assignments[i].group() == group).collect();
            let mean_prob: Vec<f64> = grid
                .par_iter()
                .map(|&x| members.iter().map(|&i| probability(a[i] + b[i] * x)).sum::<f64>() / size as f64)
                .collect();
            GroupCurve {
                group,
                name: group_name(group),
                size,
                crossing_pain: crossing(&grid, &mean_prob),
                mean_prob,
            }
        })
        .collect();
    Ok(RiskCurve { pain_grid: grid, groups })
}

impl RiskCurve {
    /// Long format: `subgroup,pain,mean_prob`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subgroup", "pain", "mean_prob"])?;
        for g in &self.groups {
            for (x, m) in self.pain_grid.iter().zip(&g.mean_prob) {
                w.write_record([g.name.clone(), x.to_string(), m.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        LineChart {
            title: "Estimated Probability Against Pain Score by Risk Group".into(),
            x_label: "Pain score".into(),
            y_label: "Estimated probability".into(),
            series: self
                .groups
                .iter()
                .map(|g| Series {
                    name: g.name.clone(),
                    xs: self.pain_grid.clone(),
                    ys: g.mean_prob.clone(),
                })
                .collect(),
            reference_y: Some(0.5),
        }
        .render()
    }
}

/// Design-matrix columns belonging to one covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateBlock {
    pub name: String,
    pub columns: Vec<usize>,
}

impl CovariateBlock {
    /// One block per column, named `z1..zp`.
    pub fn singletons(p: usize) -> Vec<Self> {
        (0..p)
            .map(|j| Self {
                name: format!("z{}", j + 1),
                columns: vec![j],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Row {
    pub covariate: String,
    /// `None` when the covariate (or the score) has no variance.
    pub r2_bot: Option<f64>,
    pub r2_pot: Option<f64>,
}

/// Coefficient of determination of an OLS fit of `y` on the given columns
/// plus an intercept.
fn ols_r2(design: ArrayView2<f64>, columns: &[usize], y: &[f64]) -> Option<f64> {
    let n = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let sst: f64 = yc.iter().map(|v| v * v).sum();
    let cols: Vec<Vec<f64>> = columns
        .iter()
        .map(|&j| {
            let c = design.column(j);
            let m = c.sum() / n;
            c.iter().map(|v| v - m).collect::<Vec<f64>>()
        })
        .filter(|c| c.iter().map(|v| v * v).sum::<f64>() > 1e-12 * n)
        .collect();
    if cols.is_empty() || sst <= 0.0 {
        return None;
    }
    let k = cols.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut a = vec![vec![0.0; k + 1]; k];
    for r in 0..k {
        for c in 0..k {
            a[r][c] = dot(&cols[r], &cols[c]);
        }
        a[r][k] = dot(&cols[r], &yc);
    }
    // Gaussian elimination with partial pivoting; near-singular pivots drop
    // their column
    let scale = (0..k).map(|i| a[i][i]).fold(0.0, f64::max);
    let mut coef = vec![0.0; k];
    let mut pivots = Vec::with_capacity(k);
    let mut row = 0;
    for col in 0..k {
        let best = (row..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()));
        let Some(best) = best else { break };
        if a[best][col].abs() <= 1e-10 * scale {
            continue;
        }
        a.swap(row, best);
        for i in 0..k {
            if i != row {
                let f = a[i][col] / a[row][col];
                for c in col..=k {
                    a[i][c] -= f * a[row][c];
                }
            }
        }
        pivots.push((row, col));
        row += 1;
    }
    for (r, c) in pivots {
        coef[c] = a[r][k] / a[r][c];
    }
    let sse: f64 = (0..y.len())
        .map(|i| {
            let fit: f64 = (0..k).map(|j| coef[j] * cols[j][i]).sum();
            (yc[i] - fit).powi(2)
        })
        .sum();
    Some((1.0 - sse / sst).clamp(0.0, 1.0))
}

/// R² of log-BOT and log-POT regressed on each covariate block alone.
pub fn covariate_r2(scores: &[TendencyScore], design: ArrayView2<f64>, blocks: &[CovariateBlock]) -> Result<Vec<R2Row>> {
    if scores.len() != design.nrows() {
        return Err(Error::contract(format!("{} scores for {} rows", scores.len(), design.nrows())));
    }
    if let Some(bad) = blocks.iter().flat_map(|b| &b.columns).find(|&&j| j >= design.ncols()) {
        return Err(Error::contract(format!("column {bad} outside design with {} columns", design.ncols())));
    }
    let bots: Vec<f64> = scores.iter().map(|s| s.log_bot).collect();
    let pots: Vec<f64> = scores.iter().map(|s| s.log_pot).collect();
    Ok(blocks
        .par_iter()
        .map(|b| R2Row {
            covariate: b.name.clone(),
            r2_bot: ols_r2(design, &b.columns, &bots),
            r2_pot: ols_r2(design, &b.columns, &pots),
        })
        .collect())
}

pub fn write_r2_csv<W: Write>(out: W, rows: &[R2Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "r2_bot", "r2_pot"])?;
    let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in rows {
        w.write_record([r.covariate.clone(), cell(r.r2_bot), cell(r.r2_pot)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn null_only_fit() {
        for seed in 0..3 {
            let z = normals(10_000, seed);
            let m = fit_lfdr(&z).unwrap();
            assert!(m.null_mean.abs() < 0.05, "mu0 {}", m.null_mean);
            assert!((m.null_sd - 1.0).abs() < 0.05, "sd0 {}", m.null_sd);
            assert!(m.pi0 <= 1.0);
            let discoveries = z.iter().filter(|&&v| m.lfdr(v) < 0.2).count();
            assert!(discoveries <= 1, "seed {seed}: {discoveries} discoveries");
        }
    }

    #[test]
    fn planted_component_is_found() {
        let mut r = rng::seeded(5);
        let planted = Normal::new(6.0, 0.5).unwrap();
        let mut z = normals(9_500, 6);
        z.extend((0..500).map(|_| planted.sample(&mut r)));
        let m = fit_lfdr(&z).unwrap();
        let found = z[9_500..].iter().filter(|&&v| m.lfdr(v) < 0.2).count();
        assert!(found as f64 >= 0.9 * 500.0, "recall {found}/500");
    }

    #[test]
    fn lfdr_bounds_and_shape() {
        let z = normals(2_000, 1);
        let m = fit_lfdr(&z).unwrap();
        let grid: Vec<f64> = (-30..=30).map(|k| k as f64 / 10.0).collect();
        let l: Vec<f64> = grid.iter().map(|&v| m.lfdr(v)).collect();
        assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.lfdr(1e6) == 0.0 || m.lfdr(1e6) == 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_lfdr(&[3.0; 500]), Err(Error::DegenerateSpread(_))));
        assert!(matches!(fit_lfdr(&normals(199, 0)), Err(Error::Contract(_))));
        let mut z = normals(300, 0);
        z[7] = f64::NAN;
        assert!(fit_lfdr(&z).is_err());
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let [x, y] = nelder_mead(|[x, y]| (x - 1.5).powi(2) + 3.0 * (y + 0.5).powi(2), [0.0, 0.0], [0.2, 0.2]);
        assert!((x - 1.5).abs() < 1e-5 && (y + 0.5).abs() < 1e-5);
    }

    fn scores_from(bots: &[f64], pots: &[f64]) -> Vec<TendencyScore> {
        bots.iter().zip(pots).map(|(&a, &b)| TendencyScore::from_logs(a, b)).collect()
    }

    #[test]
    fn subgroup_partition_and_outlier() {
        let mut bots = normals(3_000, 11);
        let pots = normals(3_000, 12);
        bots[0] = 8.0;
        let a = assign_subgroups(&scores_from(&bots, &pots), DEFAULT_Q).unwrap();
        assert_eq!(a[0].bot_class, Level::High);
        assert!(a[0].lfdr_bot < DEFAULT_Q);
        let total: usize = group_counts(&a).iter().map(|(_, c)| c).sum();
        assert_eq!(total, 3_000);
        let normal_normal = a.iter().filter(|s| s.group() == (Level::Normal, Level::Normal)).count();
        assert!(normal_normal >= 2_995);
        for s in &a {
            if s.bot_class != Level::Normal {
                assert!(s.lfdr_bot < DEFAULT_Q);
            }
        }
        assert!(assign_subgroups(&scores_from(&bots, &pots), 1.0).is_err());
    }

    fn model_with(bot_w: f64, pot_w: f64) -> InnerModel {
        InnerModel::logistic_with(&[bot_w], 0.0, &[pot_w], 0.0).unwrap()
    }

    #[test]
    fn scoring_matches_networks() {
        let m = model_with(0.7, -0.2);
        let z = Array2::from_shape_vec((3, 1), vec![1.0, -2.0, 0.5]).unwrap();
        let cohort = Cohort::new(z, Array1::from(vec![1.0, 2.0, 3.0]), None).unwrap();
        let s = score_cohort(&m, &cohort).unwrap();
        for (i, zi) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!((s[i].log_bot - 0.7 * zi).abs() < 1e-12);
            assert!((s[i].log_pot + 0.2 * zi).abs() < 1e-12);
        }
        let one = cohort.select(&[1]);
        assert_eq!(score_cohort(&m, &one).unwrap()[0], m.tendency(&[-2.0]).unwrap());
        let zero = InnerModel::logistic_baseline(1).unwrap();
        assert!(score_cohort(&zero, &cohort).unwrap().iter().all(|t| t.bot == 1.0 && t.pot == 1.0));
    }

    fn assignment(bot: Level, pot: Level) -> SubgroupAssignment {
        SubgroupAssignment {
            log_bot: 0.0,
            log_pot: 0.0,
            lfdr_bot: 1.0,
            lfdr_pot: 1.0,
            bot_class: bot,
            pot_class: pot,
        }
    }

    #[test]
    fn flat_half_curve_crosses_at_start() {
        let m = InnerModel::logistic_baseline(1).unwrap();
        let cohort = Cohort::new(Array2::zeros((1, 1)), Array1::from(vec![4.0]), None).unwrap();
        let rc = risk_curves(&m, &cohort, &[assignment(Level::Normal, Level::Normal)]).unwrap();
        assert_eq!(rc.pain_grid.len(), 101);
        assert!(rc.groups[0].mean_prob.iter().all(|&p| p == 0.5));
        assert_eq!(rc.groups[0].crossing_pain, Some(0.0));
    }

    #[test]
    fn curves_average_closed_form() {
        let m = model_with(1.0, 1.0);
        let zs = [-3.0, -1.0, -0.5, 0.2];
        let cohort = Cohort::new(
            Array2::from_shape_vec((4, 1), zs.to_vec()).unwrap(),
            Array1::from(vec![1.0, 2.0, 3.0, 4.0]),
            None,
        )
        .unwrap();
        let groups = [
            assignment(Level::Normal, Level::Normal),
            assignment(Level::Normal, Level::Normal),
            assignment(Level::High, Level::High),
            assignment(Level::High, Level::High),
        ];
        let rc = risk_curves(&m, &cohort, &groups).unwrap();
        assert_eq!(rc.groups.len(), 2);
        let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
        for g in &rc.groups {
            let members: &[f64] = if g.group == (Level::Normal, Level::Normal) { &zs[..2] } else { &zs[2..] };
            for (x, &mp) in rc.pain_grid.iter().zip(&g.mean_prob) {
                let expected = members.iter().map(|z| sig(z + z * x)).sum::<f64>() / 2.0;
                assert!((mp - expected).abs() < 1e-10);
            }
        }
        // members with negative slope never reach 0.5
        let nn = rc.groups.iter().find(|g| g.group == (Level::Normal, Level::Normal)).unwrap();
        assert_eq!(nn.crossing_pain, None);
        let mut buf = Vec::new();
        rc.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 101);
        assert_eq!(rc.to_svg().matches("<polyline").count(), 2);
    }

    #[test]
    fn crossing_interpolates() {
        let grid = [0.0, 0.1, 0.2];
        assert_relative_eq!(crossing(&grid, &[0.3, 0.4, 0.6]).unwrap(), 0.15, epsilon = 1e-12);
        assert_eq!(crossing(&grid, &[0.3, 0.4, 0.45]), None);
    }

    #[test]
    fn r2_cases() {
        let n = 10_000;
        let mut r = rng::seeded(3);
        let mut design = Array2::<f64>::zeros((n, 4));
        for i in 0..n {
            design[[i, 0]] = r.sample(StandardNormal);
            design[[i, 1]] = r.sample(StandardNormal);
            design[[i, 2]] = 1.0; // constant
            design[[i, 3]] = f64::from(u8::from(i % 3 == 0));
        }
        let scores: Vec<TendencyScore> = (0..n)
            .map(|i| TendencyScore::from_logs(2.0 * design[[i, 0]] - 1.0, design[[i, 3]] + 0.5 * r.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut blocks = CovariateBlock::singletons(3);
        blocks.push(CovariateBlock {
            name: "cat".into(),
            columns: vec![3, 2],
        });
        let rows = covariate_r2(&scores, design.view(), &blocks).unwrap();
        assert_relative_eq!(rows[0].r2_bot.unwrap(), 1.0, epsilon = 1e-10);
        assert!(rows[1].r2_bot.unwrap() < 0.01);
        assert!(rows[1].r2_pot.unwrap() < 0.01);
        assert_eq!(rows[2].r2_bot, None);
        let cat = rows[3].r2_pot.unwrap();
        // var(d) / (var(d) + 0.25) with d Bernoulli(1/3)
        assert!((cat - (2.0 / 9.0) / (2.0 / 9.0 + 0.25)).abs() < 0.03);
        let mut buf = Vec::new();
        write_r2_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("z3,NA,NA"));
        assert!(covariate_r2(&scores[..5], design.view(), &blocks).is_err());
    }

    #[test]
    fn multi_column_block_matches_dummy_means() {
        // three-level factor with reference dropped: R² equals between-group share
        let levels = [0usize, 1, 2, 0, 1, 2, 0, 1, 2, 2];
        let y = [1.0, 2.0, 4.0, 1.5, 2.5, 3.5, 0.5, 1.5, 4.5, 4.0];
        let mut design = Array2::zeros((10, 2));
        for (i, &l) in levels.iter().enumerate() {
            if l > 0 {
                design[[i, l - 1]] = 1.0;
            }
        }
        let scores = scores_from(&y, &y);
        let blocks = [CovariateBlock {
            name: "f".into(),
            columns: vec![0, 1],
        }];
        let got = covariate_r2(&scores, design.view(), &blocks).unwrap()[0].r2_bot.unwrap();
        let mean = y.iter().sum::<f64>() / 10.0;
        let mut ssb = 0.0;
        for l in 0..3 {
            let g: Vec<f64> = (0..10).filter(|&i| levels[i] == l).map(|i| y[i]).collect();
            let gm = g.iter().sum::<f64>() / g.len() as f64;
            ssb += g.len() as f64 * (gm - mean).powi(2);
        }
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        assert_relative_eq!(got, ssb / sst, epsilon = 1e-12);
    }
}
