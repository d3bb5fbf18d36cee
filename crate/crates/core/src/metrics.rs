//! C-statistic, thresholded confusion metrics and mean (SE) aggregation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Majority-vote operating point.
pub const THRESHOLD_HALF: f64 = 0.5;
/// Operating point at the clinical cohort's opioid-use prevalence.
pub const THRESHOLD_PREVALENCE: f64 = 0.2309;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::contract("labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("need both classes, got {n_pos} positive and {n_neg} negative")));
    }
    Ok((n_pos, n_neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Mid-rank sum, O(n log n).
pub fn c_statistic(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // doubled ranks keep mid-ranks integral, so the result is exact
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let twice_mid = (start + 1 + end) as u128; // ranks start+1..=end
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_block;
        start = end;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * n_neg as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c_statistic: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balance_accuracy: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Calls a subject positive when its score is strictly above `threshold`.
pub fn classify_and_score(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
    }
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        let called = s > threshold;
        match (called, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let sensitivity = tp as f64 / n_pos as f64;
    let specificity = tn as f64 / n_neg as f64;
    Ok(MetricReport {
        c_statistic: c_statistic(scores, labels)?,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity,
        specificity,
        balance_accuracy: (sensitivity + specificity) / 2.0,
        threshold,
        n_pos,
        n_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    /// Mean and standard error (`sd / sqrt(R)`, sd with R - 1) of `values`.
    pub fn of(values: &[f64]) -> Result<Self> {
        let r = values.len();
        if r < 2 {
            return Err(Error::contract(format!("standard error needs at least 2 values, got {r}")));
        }
        let mean = values.iter().sum::<f64>() / r as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
        Ok(Self {
            mean,
            se: (var / r as f64).sqrt(),
        })
    }

    /// `0.96 (0.0003)`
    pub fn display(&self) -> String {
        format!("{:.2} ({:.4})", self.mean, self.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub repetitions: usize,
    pub threshold: f64,
    pub c_statistic: MeanSe,
    pub accuracy: MeanSe,
    pub sensitivity: MeanSe,
    pub specificity: MeanSe,
    pub balance_accuracy: MeanSe,
}

impl AggregateReport {
    pub fn rows(&self) -> [(&'static str, MeanSe); 5] {
        [
            ("Accuracy", self.accuracy),
            ("C-statistic", self.c_statistic),
            ("Sensitivity", self.sensitivity),
            ("Specificity", self.specificity),
            ("Balance accuracy", self.balance_accuracy),
        ]
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows()
            .iter()
            .map(|(name, m)| vec![name.to_string(), m.display()])
            .collect();
        render_table(&["Metric".into(), format!("Threshold {}", self.threshold)], &rows)
    }
}

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("no reports to aggregate"))?;
    if reports.iter().any(|r| r.threshold != first.threshold) {
        return Err(Error::contract("reports use different thresholds"));
    }
    let col = |f: fn(&MetricReport) -> f64| MeanSe::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        repetitions: reports.len(),
        threshold: first.threshold,
        c_statistic: col(|r| r.c_statistic)?,
        accuracy: col(|r| r.accuracy)?,
        sensitivity: col(|r| r.sensitivity)?,
        specificity: col(|r| r.specificity)?,
        balance_accuracy: col(|r| r.balance_accuracy)?,
    })
}

/// Left-aligned text table with two-space column gaps.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (j, cell) in row.iter().enumerate().take(ncol) {
            widths[j] = widths[j].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate().take(ncol) {
            if j > 0 {
                s.push_str("  ");
            }
            s.push_str(c);
            if j + 1 < ncol {
                s.push_str(&" ".repeat(widths[j] - c.chars().count()));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    for row in rows {
        out.push_str(&line(row));
    }
    out
}
