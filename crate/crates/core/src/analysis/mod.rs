//! Correlation statistics, quantile bands and the reconstruction/QA decoupling report.

pub mod plot;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is constant")]
    ConstantInput,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub n: usize,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::TooFewPoints {
            needed: 3,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(())
}

fn correlation(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` from `t = r·√((n−2)/(1−r²))` with `n − 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64), AnalysisError> {
    check(x, y)?;
    let r = correlation(x, y)?;
    Ok((r, correlation_p_value(r, x.len())))
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64), AnalysisError> {
    check(x, y)?;
    let rho = correlation(&mid_ranks(x), &mid_ranks(y))?;
    Ok((rho, correlation_p_value(rho, x.len())))
}

pub fn correlate(x: &[f64], y: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    let (pearson_r, pearson_p) = pearson(x, y)?;
    let (spearman_rho, spearman_p) = spearman(x, y)?;
    Ok(CorrelationResult {
        pearson_r,
        pearson_p,
        spearman_rho,
        spearman_p,
        n: x.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    /// Mean `x` of the bin.
    pub center: f64,
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
    pub count: usize,
}

/// Percentile of sorted data, interpolating linearly between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-count bins over `x` (sizes differ by at most one, larger bins first) with
/// the mean and interquartile range of `y` per bin.
pub fn quantile_bands(
    x: &[f64],
    y: &[f64],
    n_bins: usize,
) -> Result<Vec<QuantileBand>, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if n_bins == 0 || x.len() < n_bins {
        return Err(AnalysisError::TooFewPoints {
            needed: n_bins.max(1),
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let (base, extra) = (x.len() / n_bins, x.len() % n_bins);
    let mut bands = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        let members = &idx[start..start + size];
        start += size;
        let mut ys: Vec<f64> = members.iter().map(|&i| y[i]).collect();
        ys.sort_by(f64::total_cmp);
        let count = members.len() as f64;
        bands.push(QuantileBand {
            center: members.iter().map(|&i| x[i]).sum::<f64>() / count,
            mean: ys.iter().sum::<f64>() / count,
            q25: percentile(&ys, 0.25),
            q75: percentile(&ys, 0.75),
            count: members.len(),
        });
    }
    Ok(bands)
}

/// Largest rise between consecutive entries, zero when non-increasing.
pub fn max_increase(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
}

/// Smoothed-loss check over the final half of a loss series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedTail {
    pub window: usize,
    /// Step index (0-based into the series) where the checked half starts.
    pub from_index: usize,
    pub max_increase: f64,
    pub non_increasing: bool,
}

/// Means of consecutive non-overlapping blocks of `window` losses, aligned to the
/// end of the series. A leading remainder shorter than `window` is dropped.
pub fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    let skip = values.len() % window;
    values[skip..]
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Averages the final half of `losses` in blocks of `window` steps and checks that
/// the block means never rise.
pub fn smoothed_tail(losses: &[f64], window: usize) -> Result<SmoothedTail, AnalysisError> {
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let half = losses.len() / 2;
    let tail_len = losses.len() - half;
    if window == 0 || tail_len < 2 * window {
        return Err(AnalysisError::TooFewPoints {
            needed: 4 * window.max(1),
            got: losses.len(),
        });
    }
    let means = block_means(&losses[half..], window);
    let rise = max_increase(&means);
    Ok(SmoothedTail {
        window,
        from_index: losses.len() - means.len() * window,
        max_increase: rise,
        non_increasing: rise <= 0.0,
    })
}

pub const DEFAULT_DECOUPLING_DELTA: f64 = 0.05;

/// One trained configuration: model size or compression-rate label with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub bleu: f64,
    pub qa_overwrite: Option<f64>,
    pub qa_drift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadoxFlag {
    pub from: String,
    pub to: String,
    pub bleu_change: f64,
    /// QA metrics whose accuracy fell by more than δ, with the change.
    pub drops: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub delta: f64,
    pub runs: Vec<RunSummary>,
    pub flags: Vec<ParadoxFlag>,
}

impl DecouplingReport {
    /// Table grid with the metrics-log number formatting.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("label,bleu,qa_overwrite,qa_drift\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.label,
                r.bleu,
                opt(r.qa_overwrite),
                opt(r.qa_drift)
            ));
        }
        out
    }
}

/// Flags every ordered pair `(i, j)`, `i < j`, where BLEU does not decrease while an
/// available QA accuracy drops by more than `delta`.
pub fn decoupling_report(
    runs: &[RunSummary],
    delta: f64,
) -> Result<DecouplingReport, AnalysisError> {
    if runs.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            needed: 2,
            got: runs.len(),
        });
    }
    let mut flags = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            if b.bleu < a.bleu {
                continue;
            }
            let mut drops = Vec::new();
            for (name, before, after) in [
                ("qa_overwrite", a.qa_overwrite, b.qa_overwrite),
                ("qa_drift", a.qa_drift, b.qa_drift),
            ] {
                if let (Some(x), Some(y)) = (before, after) {
                    if x - y > delta {
                        drops.push((name.to_string(), y - x));
                    }
                }
            }
            if !drops.is_empty() {
                flags.push(ParadoxFlag {
                    from: a.label.clone(),
                    to: b.label.clone(),
                    bleu_change: b.bleu - a.bleu,
                    drops,
                });
            }
        }
    }
    Ok(DecouplingReport {
        delta,
        runs: runs.to_vec(),
        flags,
    })
}
