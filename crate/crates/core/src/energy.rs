//! Open-set scoring: free energy and softmax confidence, threshold calibration
//! from labeled-set energy statistics, and AUROC.
//!
//! Orientation throughout: a higher score means "more likely OOD". The free
//! energy already has that orientation; confidence is negated before ranking.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Inverse temperature of the free energy.
    pub beta: f64,
    /// IQR multiple below the median for the pseudo-inlier threshold.
    pub scale_id: f64,
    /// IQR multiple above the median for the pseudo-outlier threshold.
    pub scale_ood_threshold: f64,
    /// IQR multiple above the median for the hinge margin.
    pub scale_ood_margin: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            scale_id: 0.2,
            scale_ood_threshold: 1.3,
            scale_ood_margin: 1.9,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        for (name, v) in [
            ("scale_id", self.scale_id),
            ("scale_ood_threshold", self.scale_ood_threshold),
            ("scale_ood_margin", self.scale_ood_margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Pseudo-inlier threshold, pseudo-outlier threshold and hinge margin, in
/// energy-score units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_id: f64,
    pub tau_ood: f64,
    pub m_ood: f64,
}

/// `-(1/beta) log sum_j exp(beta * logit_j)` for one row.
pub fn free_energy(row: &[f64], beta: f64) -> f64 {
    if beta == 1.0 {
        -log_sum_exp(row)
    } else {
        let scaled: Vec<f64> = row.iter().map(|v| beta * v).collect();
        -log_sum_exp(&scaled) / beta
    }
}

/// Free energy per row of `logits`.
pub fn free_energy_score(logits: &Tensor, beta: f64) -> Vec<f64> {
    logits.row_iter().map(|r| free_energy(r, beta)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

/// Largest softmax probability per row.
pub fn softmax_confidence(logits: &Tensor) -> Vec<f64> {
    logits
        .row_iter()
        .map(|r| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (max - log_sum_exp(r)).exp()
        })
        .collect()
}

/// Linear-interpolation quantile of ascending `sorted` data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Thresholds from the median and interquartile range of labeled-set scores:
///
/// ```text
/// tau_id = median - iqr * scale_id
/// tau_ood = median + iqr * scale_ood_threshold
/// m_ood  = median + iqr * scale_ood_margin
/// ```
pub fn calibrate_thresholds(scores: &[f64], cfg: &EnergyConfig) -> Result<Thresholds> {
    cfg.validate()?;
    if scores.len() < 4 {
        return Err(Error::Calibration(format!(
            "need at least 4 labeled scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!("non-finite labeled score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    Ok(Thresholds {
        tau_id: median - iqr * cfg.scale_id,
        tau_ood: median + iqr * cfg.scale_ood_threshold,
        m_ood: median + iqr * cfg.scale_ood_margin,
    })
}

/// Probability that a random (OOD, ID) pair is ordered with the OOD score
/// higher, ties counting one half. Computed from average ranks
/// (Mann–Whitney U), which is exact for these half-integer counts.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Contract(format!(
            "auroc needs both score lists nonempty (id {}, ood {})",
            id_scores.len(),
            ood_scores.len()
        )));
    }
    if id_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(Error::Contract("auroc got a NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the OOD rank sum keeps every quantity an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u128;
        let ood_in_group = all[i..=j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_avg * ood_in_group;
        i = j + 1;
    }
    let n_ood = ood_scores.len() as u128;
    let n_id = id_scores.len() as u128;
    let twice_u = twice_rank_sum - n_ood * (n_ood + 1);
    Ok(twice_u as f64 / (2 * n_id * n_ood) as f64)
}

/// AUROC where larger confidence means "more ID".
pub fn confidence_auroc(id_conf: &[f64], ood_conf: &[f64]) -> Result<f64> {
    let neg = |v: &[f64]| v.iter().map(|c| -c).collect::<Vec<_>>();
    auroc(&neg(id_conf), &neg(ood_conf))
}

/// One row of the score-dump CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub split: String,
    pub is_ood: bool,
    pub score_energy: f64,
    pub score_confidence: f64,
}

/// Writes `split,is_ood,score_energy,score_confidence` rows.
pub fn write_score_dump<W: Write>(w: W, records: &[ScoreRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
