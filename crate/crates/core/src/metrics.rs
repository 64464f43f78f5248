//! AUROC, FPR at 95% TPR and score-density diagnostics. ID is the
//! positive class throughout.

use serde::{Deserialize, Serialize};

use crate::detector::adaptive_threshold;
use crate::error::{Result, TtlError};

/// Cap reported for the bimodality ratio when within-group variance is zero.
pub const BIMODALITY_CAP: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold_at_tpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(TtlError::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TtlError::Evaluation("NaN score".into()));
    }
    let n_id = labels.iter().filter(|&&l| l == 1).count();
    let n_ood = labels.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(TtlError::Evaluation("both ID and OOD samples are required".into()));
    }
    Ok((n_id, n_ood))
}

/// Mann–Whitney AUROC, ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_id, n_ood) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (ID, OOD) pairs won by ID, exact in integers
    let mut twice_wins: u64 = 0;
    let mut ood_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let tie_id = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let tie_ood = (j - i) as u64 - tie_id;
        twice_wins += tie_id * (2 * ood_below + tie_ood);
        ood_below += tie_ood;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// FPR at the largest threshold that keeps at least 95% of ID scores at
/// or above it. Returns `(fpr, threshold)`.
pub fn fpr95(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (n_id, n_ood) = check(scores, labels)?;
    let mut id: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    id.sort_by(|a, b| b.total_cmp(a));
    // smallest k with k / n_id >= 0.95
    let k = (95 * n_id).div_ceil(100).max(1);
    let threshold = id[k - 1];
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == 0 && s >= threshold)
        .count();
    Ok((fp as f64 / n_ood as f64, threshold))
}

pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalResult> {
    let (n_id, n_ood) = check(scores, labels)?;
    let (fpr, threshold) = fpr95(scores, labels)?;
    Ok(EvalResult {
        auroc: auroc(scores, labels)?,
        fpr95: fpr,
        threshold_at_tpr95: threshold,
        n_id,
        n_ood,
    })
}

/// Between-group over within-group variance of the two groups found by the
/// variance-minimizing threshold. 0 for constant input; capped at
/// [`BIMODALITY_CAP`] when the groups have no spread.
pub fn bimodality_ratio(scores: &[f64], grid: usize) -> f64 {
    let Ok(t) = adaptive_threshold(scores, grid) else {
        return 0.0;
    };
    let n = scores.len() as f64;
    let (w_id, w_ood) = (t.n_id as f64 / n, t.n_ood as f64 / n);
    let mut within = 0.0;
    for &s in scores {
        let mu = if s > t.lambda { t.mu_id } else { t.mu_ood };
        within += (s - mu) * (s - mu);
    }
    within /= n;
    let between = w_id * w_ood * (t.mu_id - t.mu_ood).powi(2);
    if within <= 0.0 {
        return if between > 0.0 { BIMODALITY_CAP } else { 0.0 };
    }
    (between / within).min(BIMODALITY_CAP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub lo: f64,
    pub hi: f64,
    /// Fraction of each class's scores per bin (each sums to 1 when the
    /// class is present).
    pub id_density: Vec<f64>,
    pub ood_density: Vec<f64>,
    pub bimodality: f64,
}

impl DensityReport {
    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.id_density.len();
        (0..=bins)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / bins as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let edges = self.bin_edges();
        let mut out = String::from("bin_lo,bin_hi,id_density,ood_density\n");
        for i in 0..self.id_density.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                edges[i], edges[i + 1], self.id_density[i], self.ood_density[i]
            ));
        }
        out
    }
}

/// Per-class normalized histograms over the pooled score range.
pub fn density_report(scores: &[f64], labels: &[u8], bins: usize) -> Result<DensityReport> {
    if bins < 2 {
        return Err(TtlError::Argument("density_report needs at least 2 bins".into()));
    }
    if scores.len() != labels.len() {
        return Err(TtlError::Evaluation("scores and labels differ in length".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut id = vec![0.0; bins];
    let mut ood = vec![0.0; bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = if hi > lo {
            (((s - lo) / (hi - lo)) * bins as f64).floor().min((bins - 1) as f64) as usize
        } else {
            0
        };
        if l == 1 {
            id[b] += 1.0;
        } else {
            ood[b] += 1.0;
        }
    }
    let normalize = |h: &mut Vec<f64>| {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v /= total);
        }
    };
    normalize(&mut id);
    normalize(&mut ood);
    Ok(DensityReport {
        lo: if lo.is_finite() { lo } else { 0.0 },
        hi: if hi.is_finite() { hi } else { 0.0 },
        id_density: id,
        ood_density: ood,
        bimodality: bimodality_ratio(scores, 100),
    })
}
