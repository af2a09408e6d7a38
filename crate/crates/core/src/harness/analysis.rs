use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::{ExperimentRecord, SummaryRow};
use crate::error::{Error, Result};

/// One-sided sign test of "differences tend to be positive".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// `P(X >= positive)` for `X ~ Bin(positive + negative, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let n = (positive + negative) as u64;
    let p_value = if positive == 0 {
        1.0
    } else {
        Binomial::new(0.5, n).expect("p = 1/2 is valid").sf(positive as u64 - 1)
    };
    SignTest {
        positive,
        negative,
        ties: diffs.len() - positive - negative,
        p_value,
    }
}

/// Mean summary AP per N for one family and seed, N ascending.
pub fn mean_ap_by_n(summary: &[SummaryRow], family: &str, seed: u64) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in summary.iter().filter(|r| r.family == family && r.seed == seed) {
        let e = acc.entry(r.n).or_default();
        e.0 += r.ap;
        e.1 += 1;
    }
    acc.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect()
}

/// For each N, the K with the highest test AP averaged over resamples
/// (smaller K on ties).
pub fn best_k_by_n(records: &[ExperimentRecord], family: &str, seed: u64) -> Vec<(usize, usize)> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.family == family && r.seed == seed) {
        let e = acc.entry((r.n, r.k)).or_default();
        e.0 += r.ap;
        e.1 += 1;
    }
    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for ((n, k), (s, c)) in acc {
        let mean = s / c as f64;
        match best.get(&n) {
            Some(&(_, b)) if mean <= b => {}
            _ => {
                best.insert(n, (k, mean));
            }
        }
    }
    best.into_iter().map(|(n, (k, _))| (n, k)).collect()
}

/// Least-squares line `AP = slope * log10(N) + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub points: usize,
    /// Non-increasing fit: no finite N reaches a higher AP.
    pub degenerate: bool,
}

impl LogLinearFit {
    /// Extrapolated N at which the line reaches `target`; `f64::INFINITY`
    /// for a degenerate fit that does not already reach it.
    pub fn n_for_target(&self, target: f64) -> f64 {
        if self.degenerate {
            return if target <= self.intercept { 1.0 } else { f64::INFINITY };
        }
        10f64.powf((target - self.intercept) / self.slope)
    }
}

/// Fits AP against log10(N). Needs at least three distinct N with AP below 1.
pub fn fit_loglinear(points: &[(usize, f64)]) -> Result<LogLinearFit> {
    let distinct: BTreeSet<usize> = points.iter().filter(|p| p.1 < 1.0).map(|p| p.0).collect();
    if distinct.len() < 3 {
        return Err(Error::Validation(format!(
            "log-linear fit needs 3 distinct N with AP < 1, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|p| p.0 == 0 || !p.1.is_finite()) {
        return Err(Error::Domain("log-linear fit needs N > 0 and finite AP".into()));
    }
    // sort so the sums do not depend on input order
    let mut xy: Vec<(f64, f64)> = points.iter().map(|&(n, ap)| ((n as f64).log10(), ap)).collect();
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let m = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / m;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xy.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Ok(LogLinearFit {
        slope,
        intercept,
        residual: (sse / m).sqrt(),
        points: xy.len(),
        degenerate: !(slope > 1e-12),
    })
}
