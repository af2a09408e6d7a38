//! Sigmoid calibration of classifier scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of `P(y = 1 | s) = 1 / (1 + exp(A s + B))`. A well-oriented
/// classifier has `A < 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub fn prob(&self, score: f64) -> f64 {
        if score == f64::NEG_INFINITY {
            return if self.a < 0.0 { 0.0 } else { 1.0 };
        }
        let f = self.a * score + self.b;
        if f >= 0.0 {
            let e = (-f).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + f.exp())
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlattFit {
    pub params: Platt,
    pub iterations: usize,
    /// The two classes were perfectly separable by score.
    pub separated: bool,
    /// Parameters hit the clamp bound.
    pub clamped: bool,
}

const MAX_ITER: usize = 100;
const MIN_STEP: f64 = 1e-10;
const SIGMA: f64 = 1e-12;
const PARAM_BOUND: f64 = 1e6;

/// Negative log-likelihood with Platt's smoothed targets.
pub fn platt_nll(scores: &[f64], labels: &[bool], a: f64, b: f64) -> f64 {
    let (t_pos, t_neg) = smoothed_targets(labels);
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let t = if l { t_pos } else { t_neg };
            let f = a * s + b;
            if f >= 0.0 {
                t * f + (-f).exp().ln_1p()
            } else {
                (t - 1.0) * f + f.exp().ln_1p()
            }
        })
        .sum()
}

fn smoothed_targets(labels: &[bool]) -> (f64, f64) {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    ((n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
}

/// Newton's method with backtracking on the smoothed-target likelihood.
pub fn platt_calibrate(scores: &[f64], labels: &[bool]) -> Result<PlattFit> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "calibration needs both positive and negative examples".into(),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {s}")));
    }
    let (t_pos, t_neg) = smoothed_targets(labels);
    let targets: Vec<f64> = labels.iter().map(|&l| if l { t_pos } else { t_neg }).collect();

    let mut a = 0.0;
    let mut b = ((n_neg as f64 + 1.0) / (n_pos as f64 + 1.0)).ln();
    let mut fval = platt_nll(scores, labels, a, b);
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&targets) {
            let f = a * s + b;
            let (p, q) = if f >= 0.0 {
                let e = (-f).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = f.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += s * s * d2;
            h22 += d2;
            h21 += s * d2;
            let d1 = t - p;
            g1 += s * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut moved = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = platt_nll(scores, labels, na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved {
            break;
        }
    }

    let max_neg = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_pos = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .fold(f64::INFINITY, f64::min);
    let separated = min_pos > max_neg;
    let clamped = a.abs() > PARAM_BOUND || b.abs() > PARAM_BOUND;
    if separated || clamped {
        log::debug!("Platt fit: separated={separated} clamped={clamped} A={a} B={b}");
    }
    Ok(PlattFit {
        params: Platt {
            a: a.clamp(-PARAM_BOUND, PARAM_BOUND),
            b: b.clamp(-PARAM_BOUND, PARAM_BOUND),
        },
        iterations,
        separated,
        clamped,
    })
}
