//! L1-loss linear SVM trained by dual coordinate descent.
//!
//! Minimizes `1/2 (|w|^2 + w_b^2) + sum_i C_i max(0, 1 - y_i (w . x_i + w_b B))`
//! where `B` is the bias multiplier, so the learned bias is `b = w_b B`. A
//! large multiplier makes the bias penalty negligible but slows convergence
//! when feature norms are small.

use serde::{Deserialize, Serialize};

use crate::features::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmSettings {
    pub bias_multiplier: f64,
    /// Stop once the duality gap is below `tol * max(1, primal)`.
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmSettings {
    fn default() -> Self {
        Self {
            bias_multiplier: 1.0,
            tol: 1e-6,
            max_epochs: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub bias: f64,
    pub alpha: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
    pub epochs: usize,
    pub converged: bool,
}

impl SvmSolution {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.bias
    }

    pub fn duality_gap(&self) -> f64 {
        self.primal - self.dual
    }
}

/// Primal objective of `(w, bias)` on a weighted example set.
pub fn primal_objective(
    w: &[f64],
    bias: f64,
    bias_multiplier: f64,
    xs: &[&[f64]],
    ys: &[f64],
    costs: &[f64],
) -> f64 {
    let wb = bias / bias_multiplier;
    let reg = 0.5 * (dot(w, w) + wb * wb);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .zip(costs)
        .map(|((x, &y), &c)| c * (1.0 - y * (dot(w, x) + bias)).max(0.0))
        .sum();
    reg + loss
}

/// Solves the SVM over examples `xs` with labels `ys` (+1 / -1) and
/// per-example costs. `init_alpha` warm-starts the dual variables (clamped
/// into their boxes). Examples are visited in input order every epoch.
pub fn solve_svm(
    xs: &[&[f64]],
    ys: &[f64],
    costs: &[f64],
    settings: &SvmSettings,
    init_alpha: Option<&[f64]>,
) -> SvmSolution {
    let n = xs.len();
    assert_eq!(ys.len(), n);
    assert_eq!(costs.len(), n);
    let d = xs.first().map_or(0, |x| x.len());
    let bm = settings.bias_multiplier;

    let mut alpha: Vec<f64> = match init_alpha {
        Some(a) => a.iter().zip(costs).map(|(&v, &c)| v.clamp(0.0, c)).collect(),
        None => vec![0.0; n],
    };
    let mut w = vec![0.0; d];
    let mut wb = 0.0;
    for i in 0..n {
        if alpha[i] != 0.0 {
            let s = alpha[i] * ys[i];
            for (wk, xk) in w.iter_mut().zip(xs[i]) {
                *wk += s * xk;
            }
            wb += s * bm;
        }
    }
    let qii: Vec<f64> = xs.iter().map(|x| dot(x, x) + bm * bm).collect();

    let mut epochs = 0;
    let mut converged = false;
    let (mut primal, mut dual) = (f64::INFINITY, f64::NEG_INFINITY);
    while epochs < settings.max_epochs {
        epochs += 1;
        for i in 0..n {
            if qii[i] <= 0.0 {
                continue;
            }
            let y = ys[i];
            let g = y * (dot(&w, xs[i]) + wb * bm) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= costs[i] {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() > 1e-14 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, costs[i]);
                let delta = (alpha[i] - old) * y;
                if delta != 0.0 {
                    for (wk, xk) in w.iter_mut().zip(xs[i]) {
                        *wk += delta * xk;
                    }
                    wb += delta * bm;
                }
            }
        }
        let bias = wb * bm;
        primal = primal_objective(&w, bias, bm, xs, ys, costs);
        dual = alpha.iter().sum::<f64>() - 0.5 * (dot(&w, &w) + wb * wb);
        if primal - dual <= settings.tol * primal.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "SVM stopped after {epochs} epochs with duality gap {:.3e}",
            primal - dual
        );
    }
    SvmSolution {
        w,
        bias: wb * bm,
        alpha,
        primal,
        dual,
        epochs,
        converged,
    }
}
