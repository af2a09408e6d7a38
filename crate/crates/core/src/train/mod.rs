//! Hinge-loss training of rigid templates and supervised star models,
//! regularization cross-validation, calibration and mixture assembly.

mod cv;
mod mining;
mod mixture;
mod platt;
mod star;
mod svm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{convolve, dot, FeatureGrid, WindowDescriptor};
use crate::map::Map2;

pub use cv::{cross_validate_c, cross_validate_mixture, make_folds, CvResult, CvRow};
pub use mining::{train_mined, Miner, MiningReport, RigidMiner};
pub use mixture::{train_mixture, MixtureFit};
pub use platt::{platt_calibrate, platt_nll, Platt, PlattFit};
pub use star::{
    build_edpm, build_epm, exemplar_shapes, star_features, star_skeleton, train_star_model, StarExample,
    StarFit, StarLayout, StarMiner, BETA_INIT,
};
pub use svm::{primal_objective, solve_svm, SvmSettings, SvmSolution};

/// Rigid linear template `w_m` with bias `b_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub platt: Option<Platt>,
    pub mixture_id: usize,
}

impl Template {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.weights.len() != self.h * self.w * self.dim {
            return Err(Error::Model(format!(
                "template {}: {} weights for {}x{}x{}",
                self.mixture_id,
                self.weights.len(),
                self.h,
                self.w,
                self.dim
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("template {} is not finite", self.mixture_id)));
        }
        Ok(())
    }

    /// Raw linear score of a window of this template's shape.
    pub fn raw_score(&self, window: &[f64]) -> f64 {
        dot(&self.weights, window) + self.bias
    }

    /// Calibrated score when calibration is present, raw score otherwise.
    pub fn score(&self, window: &[f64]) -> f64 {
        let s = self.raw_score(window);
        match self.platt {
            Some(p) => p.prob(s),
            None => s,
        }
    }

    /// Raw scores at every valid top-left cell of the grid.
    pub fn score_map(&self, grid: &FeatureGrid) -> Result<Map2<f64>> {
        let mut m = convolve(grid, &self.weights, self.h, self.w)?;
        for v in m.as_mut_slice() {
            *v += self.bias;
        }
        Ok(m)
    }
}

/// Max-over-components detector built from independent templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub templates: Vec<Template>,
    /// Cluster ids that were not trained, with the reason.
    #[serde(default)]
    pub skipped: Vec<(usize, String)>,
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.templates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<usize> = self.templates.iter().map(|t| t.mixture_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Model("duplicate mixture ids".into()));
        }
        self.templates.iter().try_for_each(Template::validate)
    }

    /// `max_m` of the component scores on a window every component fits,
    /// with the winning component (lower index on ties).
    pub fn score_window(&self, window: &[f64]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (m, t) in self.templates.iter().enumerate() {
            if t.weights.len() != window.len() {
                continue;
            }
            let s = t.score(window);
            if best.map_or(true, |(b, _)| s > b) {
                best = Some((s, m));
            }
        }
        best
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub c: f64,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub neg_per_image_cap: usize,
    /// Random negatives drawn per negative image before mining starts.
    pub initial_neg_per_image: usize,
    pub convergence_tol: f64,
    pub max_mining_rounds: usize,
    pub max_epochs: usize,
    pub bias_multiplier: f64,
    /// Clusters with fewer positives are skipped.
    pub min_pos: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 0.01,
            c_grid: Vec::new(),
            folds: 5,
            neg_per_image_cap: 20,
            initial_neg_per_image: 10,
            convergence_tol: 1e-4,
            max_mining_rounds: 10,
            max_epochs: 2000,
            bias_multiplier: 1.0,
            min_pos: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `{0.002, 0.02, 0.2, 2, 20} / feature_dim`.
    pub fn default_c_grid(feature_dim: usize) -> Vec<f64> {
        [0.002, 0.02, 0.2, 2.0, 20.0]
            .iter()
            .map(|c| c / feature_dim as f64)
            .collect()
    }

    /// The configured grid, or the default for `feature_dim` when empty.
    pub fn c_grid_for(&self, feature_dim: usize) -> Vec<f64> {
        if self.c_grid.is_empty() {
            Self::default_c_grid(feature_dim)
        } else {
            self.c_grid.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Validation(format!("C must be positive, got {}", self.c)));
        }
        if self.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Validation("C grid entries must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Validation("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }

    pub fn svm_settings(&self) -> SvmSettings {
        SvmSettings {
            bias_multiplier: self.bias_multiplier,
            tol: self.convergence_tol,
            max_epochs: self.max_epochs,
        }
    }
}

/// Result of [`train_linear`].
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub template: Template,
    pub objective: f64,
    pub converged: bool,
}

fn check_windows(set: &[WindowDescriptor], what: &str) -> Result<(usize, usize, usize)> {
    let first = set
        .first()
        .ok_or_else(|| Error::Data(format!("no {what} examples")))?;
    for w in set {
        if w.shape != first.shape {
            return Err(Error::Data(format!(
                "{what} window shape {:?} differs from {:?}",
                w.shape, first.shape
            )));
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite {what} feature")));
        }
    }
    Ok(first.shape)
}

/// Trains a rigid template on fixed positive and negative windows.
pub fn train_linear(
    pos: &[WindowDescriptor],
    neg: &[WindowDescriptor],
    c: f64,
    settings: &SvmSettings,
) -> Result<LinearFit> {
    let shape = check_windows(pos, "positive")?;
    if check_windows(neg, "negative")? != shape {
        return Err(Error::Data("positive and negative window shapes differ".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Validation(format!("C must be positive, got {c}")));
    }
    let xs: Vec<&[f64]> = pos.iter().chain(neg).map(|w| w.values.as_slice()).collect();
    let ys: Vec<f64> = pos
        .iter()
        .map(|_| 1.0)
        .chain(neg.iter().map(|_| -1.0))
        .collect();
    let sol = solve_svm(&xs, &ys, &vec![c; xs.len()], settings, None);
    Ok(LinearFit {
        template: Template {
            h: shape.0,
            w: shape.1,
            dim: shape.2,
            weights: sol.w,
            bias: sol.bias,
            platt: None,
            mixture_id: 0,
        },
        objective: sol.primal,
        converged: sol.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wd(v: Vec<f64>) -> WindowDescriptor {
        let n = v.len();
        WindowDescriptor::new(v, (1, 1, n)).unwrap()
    }

    /// Projected accelerated gradient ascent on the SVM dual, run to high
    /// accuracy; returns the primal objective of the recovered `(w, b)`.
    fn dual_qp_oracle(xs: &[Vec<f64>], ys: &[f64], c: f64, bm: f64) -> f64 {
        let n = xs.len();
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let k: f64 = xs[i].iter().zip(&xs[j]).map(|(a, b)| a * b).sum();
                        ys[i] * ys[j] * (k + bm * bm)
                    })
                    .collect()
            })
            .collect();
        // Lipschitz bound: Frobenius norm
        let lip: f64 = q.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut a = vec![0.0; n];
        let mut y = a.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let grad: Vec<f64> = (0..n)
                .map(|i| 1.0 - (0..n).map(|j| q[i][j] * y[j]).sum::<f64>())
                .collect();
            let next: Vec<f64> = (0..n).map(|i| (y[i] + grad[i] / lip).clamp(0.0, c)).collect();
            let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = (0..n).map(|i| next[i] + (t - 1.0) / tn * (next[i] - a[i])).collect();
            a = next;
            t = tn;
        }
        let d = xs[0].len();
        let mut w = vec![0.0; d];
        let mut wb = 0.0;
        for i in 0..n {
            for k in 0..d {
                w[k] += a[i] * ys[i] * xs[i][k];
            }
            wb += a[i] * ys[i] * bm;
        }
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        primal_objective(&w, wb * bm, bm, &refs, ys, &vec![c; n])
    }

    #[test]
    fn symmetric_points() {
        let fit = train_linear(
            &[wd(vec![1.0])],
            &[wd(vec![-1.0])],
            100.0,
            &SvmSettings::default(),
        )
        .unwrap();
        let t = &fit.template;
        assert!(t.bias.abs() < 1e-6);
        assert!(t.raw_score(&[1.0]) > 0.0 && t.raw_score(&[-1.0]) < 0.0);
    }

    #[test]
    fn objective_matches_generic_qp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| if x[0] - 0.5 * x[2] + rng.gen_range(-0.3..0.3) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let pos: Vec<_> = xs.iter().zip(&ys).filter(|(_, &y)| y > 0.0).map(|(x, _)| wd(x.clone())).collect();
        let neg: Vec<_> = xs.iter().zip(&ys).filter(|(_, &y)| y < 0.0).map(|(x, _)| wd(x.clone())).collect();
        let settings = SvmSettings { tol: 1e-9, max_epochs: 100_000, ..SvmSettings::default() };
        let fit = train_linear(&pos, &neg, 1.0, &settings).unwrap();
        let oracle = dual_qp_oracle(&xs, &ys, 1.0, settings.bias_multiplier);
        assert!(
            (fit.objective - oracle).abs() <= 1e-4 * oracle,
            "{} vs {}",
            fit.objective,
            oracle
        );
    }

    #[test]
    fn duplicated_positives_with_halved_cost_give_same_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| if x[1] > 0.1 { 1.0 } else { -1.0 }).collect();
        let settings = SvmSettings { tol: 1e-12, max_epochs: 200_000, ..SvmSettings::default() };
        let c = 0.5;
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let base = solve_svm(&refs, &ys, &vec![c; 30], &settings, None);

        // every positive twice at C/2, negatives untouched
        let mut dx = Vec::new();
        let mut dy = Vec::new();
        let mut dc = Vec::new();
        for (x, &y) in refs.iter().zip(&ys) {
            let copies = if y > 0.0 { 2 } else { 1 };
            for _ in 0..copies {
                dx.push(*x);
                dy.push(y);
                dc.push(if y > 0.0 { c / 2.0 } else { c });
            }
        }
        let dup = solve_svm(&dx, &dy, &dc, &settings, None);
        for (a, b) in base.w.iter().zip(&dup.w) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((base.bias - dup.bias).abs() < 1e-6);

        // every example twice with C halved
        let all_x: Vec<&[f64]> = refs.iter().flat_map(|x| [*x, *x]).collect();
        let all_y: Vec<f64> = ys.iter().flat_map(|&y| [y, y]).collect();
        let twice = solve_svm(&all_x, &all_y, &vec![c / 2.0; 60], &settings, None);
        for (a, b) in base.w.iter().zip(&twice.w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn input_checks() {
        let s = SvmSettings::default();
        assert!(train_linear(&[], &[wd(vec![1.0])], 1.0, &s).is_err());
        assert!(train_linear(&[wd(vec![f64::NAN])], &[wd(vec![1.0])], 1.0, &s).is_err());
        assert!(train_linear(&[wd(vec![1.0, 2.0])], &[wd(vec![1.0])], 1.0, &s).is_err());
    }

    #[test]
    fn mixture_score_is_max_of_components() {
        let t = |id, w: Vec<f64>, p| Template { h: 1, w: 1, dim: 2, weights: w, bias: 0.1, platt: Some(p), mixture_id: id };
        let m = MixtureModel {
            templates: vec![
                t(0, vec![1.0, -1.0], Platt { a: -2.0, b: 0.5 }),
                t(1, vec![-1.0, 2.0], Platt { a: -1.0, b: -0.3 }),
            ],
            skipped: vec![],
        };
        m.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (s, _) = m.score_window(&x).unwrap();
            assert!(m.templates.iter().all(|t| s >= t.score(&x)));
        }
    }

    #[test]
    fn default_grid_scales_with_dimension() {
        let g = TrainConfig::default_c_grid(100);
        assert_eq!(g.len(), 5);
        assert!((g[3] - 0.02).abs() < 1e-15);
    }
}
