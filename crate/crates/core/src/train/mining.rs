//! Hard-negative mining around the SVM solver.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::svm::{primal_objective, solve_svm, SvmSolution};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{convolve, extract_window, FeatureGrid};

/// A negative candidate found in one image.
#[derive(Clone, Debug)]
pub struct Candidate {
    /// Identifies the window (and latent placement) within its image.
    pub key: Vec<i64>,
    pub score: f64,
    pub features: Vec<f64>,
}

/// Everything the mining loop needs to know about one model family.
pub trait Miner {
    fn feature_len(&self) -> usize;

    /// `count` random negative windows of one image.
    fn random_negatives(
        &self,
        grid: &FeatureGrid,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Candidate>>;

    /// Scores every window of `grid` under `(w, bias)`. Returns the hinge sum
    /// `sum max(0, 1 + s)` over all windows and the top `cap` windows with
    /// `s > -1`, best first (raster order on ties).
    fn harvest(&self, w: &[f64], bias: f64, grid: &FeatureGrid, cap: usize)
        -> Result<(f64, Vec<Candidate>)>;

    /// Projection applied to the weights after each solve.
    fn project(&self, _w: &mut [f64]) {}
}

/// Sliding rigid template of a fixed shape.
#[derive(Clone, Copy, Debug)]
pub struct RigidMiner {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

pub(crate) fn top_candidates(scores: &[(f64, Vec<i64>)], cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].0 > -1.0).collect();
    idx.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));
    idx.truncate(cap);
    idx
}

impl Miner for RigidMiner {
    fn feature_len(&self) -> usize {
        self.h * self.w * self.dim
    }

    fn random_negatives(
        &self,
        grid: &FeatureGrid,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Candidate>> {
        if grid.rows() < self.h || grid.cols() < self.w {
            return Ok(Vec::new());
        }
        (0..count)
            .map(|_| {
                let r = rng.gen_range(0..=grid.rows() - self.h);
                let c = rng.gen_range(0..=grid.cols() - self.w);
                Ok(Candidate {
                    key: vec![r as i64, c as i64],
                    score: 0.0,
                    features: extract_window(grid, (r, c), self.h, self.w)?.values,
                })
            })
            .collect()
    }

    fn harvest(
        &self,
        w: &[f64],
        bias: f64,
        grid: &FeatureGrid,
        cap: usize,
    ) -> Result<(f64, Vec<Candidate>)> {
        if grid.rows() < self.h || grid.cols() < self.w {
            return Ok((0.0, Vec::new()));
        }
        let map = convolve(grid, w, self.h, self.w)?;
        let mut scored = Vec::with_capacity(map.rows() * map.cols());
        let mut hinge = 0.0;
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                let s = map.get(r, c) + bias;
                hinge += (1.0 + s).max(0.0);
                scored.push((s, vec![r as i64, c as i64]));
            }
        }
        let top = top_candidates(&scored, cap)
            .into_iter()
            .map(|i| {
                let (s, key) = &scored[i];
                let (r, c) = (key[0] as usize, key[1] as usize);
                Ok(Candidate {
                    key: key.clone(),
                    score: *s,
                    features: extract_window(grid, (r, c), self.h, self.w)?.values,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((hinge, top))
    }
}

/// Outcome of a mined training run.
#[derive(Clone, Debug)]
pub struct MiningReport {
    pub solution: SvmSolution,
    /// Final (projected) weights and bias.
    pub w: Vec<f64>,
    pub bias: f64,
    /// Negatives in the final working set.
    pub negatives: Vec<Vec<f64>>,
    /// Objective on the working set after each round's solve.
    pub working_objectives: Vec<f64>,
    /// Objective over positives and every window of every negative image.
    pub full_objectives: Vec<f64>,
    pub rounds: usize,
    /// Mining stopped because no new margin violators were found.
    pub converged: bool,
}

/// Trains with a growing cache of hard negatives: solve on positives plus the
/// cache (warm-started), harvest margin violators from every negative image,
/// repeat until nothing new is found or the round limit is hit.
pub fn train_mined(
    miner: &dyn Miner,
    positives: &[Vec<f64>],
    neg_grids: &[FeatureGrid],
    c: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MiningReport> {
    let len = miner.feature_len();
    if positives.is_empty() {
        return Err(Error::Data("no positive examples".into()));
    }
    if let Some(p) = positives.iter().find(|p| p.len() != len) {
        return Err(Error::Data(format!(
            "positive feature length {} differs from {len}",
            p.len()
        )));
    }
    if positives.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite positive feature".into()));
    }
    let mut seen: HashSet<(usize, Vec<i64>)> = HashSet::new();
    let mut negatives: Vec<Vec<f64>> = Vec::new();
    for (i, g) in neg_grids.iter().enumerate() {
        for cand in miner.random_negatives(g, config.initial_neg_per_image, rng)? {
            if seen.insert((i, cand.key)) {
                negatives.push(cand.features);
            }
        }
    }
    if negatives.is_empty() {
        return Err(Error::Data("no negative windows available".into()));
    }

    let settings = config.svm_settings();
    let bm = settings.bias_multiplier;
    let mut alpha: Vec<f64> = Vec::new();
    let mut working = Vec::new();
    let mut full = Vec::new();
    let mut rounds = 0;
    let mut converged = false;
    loop {
        rounds += 1;
        let xs: Vec<&[f64]> = positives
            .iter()
            .chain(&negatives)
            .map(|v| v.as_slice())
            .collect();
        let ys: Vec<f64> = (0..xs.len())
            .map(|i| if i < positives.len() { 1.0 } else { -1.0 })
            .collect();
        let costs = vec![c; xs.len()];
        alpha.resize(xs.len(), 0.0);
        let sol = solve_svm(&xs, &ys, &costs, &settings, Some(&alpha));
        alpha = sol.alpha.clone();
        let mut w = sol.w.clone();
        miner.project(&mut w);
        let bias = sol.bias;
        working.push(primal_objective(&w, bias, bm, &xs, &ys, &costs));

        let wb = bias / bm;
        let mut total = 0.5 * (crate::features::dot(&w, &w) + wb * wb);
        for p in positives {
            total += c * (1.0 - (crate::features::dot(&w, p) + bias)).max(0.0);
        }
        let mut fresh = Vec::new();
        for (i, g) in neg_grids.iter().enumerate() {
            let (hinge, top) = miner.harvest(&w, bias, g, config.neg_per_image_cap)?;
            total += c * hinge;
            for cand in top {
                if seen.insert((i, cand.key)) {
                    fresh.push(cand.features);
                }
            }
        }
        full.push(total);
        log::debug!(
            "mining round {rounds}: working {:.6}, full {:.6}, {} new negatives",
            working.last().unwrap(),
            total,
            fresh.len()
        );
        if fresh.is_empty() {
            converged = true;
        }
        if converged || rounds >= config.max_mining_rounds {
            return Ok(MiningReport {
                solution: sol,
                w,
                bias,
                negatives,
                working_objectives: working,
                full_objectives: full,
                rounds,
                converged,
            });
        }
        negatives.extend(fresh);
    }
}
