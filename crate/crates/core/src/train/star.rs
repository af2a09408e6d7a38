//! Supervised-parts training of star models and exemplar variants.
//!
//! Positive feature vectors are taken at annotated placements; negatives are
//! mined at the model's own best placement, so the problem is a convex SVM in
//! `(filters, springs, bias)` for fixed positive placements.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mining::{top_candidates, train_mined, Candidate, Miner, MiningReport};
use super::platt::platt_calibrate;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{dot, extract_window, FeatureGrid};
use crate::partmodel::{
    quantize_shape, score_dpm, AnchorSet, PartFilter, Placement, Pos, ShapeModel, Spring,
    StarModel, BETA_MIN,
};

/// Initial spring coefficient per quadratic coordinate.
pub const BETA_INIT: f64 = 0.05;

/// Filter sizes of a star model, root first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarLayout {
    pub root: (usize, usize),
    pub parts: Vec<(usize, usize)>,
}

/// One annotated positive: the grid it lives in and its part placement.
#[derive(Clone, Copy, Debug)]
pub struct StarExample<'a> {
    pub grid: &'a FeatureGrid,
    pub placement: &'a Placement,
}

/// `[root window, part windows, (-dx^2, -dy^2) per part]` for placement `z`,
/// displacements measured from the model's single anchor set. Dotted with
/// the model weights this equals the part-model score of `z` (without bias).
pub fn star_features(model: &StarModel, grid: &FeatureGrid, z: &Placement) -> Result<Vec<f64>> {
    if !model.placement_in_bounds(z, grid.rows(), grid.cols()) {
        return Err(Error::Range(format!("placement {z:?} leaves the grid")));
    }
    let mut out = Vec::with_capacity(feature_len(model));
    for (p, f) in z.0.iter().zip(&model.parts) {
        let win = extract_window(grid, (p.row as usize, p.col as usize), f.h, f.w)?;
        out.extend_from_slice(&win.values);
    }
    let root = z.root();
    for (j, a) in model.anchors.iter().enumerate() {
        let d = z.0[j + 1] - root - *a;
        out.push(-((d.col * d.col) as f64));
        out.push(-((d.row * d.row) as f64));
    }
    Ok(out)
}

fn feature_len(model: &StarModel) -> usize {
    model.parts.iter().map(|p| p.weights.len()).sum::<usize>() + 2 * model.springs.len()
}

fn model_from_weights(skeleton: &StarModel, w: &[f64], bias: f64) -> StarModel {
    let mut m = skeleton.clone();
    let mut at = 0;
    for p in &mut m.parts {
        let n = p.weights.len();
        p.weights.copy_from_slice(&w[at..at + n]);
        at += n;
    }
    for s in &mut m.springs {
        *s = Spring::new(w[at], w[at + 1]);
        at += 2;
    }
    m.bias = bias;
    m
}

/// Mines negatives at the DPM's best placement per root location.
pub struct StarMiner {
    skeleton: StarModel,
}

impl StarMiner {
    pub fn new(skeleton: StarModel) -> Self {
        Self { skeleton }
    }

    /// Root locations at which every anchored part fits.
    fn admissible(&self, grid: &FeatureGrid) -> Option<(i64, i64, i64, i64)> {
        let m = &self.skeleton;
        let root = &m.parts[0];
        if root.h > grid.rows() || root.w > grid.cols() {
            return None;
        }
        let (mut r0, mut r1) = (0i64, (grid.rows() - root.h) as i64);
        let (mut c0, mut c1) = (0i64, (grid.cols() - root.w) as i64);
        for (f, a) in m.parts[1..].iter().zip(&m.anchors) {
            r0 = r0.max(-a.row);
            c0 = c0.max(-a.col);
            r1 = r1.min(grid.rows() as i64 - f.h as i64 - a.row);
            c1 = c1.min(grid.cols() as i64 - f.w as i64 - a.col);
        }
        (r0 <= r1 && c0 <= c1).then_some((r0, r1, c0, c1))
    }
}

impl Miner for StarMiner {
    fn feature_len(&self) -> usize {
        feature_len(&self.skeleton)
    }

    fn random_negatives(
        &self,
        grid: &FeatureGrid,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Candidate>> {
        let Some((r0, r1, c0, c1)) = self.admissible(grid) else {
            return Ok(Vec::new());
        };
        (0..count)
            .map(|_| {
                let r = rng.gen_range(r0..=r1);
                let c = rng.gen_range(c0..=c1);
                let z = Placement::from_root_and_offsets(Pos::new(r, c), &self.skeleton.anchors);
                Ok(Candidate {
                    key: z.0.iter().flat_map(|p| [p.row, p.col]).collect(),
                    score: 0.0,
                    features: star_features(&self.skeleton, grid, &z)?,
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
        let model = model_from_weights(&self.skeleton, w, bias);
        if model.parts.iter().any(|p| p.h > grid.rows() || p.w > grid.cols()) {
            return Ok((0.0, Vec::new()));
        }
        let s = score_dpm(&model, grid)?;
        let mut scored = Vec::new();
        let mut hinge = 0.0;
        for r in 0..s.scores.rows() {
            for c in 0..s.scores.cols() {
                let v = s.scores.get(r, c);
                if v.is_finite() {
                    let v = v + bias;
                    hinge += (1.0 + v).max(0.0);
                    scored.push((v, vec![r as i64, c as i64]));
                }
            }
        }
        let top = top_candidates(&scored, cap)
            .into_iter()
            .map(|i| {
                let (v, key) = &scored[i];
                let z = s
                    .placement(key[0] as usize, key[1] as usize)
                    .expect("finite score has a placement");
                Ok(Candidate {
                    key: z.0.iter().flat_map(|p| [p.row, p.col]).collect(),
                    score: *v,
                    features: star_features(&model, grid, &z)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((hinge, top))
    }

    fn project(&self, w: &mut [f64]) {
        let start = w.len() - 2 * self.skeleton.springs.len();
        for b in &mut w[start..] {
            *b = b.max(BETA_MIN);
        }
    }
}

#[derive(Clone, Debug)]
pub struct StarFit {
    pub model: StarModel,
    pub report: MiningReport,
}

/// Mean annotated offset of each part, rounded to cells.
fn mean_anchors(examples: &[StarExample<'_>], parts: usize) -> AnchorSet {
    (1..parts)
        .map(|j| {
            let (mut sr, mut sc) = (0.0, 0.0);
            for e in examples {
                let d = e.placement.0[j] - e.placement.root();
                sr += d.row as f64;
                sc += d.col as f64;
            }
            let n = examples.len() as f64;
            Pos::new((sr / n).round() as i64, (sc / n).round() as i64)
        })
        .collect()
}

/// Zero-weight DPM with `layout`'s filters, initial springs and anchors at
/// the rounded mean annotated offset. Checks that every annotated part lies
/// inside the root box.
pub fn star_skeleton(examples: &[StarExample<'_>], layout: &StarLayout) -> Result<StarModel> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Data("no annotated positives".into()))?;
    let dim = first.grid.dim();
    let p = layout.parts.len() + 1;
    let (rh, rw) = layout.root;
    for (i, e) in examples.iter().enumerate() {
        if e.placement.0.len() != p {
            return Err(Error::InvalidAnnotation(format!(
                "example {i} annotates {} parts, layout has {p}",
                e.placement.0.len()
            )));
        }
        let root = e.placement.root();
        for (j, (&(h, w), q)) in layout.parts.iter().zip(&e.placement.0[1..]).enumerate() {
            let d = *q - root;
            if d.row < 0 || d.col < 0 || d.row as usize + h > rh || d.col as usize + w > rw {
                return Err(Error::InvalidAnnotation(format!(
                    "example {i}: part {} at offset {d:?} leaves the {rh}x{rw} box",
                    j + 1
                )));
            }
        }
    }
    let mut parts = vec![PartFilter::zeros(rh, rw, dim)];
    parts.extend(layout.parts.iter().map(|&(h, w)| PartFilter::zeros(h, w, dim)));
    StarModel::new(
        dim,
        parts,
        vec![Spring::new(BETA_INIT, BETA_INIT); p - 1],
        mean_anchors(examples, p),
        ShapeModel::Dpm,
    )
}

/// Trains a DPM-variant star model from annotated part placements.
pub fn train_star_model(
    examples: &[StarExample<'_>],
    layout: &StarLayout,
    neg_grids: &[FeatureGrid],
    c: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StarFit> {
    let skeleton = star_skeleton(examples, layout)?;
    let positives: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| star_features(&skeleton, e.grid, e.placement))
        .collect::<Result<_>>()?;
    let miner = StarMiner::new(skeleton.clone());
    let report = train_mined(&miner, &positives, neg_grids, c, config, rng)?;
    let mut model = model_from_weights(&skeleton, &report.w, report.bias);

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for x in &positives {
        scores.push(dot(&report.w, x) + report.bias);
        labels.push(true);
    }
    for x in &report.negatives {
        scores.push(dot(&report.w, x) + report.bias);
        labels.push(false);
    }
    model.platt = Some(platt_calibrate(&scores, &labels)?.params);
    Ok(StarFit { model, report })
}

/// Distinct quantized exemplar layouts, in order of first appearance.
/// Offsets are snapped to the centre of their `q`-cell bin.
pub fn exemplar_shapes(placements: &[Placement], q: f64) -> Result<Vec<AnchorSet>> {
    if placements.is_empty() {
        return Err(Error::Data("no exemplar placements".into()));
    }
    if !(q > 0.0) {
        return Err(Error::Validation(format!("quantization bin must be positive, got {q}")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for z in placements {
        let bins = quantize_shape(&z.relative(), q);
        if seen.insert(bins.clone()) {
            out.push(
                bins.iter()
                    .map(|b| Pos::new((b.row as f64 * q).round() as i64, (b.col as f64 * q).round() as i64))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// EDPM sharing the star model's filters and springs, one anchor set per
/// distinct training layout.
pub fn build_edpm(star: &StarModel, placements: &[Placement], q: f64) -> Result<StarModel> {
    star.with_shape(ShapeModel::Edpm {
        exemplars: exemplar_shapes(placements, q)?,
    })
}

/// EPM restricted to the distinct training layouts.
pub fn build_epm(star: &StarModel, placements: &[Placement], q: f64) -> Result<StarModel> {
    star.with_shape(ShapeModel::Epm {
        exemplars: exemplar_shapes(placements, q)?,
    })
}
