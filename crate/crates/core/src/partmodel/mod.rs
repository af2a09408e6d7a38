//! Star-structured part models and their inference.
//!
//! A [`StarModel`] holds shared part filters (part 0 is the root), one
//! quadratic spring per non-root part and a shape variant:
//!
//! * DPM: a single anchor set; parts deform around it.
//! * EPM: only the exemplar part layouts seen in training are allowed, each
//!   scored with the DPM shape term.
//! * EDPM: one anchor set per exemplar, all sharing filters and springs.
//!
//! Deformation is `psi(dx, dy) = (-dx^2, -dy^2)`, so a spring contributes
//! `-(beta_x dx^2) - beta_y dy^2` for a displacement `(dy, dx)` from its anchor.
//!
//! A root location is admissible for an anchor set only when every anchored
//! part position lies inside that part's valid placement range; inadmissible
//! root locations score `-inf`. The brute-force oracles apply the same rule.

mod brute;
mod dt;
mod score;
mod shape;
mod synth;

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Platt;

pub use brute::{score_bruteforce, BRUTE_FORCE_LIMIT};
pub use dt::{dt_2d, dt_call_count, gdt_1d, reset_dt_call_count, MessageMap};
pub use score::{
    part_responses, score_dpm, score_edpm, score_edpm_per_mixture, score_epm, score_star,
    DpmScore, EdpmScore, EpmScore, StarScore,
};
pub use shape::{quantize_shape, shape_score, shape_score_dpm, shape_score_edpm, shape_score_epm, exact_match_mask};
pub use synth::{synthesize_template, SynthTemplate};

/// Lower bound applied to learned spring coefficients.
pub const BETA_MIN: f64 = 1e-3;

/// Cell position `(row, col)` at one pyramid level, or an offset between two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: i64,
    pub col: i64,
}

impl Pos {
    pub const fn new(row: i64, col: i64) -> Self {
        Self { row, col }
    }
}

impl Add for Pos {
    type Output = Pos;
    fn add(self, o: Pos) -> Pos {
        Pos::new(self.row + o.row, self.col + o.col)
    }
}

impl Sub for Pos {
    type Output = Pos;
    fn sub(self, o: Pos) -> Pos {
        Pos::new(self.row - o.row, self.col - o.col)
    }
}

/// Appearance filter of one part over an `h x w` cell window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartFilter {
    pub h: usize,
    pub w: usize,
    pub weights: Vec<f64>,
}

impl PartFilter {
    pub fn new(h: usize, w: usize, weights: Vec<f64>) -> Self {
        Self { h, w, weights }
    }

    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self {
            h,
            w,
            weights: vec![0.0; h * w * dim],
        }
    }
}

/// Quadratic spring coefficients along x (columns) and y (rows).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub bx: f64,
    pub by: f64,
}

impl Spring {
    pub const fn new(bx: f64, by: f64) -> Self {
        Self { bx, by }
    }

    /// `beta . psi(d)`, grouped as `(value - bx dx^2) - by dy^2`.
    #[inline]
    pub fn apply(&self, value: f64, d: Pos) -> f64 {
        (value - self.bx * (d.col * d.col) as f64) - self.by * (d.row * d.row) as f64
    }
}

/// Anchor offsets `a_1j` of the non-root parts relative to the root.
pub type AnchorSet = Vec<Pos>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeModel {
    Dpm,
    Epm { exemplars: Vec<AnchorSet> },
    Edpm { exemplars: Vec<AnchorSet> },
}

impl ShapeModel {
    pub fn tag(&self) -> &'static str {
        match self {
            ShapeModel::Dpm => "dpm",
            ShapeModel::Epm { .. } => "epm",
            ShapeModel::Edpm { .. } => "edpm",
        }
    }
}

/// Star-structured part model; `parts[0]` is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarModel {
    pub dim: usize,
    pub parts: Vec<PartFilter>,
    /// `springs[j - 1]` belongs to part `j`.
    pub springs: Vec<Spring>,
    /// Single-anchor (DPM) offsets; `anchors[j - 1]` belongs to part `j`.
    pub anchors: AnchorSet,
    pub shape: ShapeModel,
    pub bias: f64,
    pub platt: Option<Platt>,
}

/// Locations of all parts, root first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement(pub Vec<Pos>);

impl Placement {
    pub fn root(&self) -> Pos {
        self.0[0]
    }

    /// Part offsets relative to the root (non-root parts only).
    pub fn relative(&self) -> AnchorSet {
        let root = self.root();
        self.0[1..].iter().map(|&p| p - root).collect()
    }

    pub fn from_root_and_offsets(root: Pos, offsets: &[Pos]) -> Self {
        let mut v = Vec::with_capacity(offsets.len() + 1);
        v.push(root);
        v.extend(offsets.iter().map(|&o| root + o));
        Placement(v)
    }
}

impl StarModel {
    /// Validates structure and builds a model.
    pub fn new(
        dim: usize,
        parts: Vec<PartFilter>,
        springs: Vec<Spring>,
        anchors: AnchorSet,
        shape: ShapeModel,
    ) -> Result<Self> {
        let model = Self {
            dim,
            parts,
            springs,
            anchors,
            shape,
            bias: 0.0,
            platt: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn root(&self) -> &PartFilter {
        &self.parts[0]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.parts.len();
        if p == 0 {
            return Err(Error::Model("star model needs a root filter".into()));
        }
        for (i, part) in self.parts.iter().enumerate() {
            if part.h == 0 || part.w == 0 || part.weights.len() != part.h * part.w * self.dim {
                return Err(Error::Model(format!(
                    "part {i}: {} weights for {}x{}x{}",
                    part.weights.len(),
                    part.h,
                    part.w,
                    self.dim
                )));
            }
            if part.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Model(format!("part {i} has non-finite weights")));
            }
        }
        if self.springs.len() != p - 1 || self.anchors.len() != p - 1 {
            return Err(Error::Model(format!(
                "{p} parts need {} springs and anchors, got {} and {}",
                p - 1,
                self.springs.len(),
                self.anchors.len()
            )));
        }
        for s in &self.springs {
            if !(s.bx >= 0.0 && s.by >= 0.0) {
                return Err(Error::Model(format!("negative spring {s:?}")));
            }
        }
        match &self.shape {
            ShapeModel::Dpm => {}
            ShapeModel::Epm { exemplars } | ShapeModel::Edpm { exemplars } => {
                if exemplars.is_empty() {
                    return Err(Error::Model("exemplar shape model has no exemplars".into()));
                }
                if let Some(bad) = exemplars.iter().find(|e| e.len() != p - 1) {
                    return Err(Error::Model(format!(
                        "exemplar anchor set has {} offsets, expected {}",
                        bad.len(),
                        p - 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Anchor sets scored by the DP: the DPM anchors or one per exemplar.
    pub fn anchor_sets(&self) -> Vec<&AnchorSet> {
        match &self.shape {
            ShapeModel::Dpm => vec![&self.anchors],
            ShapeModel::Epm { exemplars } | ShapeModel::Edpm { exemplars } => {
                exemplars.iter().collect()
            }
        }
    }

    pub fn num_mixtures(&self) -> usize {
        match &self.shape {
            ShapeModel::Dpm => 1,
            ShapeModel::Epm { exemplars } | ShapeModel::Edpm { exemplars } => exemplars.len(),
        }
    }

    pub fn with_shape(&self, shape: ShapeModel) -> Result<Self> {
        let mut m = self.clone();
        m.shape = shape;
        m.validate()?;
        Ok(m)
    }

    /// Number of valid top-left positions of part `i` on a `rows x cols` grid.
    pub(crate) fn domain(&self, i: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let p = &self.parts[i];
        if p.h > rows || p.w > cols {
            None
        } else {
            Some((rows - p.h + 1, cols - p.w + 1))
        }
    }

    /// Whether every part window of `z` lies inside a `rows x cols` grid.
    pub fn placement_in_bounds(&self, z: &Placement, rows: usize, cols: usize) -> bool {
        z.0.len() == self.parts.len()
            && z.0.iter().zip(&self.parts).all(|(p, f)| {
                p.row >= 0
                    && p.col >= 0
                    && p.row as usize + f.h <= rows
                    && p.col as usize + f.w <= cols
            })
    }
}
