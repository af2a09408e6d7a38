//! Rigid template equivalent to one part configuration.

use super::{shape_score, Placement, Pos, StarModel};
use crate::error::{Error, Result};
use crate::features::{window_dot, FeatureGrid};

/// Rigid template `w(z)` with bias `b(z)`, positioned at `origin` in the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTemplate {
    pub origin: Pos,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SynthTemplate {
    /// `w(z) . phi(I) + b(z)`; `None` when the template leaves the grid.
    pub fn score(&self, grid: &FeatureGrid) -> Option<f64> {
        grid.contains_window(self.origin.row, self.origin.col, self.h, self.w)
            .then(|| {
                window_dot(
                    grid,
                    &self.weights,
                    self.origin.row as usize,
                    self.origin.col as usize,
                    self.h,
                    self.w,
                ) + self.bias
            })
    }

    /// Template coefficients at cell `(row, col)` relative to `origin`.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.w + col) * self.dim;
        &self.weights[start..start + self.dim]
    }
}

/// Sums the part filters at their placed positions (zero outside each
/// filter's own extent) and takes the variant's shape score as bias.
pub fn synthesize_template(model: &StarModel, z: &Placement) -> Result<SynthTemplate> {
    if z.0.len() != model.parts.len() {
        return Err(Error::Model(format!(
            "placement has {} parts, model has {}",
            z.0.len(),
            model.parts.len()
        )));
    }
    let top = z.0.iter().map(|p| p.row).min().unwrap_or(0);
    let left = z.0.iter().map(|p| p.col).min().unwrap_or(0);
    let bottom = z
        .0
        .iter()
        .zip(&model.parts)
        .map(|(p, f)| p.row + f.h as i64)
        .max()
        .unwrap_or(0);
    let right = z
        .0
        .iter()
        .zip(&model.parts)
        .map(|(p, f)| p.col + f.w as i64)
        .max()
        .unwrap_or(0);
    let h = (bottom - top) as usize;
    let w = (right - left) as usize;
    let dim = model.dim;
    let mut weights = vec![0.0; h * w * dim];
    for (p, f) in z.0.iter().zip(&model.parts) {
        let (oy, ox) = ((p.row - top) as usize, (p.col - left) as usize);
        for r in 0..f.h {
            for c in 0..f.w {
                let dst = ((oy + r) * w + ox + c) * dim;
                let src = (r * f.w + c) * dim;
                for d in 0..dim {
                    weights[dst + d] += f.weights[src + d];
                }
            }
        }
    }
    Ok(SynthTemplate {
        origin: Pos::new(top, left),
        h,
        w,
        dim,
        weights,
        bias: shape_score(model, z),
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{PartFilter, ShapeModel, Spring};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_root_is_its_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 1, 3);
        let t = synthesize_template(&model, &Placement(vec![Pos::new(0, 0)])).unwrap();
        assert_eq!(t.weights, model.parts[0].weights);
        assert_eq!(t.bias, 0.0);
        assert_eq!(t.origin, Pos::new(0, 0));
    }

    #[test]
    fn overlapping_parts_add() {
        let root = PartFilter::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let part = PartFilter::new(1, 1, vec![10.0]);
        let model = StarModel::new(
            1,
            vec![root, part],
            vec![Spring::new(1.0, 1.0)],
            vec![Pos::new(1, 1)],
            ShapeModel::Dpm,
        )
        .unwrap();
        let z = Placement(vec![Pos::new(5, 5), Pos::new(6, 6)]);
        let t = synthesize_template(&model, &z).unwrap();
        assert_eq!(t.weights, vec![1.0, 2.0, 3.0, 14.0]);
        assert_eq!(t.bias, 0.0);

        // part sticking out of the root extends the template with zero padding
        let z = Placement(vec![Pos::new(5, 5), Pos::new(7, 5)]);
        let t = synthesize_template(&model, &z).unwrap();
        assert_eq!((t.h, t.w), (3, 2));
        assert_eq!(t.weights, vec![1.0, 2.0, 3.0, 4.0, 10.0, 0.0]);
        assert_eq!(t.bias, -1.0 - 1.0);
    }
}
