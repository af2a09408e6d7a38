//! Shape models `b(z)` of the three variants.

use super::{AnchorSet, Placement, Pos, ShapeModel, StarModel};

/// Spring score of `z` against one anchor set, summed over non-root parts.
fn anchored_score(model: &StarModel, anchors: &[Pos], z: &Placement) -> f64 {
    let root = z.root();
    let mut acc = 0.0;
    for (j, a) in anchors.iter().enumerate() {
        acc += model.springs[j].apply(0.0, z.0[j + 1] - root - *a);
    }
    acc
}

/// `b_DPM(z)`: springs around the single anchor set.
pub fn shape_score_dpm(model: &StarModel, z: &Placement) -> f64 {
    anchored_score(model, &model.anchors, z)
}

/// `b_EDPM(z) = max_m` of the spring score against exemplar anchor set `m`.
pub fn shape_score_edpm(model: &StarModel, exemplars: &[AnchorSet], z: &Placement) -> f64 {
    exemplars
        .iter()
        .map(|a| anchored_score(model, a, z))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Limit of `b_EDPM` with infinitely stiff springs: `0` when `z` reproduces an
/// exemplar layout exactly, `-inf` otherwise.
pub fn exact_match_mask(exemplars: &[AnchorSet], z: &Placement) -> f64 {
    let rel = z.relative();
    if exemplars.iter().any(|e| *e == rel) {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// `b_EPM(z)`: the DPM spring score restricted to exemplar layouts.
pub fn shape_score_epm(model: &StarModel, exemplars: &[AnchorSet], z: &Placement) -> f64 {
    let rel = z.relative();
    match exemplars.iter().position(|e| *e == rel) {
        Some(_) => shape_score_dpm(model, z),
        None => f64::NEG_INFINITY,
    }
}

/// Shape score of `z` under the model's own variant.
pub fn shape_score(model: &StarModel, z: &Placement) -> f64 {
    match &model.shape {
        ShapeModel::Dpm => shape_score_dpm(model, z),
        ShapeModel::Epm { exemplars } => shape_score_epm(model, exemplars, z),
        ShapeModel::Edpm { exemplars } => shape_score_edpm(model, exemplars, z),
    }
}

/// Quantizes part offsets into bins of `q` cells (nearest bin centre).
pub fn quantize_shape(offsets: &[Pos], q: f64) -> Vec<Pos> {
    offsets
        .iter()
        .map(|o| {
            Pos::new(
                (o.row as f64 / q).round() as i64,
                (o.col as f64 / q).round() as i64,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_placement_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 4, 2);
        let z = Placement::from_root_and_offsets(Pos::new(3, 2), &model.anchors);
        assert_eq!(shape_score_dpm(&model, &z), 0.0);
        let sets = vec![random_anchor_sets(&mut rng, 4, 1)[0].clone(), model.anchors.clone()];
        assert_eq!(shape_score_edpm(&model, &sets, &z), 0.0);
    }

    #[test]
    fn non_exemplar_layout_is_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 3, 2);
        let sets = vec![vec![Pos::new(0, 1), Pos::new(1, 0)]];
        let z = Placement(vec![Pos::new(0, 0), Pos::new(0, 2), Pos::new(1, 0)]);
        assert_eq!(shape_score_epm(&model, &sets, &z), f64::NEG_INFINITY);
        assert_eq!(exact_match_mask(&sets, &z), f64::NEG_INFINITY);
    }

    #[test]
    fn single_exemplar_edpm_is_dpm_on_9x9() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 2, 1);
        let sets = vec![model.anchors.clone()];
        for r in 0..9 {
            for c in 0..9 {
                let z = Placement(vec![Pos::new(4, 4), Pos::new(r, c)]);
                // direct single-anchor evaluation
                let d = z.0[1] - z.0[0] - model.anchors[0];
                let s = model.springs[0];
                let direct = 0.0 - s.bx * (d.col * d.col) as f64 - s.by * (d.row * d.row) as f64;
                assert_eq!(shape_score_dpm(&model, &z), direct);
                assert_eq!(shape_score_edpm(&model, &sets, &z), direct);
            }
        }
    }

    #[test]
    fn quantization_limits() {
        let offs = vec![Pos::new(3, -2), Pos::new(0, 5)];
        assert_eq!(quantize_shape(&offs, 1.0), offs);
        assert_eq!(quantize_shape(&offs, 1e9), vec![Pos::new(0, 0); 2]);
    }
}
