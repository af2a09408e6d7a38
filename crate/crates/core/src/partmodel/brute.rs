//! Exhaustive reference inference over the placement space.

use super::{AnchorSet, Placement, Pos, ShapeModel, StarModel};
use crate::error::{Error, Result};
use crate::features::{window_dot, FeatureGrid};
use crate::map::Map2;

/// Largest placement space `prod_i |L_i|` the oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

fn naive_responses(model: &StarModel, grid: &FeatureGrid) -> Result<Vec<Map2<f64>>> {
    if grid.dim() != model.dim {
        return Err(Error::Data("grid and model channel counts differ".into()));
    }
    let mut out = Vec::with_capacity(model.parts.len());
    for (i, p) in model.parts.iter().enumerate() {
        let (rows, cols) = model
            .domain(i, grid.rows(), grid.cols())
            .ok_or_else(|| Error::Size(format!("part {i} does not fit the grid")))?;
        out.push(Map2::from_fn(rows, cols, |r, c| {
            window_dot(grid, &p.weights, r, c, p.h, p.w)
        }));
    }
    Ok(out)
}

fn in_map(m: &Map2<f64>, p: Pos) -> bool {
    p.row >= 0 && p.col >= 0 && (p.row as usize) < m.rows() && (p.col as usize) < m.cols()
}

/// Maximum of `S(I, z)` over every placement `z` allowed by the model (all of
/// the placement space for DPM/EDPM, the exemplar layouts for EPM), with the
/// maximizing placement. Refuses spaces larger than [`BRUTE_FORCE_LIMIT`].
pub fn score_bruteforce(model: &StarModel, grid: &FeatureGrid) -> Result<(f64, Option<Placement>)> {
    let resp = naive_responses(model, grid)?;
    let space: u128 = resp.iter().map(|m| (m.rows() * m.cols()) as u128).product();
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::OracleGuard(format!(
            "placement space {space} exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let root = &resp[0];
    let mut best = f64::NEG_INFINITY;
    let mut best_z = None;

    match &model.shape {
        ShapeModel::Epm { exemplars } => {
            for offsets in exemplars {
                for r in 0..root.rows() {
                    for c in 0..root.cols() {
                        let z1 = Pos::new(r as i64, c as i64);
                        let z = Placement::from_root_and_offsets(z1, offsets);
                        if !z.0[1..].iter().zip(&resp[1..]).all(|(p, m)| in_map(m, *p)) {
                            continue;
                        }
                        let mut acc = root.get(r, c);
                        for j in 1..resp.len() {
                            let p = z.0[j];
                            let v = resp[j].get(p.row as usize, p.col as usize);
                            acc += model.springs[j - 1].apply(v, offsets[j - 1] - model.anchors[j - 1]);
                        }
                        if acc > best {
                            best = acc;
                            best_z = Some(z);
                        }
                    }
                }
            }
        }
        ShapeModel::Dpm | ShapeModel::Edpm { .. } => {
            let sets: Vec<&AnchorSet> = model.anchor_sets();
            for anchors in sets {
                for r in 0..root.rows() {
                    for c in 0..root.cols() {
                        let z1 = Pos::new(r as i64, c as i64);
                        if !anchors
                            .iter()
                            .zip(&resp[1..])
                            .all(|(a, m)| in_map(m, z1 + *a))
                        {
                            continue;
                        }
                        let mut z = vec![z1];
                        enumerate(model, &resp, anchors, root.get(r, c), &mut z, &mut best, &mut best_z);
                    }
                }
            }
        }
    }
    Ok((best, best_z))
}

/// Walks every combination of non-root part locations for a fixed root.
fn enumerate(
    model: &StarModel,
    resp: &[Map2<f64>],
    anchors: &[Pos],
    acc: f64,
    z: &mut Vec<Pos>,
    best: &mut f64,
    best_z: &mut Option<Placement>,
) {
    let j = z.len();
    if j == resp.len() {
        if acc > *best {
            *best = acc;
            *best_z = Some(Placement(z.clone()));
        }
        return;
    }
    let m = &resp[j];
    let z1 = z[0];
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let p = Pos::new(r as i64, c as i64);
            let term = model.springs[j - 1].apply(m.get(r, c), p - z1 - anchors[j - 1]);
            z.push(p);
            enumerate(model, resp, anchors, acc + term, z, best, best_z);
            z.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{score_dpm, score_epm};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn root_only_is_max_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 1, 2);
        let grid = random_grid(&mut rng, 8, 8, 2);
        let (v, _) = score_bruteforce(&model, &grid).unwrap();
        let s = score_dpm(&model, &grid).unwrap();
        assert_eq!(v, s.scores.argmax().unwrap().0);
    }

    #[test]
    fn agrees_with_dp_and_epm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let model = random_model(&mut rng, 3, 2);
            let grid = random_grid(&mut rng, 8, 8, 2);
            let (bf, z) = score_bruteforce(&model, &grid).unwrap();
            let dp = score_dpm(&model, &grid).unwrap();
            let (v, r, c) = dp.scores.argmax().unwrap();
            assert_eq!(bf, v);
            assert_eq!(z.unwrap().root(), Pos::new(r as i64, c as i64));

            let epm = model
                .with_shape(ShapeModel::Epm {
                    exemplars: random_anchor_sets(&mut rng, 3, 4),
                })
                .unwrap();
            let (bf, _) = score_bruteforce(&epm, &grid).unwrap();
            assert_eq!(bf, score_epm(&epm, &grid).unwrap().scores.argmax().unwrap().0);
        }
    }

    #[test]
    fn refuses_huge_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 4, 1);
        let grid = random_grid(&mut rng, 40, 40, 1);
        assert!(matches!(
            score_bruteforce(&model, &grid),
            Err(Error::OracleGuard(_))
        ));
    }
}
