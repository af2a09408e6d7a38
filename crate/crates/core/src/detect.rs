//! Dense detection over feature pyramids and greedy non-maximum suppression.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou;
use crate::features::{FeatureGrid, FeaturePyramid};
use crate::geom::Rect;
use crate::partmodel::{score_star, Placement, Pos, StarModel};
use crate::train::MixtureModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect,
    pub score: f64,
    pub level: usize,
    /// Winning mixture component or exemplar.
    pub mixture_or_exemplar: usize,
    pub placement: Option<Placement>,
    /// Per-part `z_j - z_1 - a_j` under the winning anchor set.
    pub deformations: Option<Vec<Pos>>,
}

/// Something that can scan a feature grid.
pub trait Detector: Send + Sync {
    /// Registry name of the model family.
    fn family(&self) -> &'static str;

    /// Detections on one grid with `score > threshold`, raster order.
    fn detect_grid(&self, grid: &FeatureGrid, level: usize, threshold: f64) -> Result<Vec<Detection>>;
}

fn clip(r: Rect, extent: (f64, f64)) -> Rect {
    let x0 = r.x.max(0.0);
    let y0 = r.y.max(0.0);
    let x1 = r.right().min(extent.0);
    let y1 = r.bottom().min(extent.1);
    Rect::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
}

impl Detector for MixtureModel {
    fn family(&self) -> &'static str {
        "mixture"
    }

    /// Components of equal size compete per location (calibrated scores,
    /// lower index on ties); each distinct size is scanned separately.
    fn detect_grid(&self, grid: &FeatureGrid, level: usize, threshold: f64) -> Result<Vec<Detection>> {
        let mut sizes: Vec<(usize, usize)> = self.templates.iter().map(|t| (t.h, t.w)).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let extent = grid.image_extent();
        let mut out = Vec::new();
        for (h, w) in sizes {
            if h > grid.rows() || w > grid.cols() {
                continue;
            }
            let members: Vec<&crate::train::Template> =
                self.templates.iter().filter(|t| (t.h, t.w) == (h, w)).collect();
            let maps = members.iter().map(|t| t.score_map(grid)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = (maps[0].rows(), maps[0].cols());
            for r in 0..rows {
                for c in 0..cols {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (t, m) in members.iter().zip(&maps) {
                        let raw = m.get(r, c);
                        let s = t.platt.map_or(raw, |p| p.prob(raw));
                        if s > best.0 {
                            best = (s, t.mixture_id);
                        }
                    }
                    if best.0 > threshold {
                        out.push(Detection {
                            bbox: clip(grid.cell_rect(r, c, h, w), extent),
                            score: best.0,
                            level,
                            mixture_or_exemplar: best.1,
                            placement: None,
                            deformations: None,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Detector for StarModel {
    fn family(&self) -> &'static str {
        self.shape.tag()
    }

    /// Score is the variant's part-model score plus the model bias, passed
    /// through the calibration when one is attached.
    fn detect_grid(&self, grid: &FeatureGrid, level: usize, threshold: f64) -> Result<Vec<Detection>> {
        let root = self.root();
        if root.h > grid.rows() || root.w > grid.cols() {
            return Ok(Vec::new());
        }
        let scored = score_star(self, grid)?;
        let map = scored.scores();
        let anchors = self.anchor_sets();
        let extent = grid.image_extent();
        let mut out = Vec::new();
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                let raw = map.get(r, c);
                if raw == f64::NEG_INFINITY {
                    continue;
                }
                let raw = raw + self.bias;
                let s = self.platt.map_or(raw, |p| p.prob(raw));
                if !(s > threshold) {
                    continue;
                }
                let m = scored.component(r, c);
                let placement = scored.placement(r, c);
                let deformations = placement.as_ref().map(|z| {
                    z.relative()
                        .iter()
                        .zip(anchors[m])
                        .map(|(&d, &a)| d - a)
                        .collect()
                });
                out.push(Detection {
                    bbox: clip(grid.cell_rect(r, c, root.h, root.w), extent),
                    score: s,
                    level,
                    mixture_or_exemplar: m,
                    placement,
                    deformations,
                });
            }
        }
        Ok(out)
    }
}

/// Every root location of every pyramid level scoring above `threshold`,
/// ordered by level then raster position.
pub fn detect(model: &dyn Detector, pyramid: &FeaturePyramid, threshold: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (level, grid) in pyramid.levels.iter().enumerate() {
        out.extend(model.detect_grid(grid, level, threshold)?);
    }
    Ok(out)
}

/// Greedy suppression: visit by descending score (earlier first on ties) and
/// keep a detection unless it overlaps a kept one by more than `overlap`.
pub fn nms(detections: &[Detection], overlap: f64) -> Result<Vec<Detection>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut keep = true;
        for &k in &kept {
            if iou(&detections[i].bbox, &detections[k].bbox)? > overlap {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| detections[i].clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct DetectionLine<'a> {
    image_id: &'a str,
    bbox: [f64; 4],
    score: f64,
    model_ref: &'a str,
    exemplar: usize,
    deformations: Option<Vec<[i64; 2]>>,
}

/// One JSON object per detection; deformations are `[dy, dx]` pairs.
pub fn write_jsonl<W: Write>(out: &mut W, image_id: &str, model_ref: &str, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let line = DetectionLine {
            image_id,
            bbox: d.bbox.to_array(),
            score: d.score,
            model_ref,
            exemplar: d.mixture_or_exemplar,
            deformations: d
                .deformations
                .as_ref()
                .map(|v| v.iter().map(|p| [p.row, p.col]).collect()),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::window_dot;
    use crate::partmodel::testutil::{random_anchor_sets, random_grid, random_model};
    use crate::partmodel::{synthesize_template, ShapeModel};
    use crate::train::Template;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, s: f64) -> Detection {
        Detection {
            bbox: Rect::new(x, y, 10.0, 10.0),
            score: s,
            level: 0,
            mixture_or_exemplar: 0,
            placement: None,
            deformations: None,
        }
    }

    fn reference_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
        let mut alive = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            // highest alive score, earliest on ties
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.map_or(true, |b| dets[i].score > dets[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            out.push(dets[b].clone());
            for i in 0..dets.len() {
                if alive[i] && iou(&dets[i].bbox, &dets[b].bbox).unwrap() > t {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_basics() {
        let one = vec![det(0.0, 0.0, 1.0)];
        assert_eq!(nms(&one, 0.5).unwrap(), one);
        let two = vec![det(0.0, 0.0, 1.0), det(0.0, 0.0, 1.0)];
        let out = nms(&two, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        let mut tagged = two.clone();
        tagged[0].mixture_or_exemplar = 7;
        assert_eq!(nms(&tagged, 0.5).unwrap()[0].mixture_or_exemplar, 7);
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..200)
                .map(|_| det(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), (rng.gen_range(0..20) as f64) / 4.0))
                .collect();
            let out = nms(&dets, 0.5).unwrap();
            assert_eq!(out, reference_nms(&dets, 0.5));
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    assert!(iou(&out[i].bbox, &out[j].bbox).unwrap() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn infinite_threshold_gives_nothing_and_thresholds_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 3, 2);
        let grid = random_grid(&mut rng, 10, 10, 2);
        let pyr = FeaturePyramid::single(grid);
        assert!(detect(&model, &pyr, f64::INFINITY).unwrap().is_empty());
        let lo = detect(&model, &pyr, -1.0).unwrap();
        let hi = detect(&model, &pyr, 0.5).unwrap();
        assert!(hi.iter().all(|d| lo.contains(d)));
    }

    #[test]
    fn planted_template_is_found_with_exact_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut model = random_model(&mut rng, 3, 3);
            // stiff springs keep parts at their anchors; the planted template
            // then scores |T|^2 and every shift of it scores less
            for s in &mut model.springs {
                *s = crate::partmodel::Spring::new(1e6, 1e6);
            }
            let root = Pos::new(4, 5);
            let offsets = model.anchors.clone();
            let z = Placement::from_root_and_offsets(root, &offsets);
            let t = synthesize_template(&model, &z).unwrap();
            let mut grid = FeatureGrid::zeros(16, 16, 3);
            for r in 0..t.h {
                for c in 0..t.w {
                    grid.cell_mut(t.origin.row as usize + r, t.origin.col as usize + c)
                        .copy_from_slice(t.cell(r, c));
                }
            }
            let dets = detect(&model, &FeaturePyramid::single(grid.clone()), f64::NEG_INFINITY).unwrap();
            let top = dets.iter().fold(&dets[0], |b, d| if d.score > b.score { d } else { b });
            let expected = window_dot(&grid, &t.weights, t.origin.row as usize, t.origin.col as usize, t.h, t.w) + t.bias;
            assert!((top.score - expected).abs() < 1e-9, "{} vs {expected}", top.score);
            assert_eq!(top.placement.as_ref().unwrap().root(), root);
            assert_eq!(top.bbox, grid.cell_rect(4, 5, model.root().h, model.root().w));
        }
    }

    #[test]
    fn edpm_detections_carry_exemplar_and_deformations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_model(&mut rng, 3, 2);
        let sets = random_anchor_sets(&mut rng, 3, 4);
        let model = base.with_shape(ShapeModel::Edpm { exemplars: sets.clone() }).unwrap();
        let grid = random_grid(&mut rng, 12, 12, 2);
        for d in detect(&model, &FeaturePyramid::single(grid), f64::NEG_INFINITY).unwrap() {
            let z = d.placement.unwrap();
            let def = d.deformations.unwrap();
            let a = &sets[d.mixture_or_exemplar];
            for j in 0..def.len() {
                assert_eq!(def[j], z.0[j + 1] - z.0[0] - a[j]);
            }
        }
    }

    #[test]
    fn mixture_detection_and_calibration_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = random_grid(&mut rng, 9, 9, 2);
        let weights: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Template { h: 2, w: 2, dim: 2, weights, bias: 0.3, platt: None, mixture_id: 0 };
        let raw = MixtureModel { templates: vec![t.clone()], skipped: vec![] };
        t.platt = Some(crate::train::Platt { a: -2.0, b: 0.5 });
        let cal = MixtureModel { templates: vec![t], skipped: vec![] };
        let pyr = FeaturePyramid::single(grid);
        let a = detect(&raw, &pyr, f64::NEG_INFINITY).unwrap();
        let b = detect(&cal, &pyr, f64::NEG_INFINITY).unwrap();
        assert_eq!(a.len(), 64);
        let boxes = |v: Vec<Detection>| v.into_iter().map(|d| d.bbox).collect::<Vec<_>>();
        assert_eq!(boxes(nms(&a, 0.3).unwrap()), boxes(nms(&b, 0.3).unwrap()));
    }

    #[test]
    fn jsonl_output() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, "img1", "m.json", &[det(1.0, 2.0, 0.5), det(3.0, 4.0, 0.25)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["bbox"][0], 1.0);
        assert_eq!(lines[1]["image_id"], "img1");
    }
}
