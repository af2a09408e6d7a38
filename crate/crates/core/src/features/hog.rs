//! Gradient-orientation histogram descriptor.
//!
//! Per cell: 9 unsigned orientation bins of gradient magnitude (hard spatial
//! and orientation assignment). Each cell histogram is normalized by the L2
//! energy of the four 2x2 cell blocks that contain it and clipped at 0.2,
//! giving `4 * 9 = 36` values per cell. The outer ring of cells is trimmed
//! because its block neighborhoods are incomplete.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{FeatureGrid, Raster, WindowDescriptor};
use crate::error::{Error, Result};
use crate::geom::Rect;

pub const NUM_ORIENTATIONS: usize = 9;
pub const FEATURE_DIM: usize = 4 * NUM_ORIENTATIONS;
pub const CLIP_MAX: f64 = 0.2;
const NORM_EPS: f64 = 1e-4;

/// Orientation bin of an unsigned gradient; `None` for a zero gradient.
pub(crate) fn orientation_bin(gx: f64, gy: f64) -> Option<(usize, f64)> {
    let mag = (gx * gx + gy * gy).sqrt();
    if mag == 0.0 {
        return None;
    }
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    let bin = ((theta / (PI / NUM_ORIENTATIONS as f64)) as usize).min(NUM_ORIENTATIONS - 1);
    Some((bin, mag))
}

/// Cell histograms for the `cells_x x cells_y` cells whose pixels start at
/// `(x0, y0)`. Gradients are central differences with border clamping over
/// the whole raster, so pixels outside the binned region still act as context.
fn cell_histograms(
    img: &Raster,
    x0: usize,
    y0: usize,
    cells_x: usize,
    cells_y: usize,
    cell_size: usize,
) -> Vec<[f64; NUM_ORIENTATIONS]> {
    let mut hist = vec![[0.0; NUM_ORIENTATIONS]; cells_x * cells_y];
    for py in 0..cells_y * cell_size {
        let y = (y0 + py) as i64;
        for px in 0..cells_x * cell_size {
            let x = (x0 + px) as i64;
            let gx = img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y);
            let gy = img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1);
            if let Some((bin, mag)) = orientation_bin(gx, gy) {
                hist[(py / cell_size) * cells_x + px / cell_size][bin] += mag;
            }
        }
    }
    hist
}

fn normalize(
    hist: &[[f64; NUM_ORIENTATIONS]],
    cells_x: usize,
    cells_y: usize,
) -> (usize, usize, Vec<f64>) {
    let energy: Vec<f64> = hist
        .iter()
        .map(|h| h.iter().map(|v| v * v).sum())
        .collect();
    let e = |cy: usize, cx: usize| energy[cy * cells_x + cx];
    let rows = cells_y - 2;
    let cols = cells_x - 2;
    let mut data = Vec::with_capacity(rows * cols * FEATURE_DIM);
    for cy in 1..cells_y - 1 {
        for cx in 1..cells_x - 1 {
            let h = &hist[cy * cells_x + cx];
            for (by, bx) in [(cy - 1, cx - 1), (cy - 1, cx), (cy, cx - 1), (cy, cx)] {
                let block = e(by, bx) + e(by, bx + 1) + e(by + 1, bx) + e(by + 1, bx + 1);
                let n = 1.0 / (block + NORM_EPS).sqrt();
                data.extend(h.iter().map(|v| (v * n).min(CLIP_MAX)));
            }
        }
    }
    (rows, cols, data)
}

/// Descriptor grid of a whole raster.
pub fn compute_features(image: &Raster, cell_size: usize) -> Result<FeatureGrid> {
    if cell_size == 0 {
        return Err(Error::Size("cell size must be positive".into()));
    }
    let cells_x = image.width() / cell_size;
    let cells_y = image.height() / cell_size;
    if cells_x < 3 || cells_y < 3 {
        return Err(Error::Size(format!(
            "{}x{} image gives {cells_x}x{cells_y} cells of {cell_size}px; need at least 3x3",
            image.width(),
            image.height()
        )));
    }
    let hist = cell_histograms(image, 0, 0, cells_x, cells_y, cell_size);
    let (rows, cols, data) = normalize(&hist, cells_x, cells_y);
    FeatureGrid::new(rows, cols, FEATURE_DIM, cell_size, 1.0, data)
}

/// Multi-scale stack of feature grids, finest level first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureGrid>,
    pub scale_step: f64,
    /// Set when fewer levels than requested could be built.
    pub truncated: Option<String>,
}

impl FeaturePyramid {
    pub fn single(grid: FeatureGrid) -> Self {
        Self {
            levels: vec![grid],
            scale_step: 2.0,
            truncated: None,
        }
    }
}

/// Builds `n_levels` feature grids with level `i` computed on the image
/// rescaled by `scale_step^-i`. Levels too small for the descriptor are
/// dropped and the pyramid is marked truncated.
pub fn build_pyramid(
    image: &Raster,
    cell_size: usize,
    scale_step: f64,
    n_levels: usize,
) -> Result<FeaturePyramid> {
    if n_levels == 0 {
        return Err(Error::Size("pyramid needs at least one level".into()));
    }
    if !(scale_step > 1.0) {
        return Err(Error::Domain(format!(
            "scale step must exceed 1, got {scale_step}"
        )));
    }
    let mut levels = vec![compute_features(image, cell_size)?];
    let mut truncated = None;
    for i in 1..n_levels {
        let scale = scale_step.powi(-(i as i32));
        let w = (image.width() as f64 * scale).round() as usize;
        let h = (image.height() as f64 * scale).round() as usize;
        if w / cell_size < 3 || h / cell_size < 3 {
            truncated = Some(format!(
                "pyramid truncated to {i} of {n_levels} levels: level {i} would be {w}x{h}px"
            ));
            log::warn!("{}", truncated.as_deref().unwrap_or_default());
            break;
        }
        let resized = image.resample(
            0.0,
            0.0,
            image.width() as f64,
            image.height() as f64,
            w,
            h,
        );
        levels.push(compute_features(&resized, cell_size)?.with_scale(scale));
    }
    Ok(FeaturePyramid {
        levels,
        scale_step,
        truncated,
    })
}

/// Resamples `bbox` to a `canonical = (rows, cols)` cell window and returns
/// its descriptor. One cell of surrounding context is sampled on each side so
/// that block normalization of the window's own cells is complete.
pub fn warp_to_canonical(
    image: &Raster,
    bbox: &Rect,
    canonical: (usize, usize),
    cell_size: usize,
) -> Result<WindowDescriptor> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::InvalidAnnotation(format!(
            "degenerate box {bbox:?}"
        )));
    }
    if bbox.x < 0.0
        || bbox.y < 0.0
        || bbox.right() > image.width() as f64
        || bbox.bottom() > image.height() as f64
    {
        return Err(Error::Range(format!(
            "box {bbox:?} outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let (rows, cols) = canonical;
    if rows == 0 || cols == 0 || cell_size == 0 {
        return Err(Error::Size("canonical shape must be non-empty".into()));
    }
    let sx = bbox.w / (cols * cell_size) as f64;
    let sy = bbox.h / (rows * cell_size) as f64;
    let cells_x = cols + 2;
    let cells_y = rows + 2;
    let dst_w = cells_x * cell_size + 2;
    let dst_h = cells_y * cell_size + 2;
    let margin = (cell_size + 1) as f64;
    let warped = image.resample(
        bbox.x - margin * sx,
        bbox.y - margin * sy,
        dst_w as f64 * sx,
        dst_h as f64 * sy,
        dst_w,
        dst_h,
    );
    let hist = cell_histograms(&warped, 1, 1, cells_x, cells_y, cell_size);
    let (r, c, data) = normalize(&hist, cells_x, cells_y);
    debug_assert_eq!((r, c), (rows, cols));
    WindowDescriptor::new(data, (rows, cols, FEATURE_DIM))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_window;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn constant_image_has_zero_features() {
        let g = compute_features(&Raster::filled(40, 32, 0.7), 8).unwrap();
        assert_eq!((g.rows(), g.cols(), g.dim()), (2, 3, FEATURE_DIM));
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_image_is_size_error() {
        assert!(matches!(
            compute_features(&Raster::filled(16, 40, 0.0), 8),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn values_are_clipped_and_finite() {
        let g = compute_features(&noise_image(1, 64, 48), 8).unwrap();
        assert!(g
            .as_slice()
            .iter()
            .all(|&v| v.is_finite() && (0.0..=CLIP_MAX).contains(&v)));
    }

    #[test]
    fn deterministic() {
        let img = noise_image(2, 64, 64);
        assert_eq!(
            compute_features(&img, 8).unwrap(),
            compute_features(&img, 8).unwrap()
        );
    }

    #[test]
    fn translation_by_one_cell_shifts_grid() {
        let base = noise_image(3, 80, 72);
        let shifted = Raster::from_fn(80, 72, |x, y| if x >= 8 { base.get(x - 8, y) } else { 0.3 });
        let a = compute_features(&base, 8).unwrap();
        let b = compute_features(&shifted, 8).unwrap();
        // interior cells away from the seam and the right border
        for r in 1..a.rows() - 1 {
            for c in 2..a.cols() - 1 {
                assert_eq!(b.cell(r, c), a.cell(r, c - 1), "cell ({r},{c})");
            }
        }
    }

    /// Scalar per-pixel reference: histogram one cell directly.
    fn reference_cell_histogram(img: &Raster, cx: usize, cy: usize, cs: usize) -> [f64; 9] {
        let mut h = [0.0; 9];
        for y in cy * cs..(cy + 1) * cs {
            for x in cx * cs..(cx + 1) * cs {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(img.width() - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(img.height() - 1);
                let gx = img.get(xr, y) - img.get(xl, y);
                let gy = img.get(x, yd) - img.get(x, yu);
                let mag = gx.hypot(gy);
                if mag > 0.0 {
                    let deg = gy.atan2(gx).to_degrees().rem_euclid(180.0);
                    h[((deg / 20.0) as usize).min(8)] += mag;
                }
            }
        }
        h
    }

    #[test]
    fn vertical_step_edge_lands_in_zero_degree_bin() {
        let img = Raster::from_fn(48, 48, |x, _| if x >= 20 { 1.0 } else { 0.0 });
        let hist = cell_histograms(&img, 0, 0, 6, 6, 8);
        for cy in 0..6 {
            for cx in 0..6 {
                let reference = reference_cell_histogram(&img, cx, cy, 8);
                for b in 0..9 {
                    assert!((hist[cy * 6 + cx][b] - reference[b]).abs() < 1e-12);
                }
            }
        }
        let g = compute_features(&img, 8).unwrap();
        // edge column x = 19..20 lives in cell 2 -> grid col 1
        for r in 0..g.rows() {
            let cell = g.cell(r, 1);
            let bin0: f64 = (0..4).map(|k| cell[k * 9]).sum();
            let rest: f64 = cell.iter().sum::<f64>() - bin0;
            assert!(bin0 > 0.0);
            assert_eq!(rest, 0.0);
        }
    }

    #[test]
    fn pyramid_levels_and_truncation() {
        let img = noise_image(4, 128, 128);
        let single = build_pyramid(&img, 8, 2.0, 1).unwrap();
        assert_eq!(single.levels.len(), 1);
        assert_eq!(single.levels[0], compute_features(&img, 8).unwrap());

        let big = noise_image(5, 256, 256);
        let p = build_pyramid(&big, 8, 2.0, 3).unwrap();
        assert_eq!(p.levels.len(), 3);
        for (i, level) in p.levels.iter().enumerate() {
            let expected = (256 >> i) / 8 - 2;
            assert!((level.rows() as i64 - expected as i64).abs() <= 1);
            assert_eq!(level.scale(), 2f64.powi(-(i as i32)));
            // oracle: resize the image directly, then extract
            let side = 256 >> i;
            let resized = big.resample(0.0, 0.0, 256.0, 256.0, side, side);
            assert_eq!(level.as_slice(), compute_features(&resized, 8).unwrap().as_slice());
        }

        let t = build_pyramid(&img, 8, 1.1, 60).unwrap();
        assert!(t.levels.len() < 60);
        assert!(t.truncated.is_some());
        for w in t.levels.windows(2) {
            assert!(w[1].scale() < w[0].scale());
            assert!((w[0].scale() / w[1].scale() - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_warp_matches_direct_extraction() {
        let img = noise_image(6, 96, 80);
        let grid = compute_features(&img, 8).unwrap();
        // grid cell (r, c) starts at pixel ((c + 1) * 8, (r + 1) * 8)
        let (r, c, h, w) = (2, 3, 4, 5);
        let bbox = Rect::new(((c + 1) * 8) as f64, ((r + 1) * 8) as f64, (w * 8) as f64, (h * 8) as f64);
        let warped = warp_to_canonical(&img, &bbox, (h, w), 8).unwrap();
        let direct = extract_window(&grid, (r, c), h, w).unwrap();
        assert_eq!(warped.shape, direct.shape);
        for (a, b) in warped.values.iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_output_shape_is_canonical() {
        let img = noise_image(7, 100, 100);
        let d = warp_to_canonical(&img, &Rect::new(10.0, 20.0, 60.0, 30.0), (5, 5), 8).unwrap();
        assert_eq!(d.shape, (5, 5, FEATURE_DIM));
        assert_eq!(d.values.len(), 5 * 5 * FEATURE_DIM);
        assert!(matches!(
            warp_to_canonical(&img, &Rect::new(10.0, 20.0, 0.0, 30.0), (5, 5), 8),
            Err(Error::InvalidAnnotation(_))
        ));
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn warp_is_roughly_scale_invariant() {
        // a bar-and-blob object drawn at 1x and 2x
        let draw = |scale: f64, ox: f64, oy: f64| {
            move |x: usize, y: usize| {
                let u = (x as f64 - ox) / scale;
                let v = (y as f64 - oy) / scale;
                let bar = (0.0..40.0).contains(&u) && (10.0..16.0).contains(&v);
                let post = (28.0..34.0).contains(&u) && (0.0..32.0).contains(&v);
                if bar || post { 0.9 } else { 0.1 }
            }
        };
        let small = Raster::from_fn(200, 200, draw(1.0, 30.0, 40.0));
        let large = Raster::from_fn(200, 200, draw(2.0, 60.0, 80.0));
        let a = warp_to_canonical(&small, &Rect::new(30.0, 40.0, 40.0, 32.0), (4, 5), 8).unwrap();
        let b = warp_to_canonical(&large, &Rect::new(60.0, 80.0, 80.0, 64.0), (4, 5), 8).unwrap();
        let noise = noise_image(8, 200, 200);
        let n = warp_to_canonical(&noise, &Rect::new(50.0, 50.0, 40.0, 32.0), (4, 5), 8).unwrap();
        let same = cosine(&a.values, &b.values);
        assert!(same >= cosine(&a.values, &n.values), "{same}");
        assert!(same >= cosine(&b.values, &n.values));
    }
}
