//! Synthetic detection data with sub-category structure and a long tail of
//! part layouts.
//!
//! A "world" (drawn from `world_seed`) fixes per-subcategory root patterns,
//! per-part patterns and a library of part layouts. Instances (drawn from
//! `seed`) pick a subcategory uniformly and a layout with probability
//! `∝ (k + 1)^-alpha`. Two renderers share this structure:
//!
//! * feature mode writes cell descriptors directly: each cell has one strong
//!   channel (pattern channel for object cells, random for clutter) over a
//!   noise floor;
//! * raster mode draws one oriented bar per cell into a grayscale image and
//!   computes the gradient-histogram grid from it.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GtBox};
use crate::features::{compute_features, FeatureGrid, Raster, DEFAULT_CELL_SIZE, NUM_ORIENTATIONS};
use crate::geom::Rect;
use crate::partmodel::{quantize_shape, Placement, Pos};

/// Peak cell value, matching the descriptor clip level.
const PEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Features,
    Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subcategories: usize,
    /// Filters per object including the root.
    pub parts_per_object: usize,
    /// Exponent `alpha` of the layout distribution `P(k) ∝ (k+1)^-alpha`.
    pub shape_tail_exponent: f64,
    /// In `[0, 1]`; scales the noise floor and amplitude jitter.
    pub noise_level: f64,
    pub n_images: usize,
    /// Feature mode: grid `(rows, cols)` in cells. Raster mode: `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Seed of patterns and layout library; defaults to `seed`.
    pub world_seed: Option<u64>,
    pub mode: SynthMode,
    /// Channels per cell in feature mode.
    pub dim: usize,
    pub objects_per_image: usize,
    /// Root box `(rows, cols)` in cells.
    pub root_size: (usize, usize),
    pub part_size: (usize, usize),
    pub shape_library_size: usize,
    /// Probability that an object cell shows a random channel instead of its pattern.
    pub corruption: f64,
    /// Probability that a part of an instance moves one cell off its layout
    /// position (staying inside the root box).
    pub part_jitter: f64,
    /// Part-pattern distractors pasted into the clutter of every image.
    pub distractors: usize,
    pub cell_size: usize,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subcategories: 1,
            parts_per_object: 4,
            shape_tail_exponent: 1.2,
            noise_level: 0.8,
            n_images: 100,
            image_size: (12, 12),
            seed: 0,
            world_seed: None,
            mode: SynthMode::Features,
            dim: 10,
            objects_per_image: 1,
            root_size: (6, 6),
            part_size: (2, 2),
            shape_library_size: 400,
            corruption: 0.7,
            part_jitter: 0.3,
            distractors: 4,
            cell_size: DEFAULT_CELL_SIZE,
            max_retries: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_subcategories == 0 || self.parts_per_object == 0 || self.shape_library_size == 0 {
            return bad("subcategories, parts and shape library size must be positive".into());
        }
        if !(self.shape_tail_exponent > 1.0) {
            return bad(format!("tail exponent must exceed 1, got {}", self.shape_tail_exponent));
        }
        if [self.noise_level, self.corruption, self.part_jitter].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("noise level, corruption and jitter must lie in [0, 1]".into());
        }
        if self.root_size.0 == 0 || self.root_size.1 == 0 {
            return bad("root size must be positive".into());
        }
        if self.parts_per_object > 1
            && (self.part_size.0 == 0
                || self.part_size.1 == 0
                || self.part_size.0 > self.root_size.0
                || self.part_size.1 > self.root_size.1)
        {
            return bad(format!("part size {:?} must fit in root {:?}", self.part_size, self.root_size));
        }
        if self.cell_size == 0 {
            return bad("cell size must be positive".into());
        }
        let (rows, cols) = self.grid_size();
        if rows < self.root_size.0 || cols < self.root_size.1 {
            return bad(format!(
                "{rows}x{cols} cell grid cannot hold a {:?} object",
                self.root_size
            ));
        }
        match self.mode {
            SynthMode::Features if self.dim < 2 => bad("feature mode needs dim >= 2".into()),
            _ => Ok(()),
        }
    }

    /// Descriptor grid size in cells.
    pub fn grid_size(&self) -> (usize, usize) {
        match self.mode {
            SynthMode::Features => self.image_size,
            SynthMode::Raster => (
                (self.image_size.0 / self.cell_size).saturating_sub(2),
                (self.image_size.1 / self.cell_size).saturating_sub(2),
            ),
        }
    }

    fn channels(&self) -> usize {
        match self.mode {
            SynthMode::Features => self.dim,
            SynthMode::Raster => NUM_ORIENTATIONS,
        }
    }
}

/// Layout probabilities `∝ (k + 1)^-alpha` for `k < n`.
pub fn shape_probabilities(alpha: f64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powf(-alpha)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Patterns and layout library shared by every split drawn from one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    /// `root_patterns[s][r * cols + c]` is the channel of root cell `(r, c)`.
    pub root_patterns: Vec<Vec<usize>>,
    /// Per non-root part, the channel of each of its cells.
    pub part_patterns: Vec<Vec<usize>>,
    /// Part offsets relative to the root, one entry per layout.
    pub shapes: Vec<Vec<Pos>>,
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed.unwrap_or(config.seed));
        let ch = config.channels();
        let (rh, rw) = config.root_size;
        let (ph, pw) = config.part_size;
        let root_patterns = (0..config.n_subcategories)
            .map(|_| (0..rh * rw).map(|_| rng.gen_range(0..ch)).collect())
            .collect();
        let part_patterns = (1..config.parts_per_object)
            .map(|_| (0..ph * pw).map(|_| rng.gen_range(0..ch)).collect())
            .collect();
        let n_parts = config.parts_per_object - 1;
        let positions = ((rh - ph + 1) * (rw - pw + 1)) as f64;
        let capacity = positions.powi(n_parts as i32);
        if (config.shape_library_size as f64) > capacity {
            return Err(Error::Validation(format!(
                "only {capacity} distinct layouts exist, {} requested",
                config.shape_library_size
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut shapes = Vec::with_capacity(config.shape_library_size);
        while shapes.len() < config.shape_library_size {
            let s: Vec<Pos> = (0..n_parts)
                .map(|_| Pos::new(rng.gen_range(0..=(rh - ph) as i64), rng.gen_range(0..=(rw - pw) as i64)))
                .collect();
            if seen.insert(s.clone()) {
                shapes.push(s);
            }
        }
        Ok(Self {
            root_patterns,
            part_patterns,
            shapes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub image: usize,
    pub bbox: Rect,
    /// Cell positions of root and parts on the level-0 grid.
    pub placement: Placement,
    pub shape: usize,
    pub subcategory: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub grid: FeatureGrid,
    pub raster: Option<Raster>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
    pub objects: Vec<SynthObject>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SynthDataset {
    pub fn placements(&self) -> Vec<Placement> {
        self.objects.iter().map(|o| o.placement.clone()).collect()
    }
}

pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Canvas {
    rows: usize,
    cols: usize,
    /// Strong channel of each cell.
    channel: Vec<usize>,
}

impl Canvas {
    fn paint(&mut self, at: Pos, h: usize, w: usize, pattern: &[usize]) {
        for r in 0..h {
            for c in 0..w {
                let idx = (at.row as usize + r) * self.cols + at.col as usize + c;
                self.channel[idx] = pattern[r * w + c];
            }
        }
    }
}

fn overlaps(a: Pos, b: Pos, size: (usize, usize)) -> bool {
    (a.row - b.row).unsigned_abs() < size.0 as u64 && (a.col - b.col).unsigned_abs() < size.1 as u64
}

/// Lays out one image: clutter, distractors, then objects.
fn compose(
    config: &SynthConfig,
    world: &SynthWorld,
    layout_dist: &WeightedIndex<f64>,
    image: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Canvas, Vec<SynthObject>)> {
    let (rows, cols) = config.grid_size();
    let ch = config.channels();
    let mut canvas = Canvas {
        rows,
        cols,
        channel: (0..rows * cols).map(|_| rng.gen_range(0..ch)).collect(),
    };
    let (ph, pw) = config.part_size;
    if !world.part_patterns.is_empty() {
        for _ in 0..config.distractors {
            let j = rng.gen_range(0..world.part_patterns.len());
            let at = Pos::new(rng.gen_range(0..=(rows - ph) as i64), rng.gen_range(0..=(cols - pw) as i64));
            canvas.paint(at, ph, pw, &world.part_patterns[j]);
        }
    }
    let (rh, rw) = config.root_size;
    let mut roots: Vec<Pos> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..config.objects_per_image {
        let mut tries = 0;
        let root = loop {
            let p = Pos::new(rng.gen_range(0..=(rows - rh) as i64), rng.gen_range(0..=(cols - rw) as i64));
            if roots.iter().all(|&q| !overlaps(p, q, config.root_size)) {
                break p;
            }
            tries += 1;
            if tries >= config.max_retries {
                return Err(Error::Data(format!(
                    "image {image}: no free spot for object {} after {tries} tries",
                    roots.len() + 1
                )));
            }
        };
        roots.push(root);
        let s = rng.gen_range(0..config.n_subcategories);
        let shape = layout_dist.sample(rng);
        let mut pattern = world.root_patterns[s].clone();
        for v in &mut pattern {
            if rng.gen::<f64>() < config.corruption {
                *v = rng.gen_range(0..ch);
            }
        }
        canvas.paint(root, rh, rw, &pattern);
        let offsets: Vec<Pos> = world.shapes[shape]
            .iter()
            .map(|&o| {
                if config.part_jitter > 0.0 && rng.gen::<f64>() < config.part_jitter {
                    let (dr, dc) = [(0, 1), (0, -1), (1, 0), (-1, 0)][rng.gen_range(0..4)];
                    Pos::new(
                        (o.row + dr).clamp(0, (rh - ph) as i64),
                        (o.col + dc).clamp(0, (rw - pw) as i64),
                    )
                } else {
                    o
                }
            })
            .collect();
        for (j, o) in offsets.iter().enumerate() {
            canvas.paint(root + *o, ph, pw, &world.part_patterns[j]);
        }
        objects.push(SynthObject {
            image,
            bbox: Rect::new(0.0, 0.0, 0.0, 0.0),
            placement: Placement::from_root_and_offsets(root, &offsets),
            shape,
            subcategory: s,
        });
    }
    Ok((canvas, objects))
}

fn render_features(config: &SynthConfig, canvas: &Canvas, rng: &mut ChaCha8Rng) -> Result<FeatureGrid> {
    let dim = config.dim;
    let floor = config.noise_level * PEAK * 0.5;
    let mut data = Vec::with_capacity(canvas.rows * canvas.cols * dim);
    for &strong in &canvas.channel {
        for d in 0..dim {
            let v = if d == strong {
                PEAK * (1.0 - 0.5 * config.noise_level * rng.gen::<f64>())
            } else {
                floor * rng.gen::<f64>()
            };
            // f32-representable so binary dumps round-trip exactly
            data.push(v as f32 as f64);
        }
    }
    Ok(FeatureGrid::new(canvas.rows, canvas.cols, dim, config.cell_size, 1.0, data)?)
}

fn render_raster(config: &SynthConfig, canvas: &Canvas, rng: &mut ChaCha8Rng) -> Result<(Raster, FeatureGrid)> {
    let (height, width) = config.image_size;
    let cs = config.cell_size as f64;
    let noise = Normal::new(0.0, 0.15 * config.noise_level + 1e-12).map_err(|e| Error::Validation(e.to_string()))?;
    let mut img = Raster::filled(width, height, 0.0);
    for r in 0..canvas.rows {
        for c in 0..canvas.cols {
            let o = canvas.channel[r * canvas.cols + c];
            // the bar runs perpendicular to the gradient direction of bin `o`
            let theta = (o as f64 + 0.5) * std::f64::consts::PI / NUM_ORIENTATIONS as f64;
            let (nx, ny) = (theta.cos(), theta.sin());
            let cx = (c + 1) as f64 * cs + cs / 2.0;
            let cy = (r + 1) as f64 * cs + cs / 2.0;
            for py in 0..config.cell_size {
                for px in 0..config.cell_size {
                    let x = (c + 1) * config.cell_size + px;
                    let y = (r + 1) * config.cell_size + py;
                    let d = (x as f64 + 0.5 - cx) * nx + (y as f64 + 0.5 - cy) * ny;
                    if d.abs() < 1.0 {
                        img.set(x, y, 1.0);
                    }
                }
            }
        }
    }
    if config.noise_level > 0.0 {
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, (img.get(x, y) + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    // quantize to what a PGM file stores
    let img = Raster::from_u8(width, height, &img.to_u8())?;
    let grid = compute_features(&img, config.cell_size)?;
    Ok((img, grid))
}

/// Draws the dataset. Images are generated in parallel from per-image seeds,
/// so the output is identical for a given config regardless of thread count.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let world = SynthWorld::new(config)?;
    generate_in_world(config, &world)
}

/// As [`generate`], with an explicit world.
pub fn generate_in_world(config: &SynthConfig, world: &SynthWorld) -> Result<SynthDataset> {
    config.validate()?;
    let layout_dist = WeightedIndex::new(shape_probabilities(config.shape_tail_exponent, world.shapes.len()))
        .map_err(|e| Error::Validation(format!("layout weights: {e}")))?;
    let rendered: Vec<Result<(SynthImage, Vec<SynthObject>)>> = (0..config.n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
            let (canvas, mut objects) = compose(config, world, &layout_dist, i, &mut rng)?;
            let (grid, raster) = match config.mode {
                SynthMode::Features => (render_features(config, &canvas, &mut rng)?, None),
                SynthMode::Raster => {
                    let (img, grid) = render_raster(config, &canvas, &mut rng)?;
                    (grid, Some(img))
                }
            };
            for o in &mut objects {
                let root = o.placement.root();
                o.bbox = grid.cell_rect(root.row as usize, root.col as usize, config.root_size.0, config.root_size.1);
            }
            Ok((
                SynthImage {
                    id: format!("img{i:05}"),
                    grid,
                    raster,
                },
                objects,
            ))
        })
        .collect();
    let mut images = Vec::with_capacity(config.n_images);
    let mut objects = Vec::new();
    let mut ground_truth = Vec::with_capacity(config.n_images);
    for r in rendered {
        let (img, objs) = r?;
        ground_truth.push(GroundTruth {
            image_id: img.id.clone(),
            boxes: objs.iter().map(|o| GtBox::from_rect(o.bbox, false)).collect(),
        });
        images.push(img);
        objects.extend(objs);
    }
    Ok(SynthDataset {
        config: config.clone(),
        images,
        objects,
        ground_truth,
    })
}

/// Counts of distinct quantized relative layouts, most frequent first (ties
/// by layout). An infinite `q` puts every placement in one bin.
pub fn shape_histogram(placements: &[Placement], q: f64) -> Result<Vec<(Vec<Pos>, usize)>> {
    if !(q > 0.0) {
        return Err(Error::Validation(format!("bin size must be positive, got {q}")));
    }
    if let Some(first) = placements.first() {
        if let Some(bad) = placements.iter().find(|z| z.0.len() != first.0.len()) {
            return Err(Error::Validation(format!(
                "placements mix {} and {} parts",
                first.0.len(),
                bad.0.len()
            )));
        }
    }
    let mut counts: BTreeMap<Vec<Pos>, usize> = BTreeMap::new();
    for z in placements {
        let key = if q.is_infinite() {
            vec![Pos::new(0, 0); z.0.len().saturating_sub(1)]
        } else {
            quantize_shape(&z.relative(), q)
        };
        *counts.entry(key).or_default() += 1;
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}
