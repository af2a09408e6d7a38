use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::partmodel::{
    dt_call_count, reset_dt_call_count, score_dpm, score_edpm, score_edpm_per_mixture, AnchorSet, PartFilter, Pos,
    ShapeModel, Spring, StarModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub grid_size: (usize, usize),
    pub dim: usize,
    pub root: (usize, usize),
    pub part: (usize, usize),
    /// Parts including the root.
    pub parts: usize,
    pub mixtures: Vec<usize>,
    /// Mixture counts also timed with the per-mixture reference.
    pub naive_mixtures: Vec<usize>,
    pub grids: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid_size: (30, 30),
            dim: 36,
            root: (6, 6),
            part: (3, 3),
            parts: 3,
            mixtures: vec![6, 100, 1000],
            naive_mixtures: vec![1000],
            grids: 2,
            repetitions: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    #[serde(rename = "M")]
    pub m: usize,
    /// Median wall time per grid over the repetitions.
    pub seconds_per_image: f64,
    pub dt_calls_per_image: f64,
}

fn random_filter(rng: &mut ChaCha8Rng, (h, w): (usize, usize), dim: usize) -> PartFilter {
    PartFilter::new(h, w, (0..h * w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `m` distinct anchor sets inside the root window when there are enough.
fn anchor_sets(rng: &mut ChaCha8Rng, parts: usize, root: (usize, usize), part: (usize, usize), m: usize) -> Vec<AnchorSet> {
    let rows = (root.0 + 2 - part.0.min(root.0)) as i64;
    let cols = (root.1 + 2 - part.1.min(root.1)) as i64;
    let space = ((rows * cols) as f64).powi(parts as i32 - 1);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let a: AnchorSet = (1..parts).map(|_| Pos::new(rng.gen_range(-1..rows - 1), rng.gen_range(-1..cols - 1))).collect();
        if seen.insert(a.clone()) || (seen.len() as f64) >= space {
            out.push(a);
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median per-image time of `f` over `reps` passes after one warmup pass,
/// with the `dt_2d` calls made per image.
fn time_per_image(grids: &[FeatureGrid], reps: usize, f: impl Fn(&FeatureGrid) -> Result<()>) -> Result<(f64, f64)> {
    for g in grids {
        f(g)?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut calls = 0;
    for _ in 0..reps {
        reset_dt_call_count();
        let t = Instant::now();
        for g in grids {
            f(g)?;
        }
        times.push(t.elapsed().as_secs_f64() / grids.len() as f64);
        calls = dt_call_count();
    }
    Ok((median(times), calls as f64 / grids.len() as f64))
}

/// Times a single-anchor DPM and EDPMs of several mixture counts that share
/// the same filters and springs, plus the per-mixture reference. Runs on the
/// calling thread so the call counter sees every transform.
pub fn benchmark_inference(config: &BenchConfig) -> Result<Vec<TimingRow>> {
    if config.parts < 2 || config.grids == 0 || config.repetitions == 0 || config.mixtures.contains(&0) {
        return Err(Error::Validation("benchmark needs >= 2 parts, grids, repetitions and M > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (rows, cols) = config.grid_size;
    let grids: Vec<FeatureGrid> = (0..config.grids)
        .map(|_| {
            let data = (0..rows * cols * config.dim).map(|_| rng.gen_range(0.0..0.2)).collect();
            FeatureGrid::new(rows, cols, config.dim, 8, 1.0, data)
        })
        .collect::<Result<_>>()?;
    let mut parts = vec![random_filter(&mut rng, config.root, config.dim)];
    let mut springs = Vec::new();
    for _ in 1..config.parts {
        parts.push(random_filter(&mut rng, config.part, config.dim));
        springs.push(Spring::new(rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)));
    }
    let max_m = config.mixtures.iter().chain(&config.naive_mixtures).copied().max().unwrap_or(1);
    let sets = anchor_sets(&mut rng, config.parts, config.root, config.part, max_m);
    let dpm = StarModel::new(config.dim, parts, springs, sets[0].clone(), ShapeModel::Dpm)?;
    let mut rows_out = Vec::new();
    let (t, c) = time_per_image(&grids, config.repetitions, |g| score_dpm(&dpm, g).map(|_| ()))?;
    rows_out.push(TimingRow {
        model: "dpm".into(),
        m: 1,
        seconds_per_image: t,
        dt_calls_per_image: c,
    });
    for &m in &config.mixtures {
        let edpm = dpm.with_shape(ShapeModel::Edpm {
            exemplars: sets[..m].to_vec(),
        })?;
        let (t, c) = time_per_image(&grids, config.repetitions, |g| score_edpm(&edpm, g).map(|_| ()))?;
        rows_out.push(TimingRow {
            model: "edpm".into(),
            m,
            seconds_per_image: t,
            dt_calls_per_image: c,
        });
    }
    for &m in &config.naive_mixtures {
        let edpm = dpm.with_shape(ShapeModel::Edpm {
            exemplars: sets[..m].to_vec(),
        })?;
        let (t, c) = time_per_image(&grids, config.repetitions, |g| score_edpm_per_mixture(&edpm, g).map(|_| ()))?;
        rows_out.push(TimingRow {
            model: "edpm-naive".into(),
            m,
            seconds_per_image: t,
            dt_calls_per_image: c,
        });
    }
    Ok(rows_out)
}
