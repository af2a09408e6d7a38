//! Fixed versus cross-validated C when the positive set doubles and contains
//! mislabeled windows.
//!
//! Set A holds `n_clean` object windows and `n_noisy` background windows
//! labeled positive. Set B doubles A according to [`Growth`]. A single rigid
//! template is trained on each, with A's cross-validated C held fixed for B
//! and, separately, with B's own cross-validated C. Copies of a window share
//! a cross-validation group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_model, prepare_data, DatasetSource, ExperimentConfig, PreparedData};
use crate::data_io::SavedModel;
use crate::error::{Error, Result};
use crate::features::{extract_window, FeatureGrid, WindowDescriptor};
use crate::registry::FamilyParams;
use crate::synthdata::{derive_seed, generate_in_world, SynthConfig, SynthWorld};
use crate::train::{cross_validate_c, train_mixture, Miner, RigidMiner, TrainConfig};

/// How set B is built from set A.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// A plus a second copy of every positive, clean and noisy.
    #[default]
    DuplicateAll,
    /// A plus a second copy of every noisy positive.
    DuplicateNoisy,
    /// A plus `n_clean` new object windows and a second copy of every noisy
    /// positive.
    FreshClean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizationConfig {
    pub growth: Growth,
    pub synth: SynthConfig,
    pub n_clean: usize,
    pub n_noisy: usize,
    pub n_neg_images: usize,
    pub n_test_images: usize,
    pub root: (usize, usize),
    pub train: TrainConfig,
    pub folds: usize,
    pub cv_neg_per_image: usize,
    /// Overrides the C held fixed for set B; `None` uses A's cross-validated C.
    pub fixed_c: Option<f64>,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            growth: Growth::default(),
            synth: SynthConfig::default(),
            n_clean: 20,
            n_noisy: 20,
            n_neg_images: 20,
            n_test_images: 80,
            root: (6, 6),
            // powers of two, so halving any grid C stays on the grid
            train: TrainConfig {
                c_grid: (-4..=3).map(|e| 2f64.powi(e)).collect(),
                ..FamilyParams::default().train
            },
            folds: 5,
            cv_neg_per_image: 5,
            fixed_c: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationResult {
    pub seed: u64,
    pub c_a: f64,
    pub c_b: f64,
    /// Set A at its cross-validated C.
    pub ap_a: f64,
    /// Set B at the fixed C.
    pub ap_b_fixed: f64,
    /// Set B at its own cross-validated C.
    pub ap_b_cv: f64,
}

struct PositiveSet {
    windows: Vec<WindowDescriptor>,
    groups: Vec<u64>,
}

fn train_eval(set: &PositiveSet, c: f64, data: &PreparedData, config: &RegularizationConfig, exp: &ExperimentConfig, seed: u64) -> Result<f64> {
    let train = TrainConfig {
        c,
        seed,
        ..config.train.clone()
    };
    let fit = train_mixture(&[set.windows.clone()], &data.neg_grids, &[c], &train)?;
    evaluate_model(&SavedModel::Mixture(fit.model), data, exp)
}

fn cv_c(set: &PositiveSet, neg: &[Vec<f64>], config: &RegularizationConfig, seed: u64) -> Result<f64> {
    let pos: Vec<&[f64]> = set.windows.iter().map(|w| w.values.as_slice()).collect();
    let neg: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
    let grid = config.train.c_grid_for(pos.first().map_or(0, |p| p.len()));
    Ok(cross_validate_c(&pos, Some(&set.groups), &neg, &grid, config.folds, seed, &config.train.svm_settings())?.best_c)
}

/// One seeded run of the study.
pub fn regularization_run(config: &RegularizationConfig, seed: u64) -> Result<RegularizationResult> {
    if config.n_clean == 0 {
        return Err(Error::Validation("need clean positives".into()));
    }
    let exp = ExperimentConfig {
        dataset: DatasetSource::Synth(config.synth.clone()),
        n_train_images: 2 * config.n_clean,
        n_neg_images: config.n_neg_images,
        n_test_images: config.n_test_images,
        ..ExperimentConfig::default()
    };
    let data = prepare_data(&exp, seed)?;
    if data.pool.len() < 2 * config.n_clean {
        return Err(Error::Data(format!("pool has {} objects, need {}", data.pool.len(), 2 * config.n_clean)));
    }
    let (h, w) = config.root;
    let clean: Vec<WindowDescriptor> = data.pool[..2 * config.n_clean]
        .iter()
        .map(|(g, z)| {
            let r = z.root();
            extract_window(&data.train_grids[*g], (r.row as usize, r.col as usize), h, w)
        })
        .collect::<Result<_>>()?;

    // mislabeled windows come from their own background images
    let world = SynthWorld::new(&SynthConfig {
        world_seed: Some(config.synth.world_seed.unwrap_or(seed)),
        ..config.synth.clone()
    })?;
    let noise_images = generate_in_world(
        &SynthConfig {
            seed: derive_seed(seed, 4),
            n_images: config.n_noisy.max(1),
            objects_per_image: 0,
            ..config.synth.clone()
        },
        &world,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5));
    let noisy: Vec<WindowDescriptor> = (0..config.n_noisy)
        .map(|i| {
            let g: &FeatureGrid = &noise_images.images[i % noise_images.images.len()].grid;
            let row = rng.gen_range(0..=g.rows() - h);
            let col = rng.gen_range(0..=g.cols() - w);
            extract_window(g, (row, col), h, w)
        })
        .collect::<Result<_>>()?;

    let n = config.n_clean as u64;
    let m = noisy.len() as u64;
    let clean_ids = |k: u64| 0..k;
    let noisy_ids = || (0..m).map(|i| 2 * n + i);
    let set_a = PositiveSet {
        windows: clean[..config.n_clean].iter().chain(&noisy).cloned().collect(),
        groups: clean_ids(n).chain(noisy_ids()).collect(),
    };
    let set_b = match config.growth {
        Growth::DuplicateAll => PositiveSet {
            windows: set_a.windows.iter().chain(&set_a.windows).cloned().collect(),
            groups: set_a.groups.iter().chain(&set_a.groups).copied().collect(),
        },
        Growth::DuplicateNoisy => PositiveSet {
            windows: set_a.windows.iter().chain(&noisy).cloned().collect(),
            groups: set_a.groups.iter().copied().chain(noisy_ids()).collect(),
        },
        Growth::FreshClean => PositiveSet {
            windows: clean.iter().chain(&noisy).chain(&noisy).cloned().collect(),
            groups: clean_ids(2 * n).chain(noisy_ids()).chain(noisy_ids()).collect(),
        },
    };

    let miner = RigidMiner { h, w, dim: clean[0].shape.2 };
    let mut neg = Vec::new();
    for g in &data.neg_grids {
        neg.extend(miner.random_negatives(g, config.cv_neg_per_image, &mut rng)?.into_iter().map(|c| c.features));
    }
    let c_a = cv_c(&set_a, &neg, config, derive_seed(seed, 6))?;
    let c_b = cv_c(&set_b, &neg, config, derive_seed(seed, 6))?;
    let c_fixed = config.fixed_c.unwrap_or(c_a);
    let train_seed = derive_seed(seed, 7);
    Ok(RegularizationResult {
        seed,
        c_a,
        c_b,
        ap_a: train_eval(&set_a, c_a, &data, config, &exp, train_seed)?,
        ap_b_fixed: train_eval(&set_b, c_fixed, &data, config, &exp, train_seed)?,
        ap_b_cv: train_eval(&set_b, c_b, &data, config, &exp, train_seed)?,
    })
}

/// Runs the study for every seed in parallel.
pub fn regularization_study(config: &RegularizationConfig, seeds: &[u64]) -> Result<Vec<RegularizationResult>> {
    seeds.par_iter().map(|&s| regularization_run(config, s)).collect()
}
