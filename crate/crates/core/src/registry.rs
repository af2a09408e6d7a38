//! Model families behind a common trait, looked up by name.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::SavedModel;
use crate::error::{Error, Result};
use crate::features::{extract_window, FeatureGrid, WindowDescriptor};
use crate::partmodel::{Placement, ShapeModel, Spring};
use crate::train::{
    build_edpm, build_epm, cross_validate_c, cross_validate_mixture, star_features, star_skeleton,
    train_mined, train_mixture, train_star_model, Miner, StarExample, StarFit, StarLayout, StarMiner, TrainConfig,
};

/// Family-independent training settings of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyParams {
    pub folds: usize,
    pub train: TrainConfig,
    pub layout: StarLayout,
    /// Layout quantization bin for exemplar models, in cells.
    pub shape_bin: f64,
    /// Multiplies the DPM springs when building an EDPM. The DPM springs
    /// cover the spread around one mean anchor; around each exemplar the
    /// kernel should be narrower.
    pub edpm_beta_scale: f64,
    /// Random negative windows per negative image for cross-validation, on
    /// top of the hard negatives of a reference model.
    pub cv_neg_per_image: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            folds: 3,
            train: TrainConfig {
                c_grid: vec![0.01, 0.1, 1.0, 10.0],
                convergence_tol: 1e-3,
                max_epochs: 500,
                neg_per_image_cap: 10,
                max_mining_rounds: 4,
                ..TrainConfig::default()
            },
            layout: StarLayout {
                root: (6, 6),
                parts: vec![(2, 2); 3],
            },
            shape_bin: 1.0,
            edpm_beta_scale: 10.0,
            cv_neg_per_image: 5,
        }
    }
}

/// One training positive of a cell.
#[derive(Clone, Debug)]
pub struct CellExample {
    /// Stable id of the object in the training pool.
    pub id: usize,
    pub grid: usize,
    pub placement: Placement,
    pub cluster: usize,
}

/// Everything a family needs to train one (K, N, resample) cell.
pub struct CellData<'a> {
    pub grids: &'a [FeatureGrid],
    pub examples: Vec<CellExample>,
    pub neg_grids: &'a [FeatureGrid],
    pub params: &'a FamilyParams,
    pub seed: u64,
    star: OnceLock<std::result::Result<Arc<StarCell>, String>>,
}

/// DPM trained once per cell and shared by the star families.
pub struct StarCell {
    pub fit: StarFit,
    pub c_chosen: f64,
    pub cv_ap: f64,
}

impl<'a> CellData<'a> {
    pub fn new(
        grids: &'a [FeatureGrid],
        examples: Vec<CellExample>,
        neg_grids: &'a [FeatureGrid],
        params: &'a FamilyParams,
        seed: u64,
    ) -> Self {
        Self {
            grids,
            examples,
            neg_grids,
            params,
            seed,
            star: OnceLock::new(),
        }
    }

    pub fn placements(&self) -> Vec<Placement> {
        self.examples.iter().map(|e| e.placement.clone()).collect()
    }

    fn groups(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id as u64).collect()
    }

    fn root_window(&self, e: &CellExample) -> Result<WindowDescriptor> {
        let r = e.placement.root();
        let (h, w) = self.params.layout.root;
        extract_window(&self.grids[e.grid], (r.row as usize, r.col as usize), h, w)
    }

    /// Held-out negatives for choosing C: random windows plus the hard
    /// negatives mined by a reference model trained at `params.train.c` on
    /// every positive of the cell.
    fn cv_negatives(&self, miner: &dyn Miner, pos: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut neg = Vec::new();
        for g in self.neg_grids {
            neg.extend(miner.random_negatives(g, self.params.cv_neg_per_image, rng)?.into_iter().map(|c| c.features));
        }
        let reference = train_mined(miner, pos, self.neg_grids, self.params.train.c, &self.params.train, rng)?;
        neg.extend(reference.negatives);
        Ok(neg)
    }

    /// The cell's DPM, trained on first use.
    pub fn star(&self) -> Result<Arc<StarCell>> {
        self.star
            .get_or_init(|| self.train_star().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Model)
    }

    fn train_star(&self) -> Result<StarCell> {
        let examples: Vec<StarExample<'_>> = self
            .examples
            .iter()
            .map(|e| StarExample {
                grid: &self.grids[e.grid],
                placement: &e.placement,
            })
            .collect();
        let skeleton = star_skeleton(&examples, &self.params.layout)?;
        let pos: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| star_features(&skeleton, e.grid, e.placement))
            .collect::<Result<_>>()?;
        let miner = StarMiner::new(skeleton.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5741_5200);
        let neg = self.cv_negatives(&miner, &pos, &mut rng)?;
        let grid = self.params.train.c_grid_for(miner.feature_len());
        let cv = cross_validate_c(
            &refs(&pos),
            Some(&self.groups()),
            &refs(&neg),
            &grid,
            self.params.folds,
            self.seed,
            &self.params.train.svm_settings(),
        )?;
        let config = TrainConfig {
            c: cv.best_c,
            ..self.params.train.clone()
        };
        let fit = train_star_model(&examples, &self.params.layout, self.neg_grids, cv.best_c, &config, &mut rng)?;
        let cv_ap = cv.table.iter().find(|r| r.c == cv.best_c).map_or(f64::NAN, |r| r.mean_ap);
        Ok(StarCell {
            fit,
            c_chosen: cv.best_c,
            cv_ap,
        })
    }
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// A trained model with its selection bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: SavedModel,
    pub c_chosen: f64,
    /// Mean held-out window AP at the chosen `C`.
    pub cv_ap: f64,
    pub train_objective: f64,
    /// Mixture components or exemplars.
    pub components: usize,
}

pub trait ModelFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the family trains one component per cluster.
    fn uses_clusters(&self) -> bool {
        false
    }

    fn train(&self, cell: &CellData<'_>) -> Result<TrainedModel>;
}

/// Independent rigid templates, one per cluster, `C` shared and chosen by
/// cross-validating the whole mixture.
pub struct MixtureFamily;

impl ModelFamily for MixtureFamily {
    fn name(&self) -> &'static str {
        "mixture"
    }

    fn uses_clusters(&self) -> bool {
        true
    }

    fn train(&self, cell: &CellData<'_>) -> Result<TrainedModel> {
        let k = cell.examples.iter().map(|e| e.cluster + 1).max().unwrap_or(0);
        let mut clusters: Vec<Vec<WindowDescriptor>> = vec![Vec::new(); k];
        let mut pos = Vec::with_capacity(cell.examples.len());
        for e in &cell.examples {
            let w = cell.root_window(e)?;
            pos.push(w.values.clone());
            clusters[e.cluster].push(w);
        }
        let labels: Vec<usize> = cell.examples.iter().map(|e| e.cluster).collect();
        let (h, w) = cell.params.layout.root;
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed ^ 0x4D49_5800);
        let miner = crate::train::RigidMiner { h, w, dim: cell.grids.first().map_or(0, FeatureGrid::dim) };
        let neg = cell.cv_negatives(&miner, &pos, &mut rng)?;
        let grid = cell.params.train.c_grid_for(miner.feature_len());
        let cv = cross_validate_mixture(
            &refs(&pos),
            &labels,
            Some(&cell.groups()),
            &refs(&neg),
            &grid,
            cell.params.folds,
            cell.seed,
            &cell.params.train.svm_settings(),
        )?;
        let cs = vec![cv.best_c; k];
        let config = TrainConfig {
            c: cv.best_c,
            seed: cell.seed,
            ..cell.params.train.clone()
        };
        let fit = train_mixture(&clusters, cell.neg_grids, &cs, &config)?;
        let cv_ap = cv.table.iter().find(|r| r.c == cv.best_c).map_or(f64::NAN, |r| r.mean_ap);
        Ok(TrainedModel {
            components: fit.model.k(),
            train_objective: fit.objectives.iter().sum(),
            model: SavedModel::Mixture(fit.model),
            c_chosen: cv.best_c,
            cv_ap,
        })
    }
}

/// Single-anchor deformable part model.
pub struct DpmFamily;

impl ModelFamily for DpmFamily {
    fn name(&self) -> &'static str {
        "dpm"
    }

    fn train(&self, cell: &CellData<'_>) -> Result<TrainedModel> {
        let s = cell.star()?;
        Ok(TrainedModel {
            model: SavedModel::Star(s.fit.model.clone()),
            c_chosen: s.c_chosen,
            cv_ap: s.cv_ap,
            train_objective: *s.fit.report.full_objectives.last().unwrap_or(&f64::NAN),
            components: 1,
        })
    }
}

/// Part model restricted to the training layouts.
pub struct EpmFamily;

impl ModelFamily for EpmFamily {
    fn name(&self) -> &'static str {
        "epm"
    }

    fn train(&self, cell: &CellData<'_>) -> Result<TrainedModel> {
        let s = cell.star()?;
        let model = build_epm(&s.fit.model, &cell.placements(), cell.params.shape_bin)?;
        Ok(TrainedModel {
            components: model.num_mixtures(),
            model: SavedModel::Star(model),
            c_chosen: s.c_chosen,
            cv_ap: s.cv_ap,
            train_objective: *s.fit.report.full_objectives.last().unwrap_or(&f64::NAN),
        })
    }
}

/// DPM mixture with one anchor set per training layout, sharing filters.
pub struct EdpmFamily;

impl ModelFamily for EdpmFamily {
    fn name(&self) -> &'static str {
        "edpm"
    }

    fn train(&self, cell: &CellData<'_>) -> Result<TrainedModel> {
        let s = cell.star()?;
        let mut model = build_edpm(&s.fit.model, &cell.placements(), cell.params.shape_bin)?;
        let k = cell.params.edpm_beta_scale;
        for sp in &mut model.springs {
            *sp = Spring::new(sp.bx * k, sp.by * k);
        }
        debug_assert!(matches!(model.shape, ShapeModel::Edpm { .. }));
        model.validate()?;
        Ok(TrainedModel {
            components: model.num_mixtures(),
            model: SavedModel::Star(model),
            c_chosen: s.c_chosen,
            cv_ap: s.cv_ap,
            train_objective: *s.fit.report.full_objectives.last().unwrap_or(&f64::NAN),
        })
    }
}

/// Name-to-family table.
pub struct Registry {
    families: BTreeMap<&'static str, Box<dyn ModelFamily>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(MixtureFamily));
        r.register(Box::new(DpmFamily));
        r.register(Box::new(EpmFamily));
        r.register(Box::new(EdpmFamily));
        r
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            families: BTreeMap::new(),
        }
    }

    /// Adds or replaces a family under its own name.
    pub fn register(&mut self, family: Box<dyn ModelFamily>) {
        self.families.insert(family.name(), family);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ModelFamily> {
        self.families
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownModelType {
                found: name.to_string(),
                supported: self.names().join(", "),
            })
    }
}
