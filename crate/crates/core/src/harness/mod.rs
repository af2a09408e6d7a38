//! Experiment runner: vary K and N with nested resampling, train every
//! registered family per cell, evaluate on a fresh test split and summarize.

mod analysis;
mod bench;
mod output;
mod regularization;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{hierarchical_kmeans, partitioned_sample, refine_consistency, ConsistentSets, SampledPartition};
use crate::data_io::{load_dataset, read_json, save_model, write_json, ImageData, SavedModel, Split};
use crate::detect::{detect, nms};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, ApMode, GroundTruth, ScoredBox};
use crate::features::{compute_features, extract_window, FeatureGrid, FeaturePyramid, DEFAULT_CELL_SIZE};
use crate::partmodel::Placement;
use crate::registry::{CellData, CellExample, FamilyParams, Registry};
use crate::synthdata::{derive_seed, generate_in_world, SynthConfig, SynthWorld};

pub use analysis::{best_k_by_n, fit_loglinear, mean_ap_by_n, sign_test, LogLinearFit, SignTest};
pub use bench::{benchmark_inference, BenchConfig, TimingRow};
pub use output::{emit_outputs, read_records_csv, select_records, write_records_csv, RecordFilter};
pub use regularization::{regularization_run, regularization_study, Growth, RegularizationConfig, RegularizationResult};

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated per seed; the seed also picks the world unless the config fixes `world_seed`.
    Synth(SynthConfig),
    /// A dataset manifest with placements; train/test from its split tags.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub k_list: Vec<usize>,
    /// Training-set sizes; the full pool size is always added.
    pub n_list: Vec<usize>,
    pub resamples: usize,
    pub families: Vec<String>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    /// Synthetic source only: images with one object each.
    pub n_train_images: usize,
    pub n_neg_images: usize,
    pub n_test_images: usize,
    pub params: FamilyParams,
    pub iou_threshold: f64,
    pub nms_overlap: f64,
    pub ap_mode: ApMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 2, 4, 8, 16],
            n_list: vec![50, 100, 500, 1000, 3000],
            resamples: 5,
            families: vec!["mixture".into(), "dpm".into(), "epm".into(), "edpm".into()],
            seeds: vec![0],
            dataset: DatasetSource::Synth(SynthConfig::default()),
            n_train_images: 500,
            n_neg_images: 20,
            n_test_images: 100,
            params: FamilyParams::default(),
            iou_threshold: 0.5,
            nms_overlap: 0.5,
            ap_mode: ApMode::Continuous,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.k_list.is_empty() || self.n_list.is_empty() || self.families.is_empty() || self.seeds.is_empty() {
            return bad("K, N, family and seed lists must be nonempty");
        }
        if self.k_list.iter().any(|k| !k.is_power_of_two()) {
            return bad("every K must be a power of two");
        }
        if self.n_list.contains(&0) || self.resamples == 0 {
            return bad("N values and resample count must be positive");
        }
        for f in &self.families {
            registry.get(f)?;
        }
        if let DatasetSource::Synth(s) = &self.dataset {
            s.validate()?;
            if self.n_train_images == 0 || self.n_neg_images == 0 || self.n_test_images == 0 {
                return bad("synthetic splits must be nonempty");
            }
        }
        Ok(())
    }
}

/// One trained and evaluated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub family: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub resample: usize,
    pub resample_seed: u64,
    #[serde(rename = "C_chosen")]
    pub c_chosen: f64,
    pub cv_ap: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub train_objective: f64,
    pub components: usize,
    pub n_neg_images: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Cross-validated choice of K for one (family, seed, N, resample).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub family: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub resample: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub cv_ap: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Done,
    Failed,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub status: CellStatus,
    pub error: Option<String>,
}

/// Per-run bookkeeping written next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub cells: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<SummaryRow>,
    pub manifest: RunManifest,
    /// Distinct-layout histograms of each seed's training pool.
    pub longtail: BTreeMap<u64, Vec<usize>>,
}

impl RunOutput {
    pub fn complete(&self) -> bool {
        self.manifest.cells.iter().all(|c| c.status == CellStatus::Done)
    }
}

/// Training pool, negatives and test split of one seed.
pub struct PreparedData {
    pub train_grids: Vec<FeatureGrid>,
    /// Pool objects: `(grid index, placement)`; the index is the object id.
    pub pool: Vec<(usize, Placement)>,
    pub neg_grids: Vec<FeatureGrid>,
    pub test: Vec<(String, FeatureGrid)>,
    pub test_gt: Vec<GroundTruth>,
}

fn synth_split(base: &SynthConfig, world: &SynthWorld, seed: u64, images: usize, objects: usize) -> Result<crate::synthdata::SynthDataset> {
    let config = SynthConfig {
        seed,
        n_images: images,
        objects_per_image: objects,
        ..base.clone()
    };
    generate_in_world(&config, world)
}

/// Builds the data of one seed. Synthetic splits use independent derived
/// seeds in a shared world; the test split is never subsampled.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    match &config.dataset {
        DatasetSource::Synth(base) => {
            let world_config = SynthConfig {
                world_seed: Some(base.world_seed.unwrap_or(seed)),
                ..base.clone()
            };
            let world = SynthWorld::new(&world_config)?;
            let train = synth_split(base, &world, derive_seed(seed, 1), config.n_train_images, base.objects_per_image.max(1))?;
            let neg = synth_split(base, &world, derive_seed(seed, 2), config.n_neg_images, 0)?;
            let test = synth_split(base, &world, derive_seed(seed, 3), config.n_test_images, base.objects_per_image.max(1))?;
            let pool = train.objects.iter().map(|o| (o.image, o.placement.clone())).collect();
            let test_gt = test
                .ground_truth
                .iter()
                .map(|g| GroundTruth {
                    image_id: format!("test-{}", g.image_id),
                    boxes: g.boxes.clone(),
                })
                .collect();
            Ok(PreparedData {
                train_grids: train.images.into_iter().map(|i| i.grid).collect(),
                pool,
                neg_grids: neg.images.into_iter().map(|i| i.grid).collect(),
                test: test.images.into_iter().map(|i| (format!("test-{}", i.id), i.grid)).collect(),
                test_gt,
            })
        }
        DatasetSource::Manifest(path) => prepare_manifest(path),
    }
}

fn prepare_manifest(path: &Path) -> Result<PreparedData> {
    let data = load_dataset(path)?;
    let objects = data
        .objects
        .clone()
        .ok_or_else(|| Error::Data("experiments need a placements file in the manifest".into()))?;
    let grid_of = |e: &crate::data_io::ImageEntry| -> Result<FeatureGrid> {
        match data.load_image(e)? {
            ImageData::Features(g) => Ok(g),
            ImageData::Raster(r) => compute_features(&r, DEFAULT_CELL_SIZE),
        }
    };
    let gt: BTreeMap<&str, &GroundTruth> = data.ground_truth.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let mut out = PreparedData {
        train_grids: Vec::new(),
        pool: Vec::new(),
        neg_grids: Vec::new(),
        test: Vec::new(),
        test_gt: Vec::new(),
    };
    for (idx, e) in data.images.iter().enumerate() {
        let boxes = gt.get(e.id.as_str()).map_or(0, |g| g.boxes.len());
        match e.split {
            Split::Test => {
                out.test.push((e.id.clone(), grid_of(e)?));
                out.test_gt.push(GroundTruth {
                    image_id: e.id.clone(),
                    boxes: gt.get(e.id.as_str()).map(|g| g.boxes.clone()).unwrap_or_default(),
                });
            }
            Split::Train if boxes == 0 => out.neg_grids.push(grid_of(e)?),
            Split::Train => {
                let g = out.train_grids.len();
                out.train_grids.push(grid_of(e)?);
                out.pool.extend(objects.iter().filter(|o| o.image == idx).map(|o| (g, o.placement.clone())));
            }
        }
    }
    if out.pool.is_empty() || out.neg_grids.is_empty() || out.test.is_empty() {
        return Err(Error::Data("manifest needs training objects, negative images and a test split".into()));
    }
    Ok(out)
}

/// Training sets of one seed: `(K, N)` groups per resample.
pub struct SeedPlan {
    pub sizes: Vec<usize>,
    pub resample_seeds: Vec<u64>,
    pub partitions: Vec<Vec<SampledPartition>>,
    pub sets: Vec<ConsistentSets>,
}

/// Clusters the pool's root windows and draws the nested resamples.
pub fn plan_seed(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<SeedPlan> {
    let (h, w) = config.params.layout.root;
    let desc: Vec<Vec<f64>> = data
        .pool
        .iter()
        .map(|(g, z)| {
            let r = z.root();
            extract_window(&data.train_grids[*g], (r.row as usize, r.col as usize), h, w).map(|d| d.values)
        })
        .collect::<Result<_>>()?;
    let max_k = *config.k_list.iter().max().unwrap_or(&1);
    let tree = hierarchical_kmeans(&desc, max_k.trailing_zeros() as usize, derive_seed(seed, 10))?;
    let n_max = data.pool.len();
    let mut sizes: Vec<usize> = config.n_list.iter().copied().filter(|&n| n < n_max).collect();
    sizes.push(n_max);
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    let resample_seeds: Vec<u64> = (0..config.resamples).map(|r| derive_seed(seed, 100 + r as u64)).collect();
    let partitions: Vec<Vec<SampledPartition>> = resample_seeds
        .iter()
        .map(|&rs| partitioned_sample(&tree.leaves(), &sizes, rs))
        .collect::<Result<_>>()?;
    let sets = partitions
        .iter()
        .map(|p| refine_consistency(&tree, p))
        .collect::<Result<_>>()?;
    Ok(SeedPlan {
        sizes,
        resample_seeds,
        partitions,
        sets,
    })
}

/// Detects on every test image, suppresses overlaps and scores the pooled
/// detections.
pub fn evaluate_model(model: &SavedModel, data: &PreparedData, config: &ExperimentConfig) -> Result<f64> {
    let per_image: Vec<Vec<ScoredBox>> = data
        .test
        .par_iter()
        .map(|(id, grid)| {
            let dets = detect(model.detector(), &FeaturePyramid::single(grid.clone()), f64::NEG_INFINITY)?;
            Ok(nms(&dets, config.nms_overlap)?
                .into_iter()
                .map(|d| ScoredBox {
                    image_id: id.clone(),
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<ScoredBox> = per_image.into_iter().flatten().collect();
    Ok(evaluate_detections(&all, &data.test_gt, config.iou_threshold, config.ap_mode)?.ap)
}

/// Cell key: which family runs on which training set.
#[derive(Clone, Debug)]
struct Job {
    seed: u64,
    k: usize,
    n: usize,
    resample: usize,
    families: Vec<String>,
}

fn cell_id(family: &str, seed: u64, k: usize, n: usize, r: usize) -> String {
    format!("{family}_s{seed}_k{k}_n{n}_r{r}")
}

/// Ids in the `(K, N)` set, checked against what the cell trains on.
fn audit(examples: &[CellExample], groups: &[Vec<usize>]) -> Result<()> {
    let used: BTreeSet<usize> = examples.iter().map(|e| e.id).collect();
    let expected: BTreeSet<usize> = groups.iter().flatten().copied().collect();
    if used != expected || used.len() != examples.len() {
        return Err(Error::Provenance(format!(
            "cell trains on {} ids, sampled set has {}",
            used.len(),
            expected.len()
        )));
    }
    Ok(())
}

fn run_job(
    job: &Job,
    config: &ExperimentConfig,
    registry: &Registry,
    data: &PreparedData,
    plan: &SeedPlan,
) -> Vec<(String, Result<(ExperimentRecord, SavedModel)>)> {
    let set_k = if job.families.iter().all(|f| registry.get(f).map_or(false, |f| f.uses_clusters())) {
        job.k
    } else {
        1
    };
    let groups = match plan.sets[job.resample].get(set_k, job.n) {
        Some(g) => g.clone(),
        None => {
            return job
                .families
                .iter()
                .map(|f| {
                    (
                        cell_id(f, job.seed, job.k, job.n, job.resample),
                        Err(Error::Data(format!("no sampled set for K={set_k}, N={}", job.n))),
                    )
                })
                .collect()
        }
    };
    let examples: Vec<CellExample> = groups
        .iter()
        .enumerate()
        .flat_map(|(cluster, ids)| {
            ids.iter().map(move |&id| (cluster, id))
        })
        .map(|(cluster, id)| CellExample {
            id,
            grid: data.pool[id].0,
            placement: data.pool[id].1.clone(),
            cluster,
        })
        .collect();
    let audited = audit(&examples, &groups);
    let cell_seed = derive_seed(plan.resample_seeds[job.resample], job.k as u64);
    let cell = CellData::new(&data.train_grids, examples, &data.neg_grids, &config.params, cell_seed);
    job.families
        .iter()
        .map(|name| {
            let id = cell_id(name, job.seed, job.k, job.n, job.resample);
            let result = (|| {
                audited.as_ref().map_err(|e| Error::Provenance(e.to_string()))?;
                let family = registry.get(name)?;
                let t0 = Instant::now();
                let trained = family.train(&cell)?;
                let train_seconds = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let ap = evaluate_model(&trained.model, data, config)?;
                let record = ExperimentRecord {
                    family: name.clone(),
                    k: job.k,
                    n: job.n,
                    seed: job.seed,
                    resample: job.resample,
                    resample_seed: plan.resample_seeds[job.resample],
                    c_chosen: trained.c_chosen,
                    cv_ap: trained.cv_ap,
                    ap,
                    train_objective: trained.train_objective,
                    components: trained.components,
                    n_neg_images: data.neg_grids.len(),
                    train_seconds,
                    eval_seconds: t1.elapsed().as_secs_f64(),
                };
                Ok((record, trained.model))
            })();
            if let Err(e) = &result {
                log::warn!("cell {id} failed: {e}");
            }
            (id, result)
        })
        .collect()
}

/// Runs every (family, K, N, resample) cell for every seed. With `out_dir`,
/// each finished cell is stored under `cells/`, its model under `models/`,
/// and a run manifest is written;
/// with `resume`, stored cells are loaded instead of retrained. Failed cells
/// are listed in the manifest and the run continues.
pub fn run_experiment(
    config: &ExperimentConfig,
    registry: &Registry,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<RunOutput> {
    config.validate(registry)?;
    let cell_dir = out_dir.map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut longtail = BTreeMap::new();
    for &seed in &config.seeds {
        let data = prepare_data(config, seed)?;
        let placements: Vec<Placement> = data.pool.iter().map(|p| p.1.clone()).collect();
        longtail.insert(
            seed,
            crate::synthdata::shape_histogram(&placements, config.params.shape_bin)?
                .into_iter()
                .map(|(_, c)| c)
                .collect(),
        );
        let plan = plan_seed(config, &data, seed)?;
        let (clustered, single): (Vec<String>, Vec<String>) = config
            .families
            .iter()
            .cloned()
            .partition(|f| registry.get(f).map_or(false, |f| f.uses_clusters()));
        let mut jobs = Vec::new();
        for &n in &plan.sizes {
            for r in 0..config.resamples {
                if !single.is_empty() {
                    jobs.push(Job { seed, k: 1, n, resample: r, families: single.clone() });
                }
                for &k in &config.k_list {
                    if !clustered.is_empty() {
                        jobs.push(Job { seed, k, n, resample: r, families: clustered.clone() });
                    }
                }
            }
        }
        let done: BTreeMap<String, ExperimentRecord> = if resume {
            let mut m = BTreeMap::new();
            if let Some(d) = &cell_dir {
                for job in &jobs {
                    for f in &job.families {
                        let id = cell_id(f, seed, job.k, job.n, job.resample);
                        let path = d.join(format!("{id}.json"));
                        if path.exists() {
                            m.insert(id, read_json::<ExperimentRecord>(&path)?);
                        }
                    }
                }
            }
            m
        } else {
            BTreeMap::new()
        };
        let pending: Vec<Job> = jobs
            .iter()
            .filter_map(|j| {
                let fams: Vec<String> = j
                    .families
                    .iter()
                    .filter(|f| !done.contains_key(&cell_id(f, seed, j.k, j.n, j.resample)))
                    .cloned()
                    .collect();
                (!fams.is_empty()).then(|| Job { families: fams, ..j.clone() })
            })
            .collect();
        log::info!("seed {seed}: {} jobs, {} cells resumed", pending.len(), done.len());
        let results: Vec<(String, Result<(ExperimentRecord, SavedModel)>)> = pending
            .par_iter()
            .flat_map_iter(|j| run_job(j, config, registry, &data, &plan))
            .collect();
        for (id, rec) in done {
            entries.push(ManifestEntry { id, status: CellStatus::Done, error: None });
            records.push(rec);
        }
        for (id, res) in results {
            match res {
                Ok((rec, model)) => {
                    if let (Some(d), Some(out)) = (&cell_dir, out_dir) {
                        save_model(&out.join("models").join(format!("{id}.json")), &model)?;
                        write_json(&d.join(format!("{id}.json")), &rec)?;
                    }
                    entries.push(ManifestEntry { id, status: CellStatus::Done, error: None });
                    records.push(rec);
                }
                Err(e) => entries.push(ManifestEntry {
                    id,
                    status: CellStatus::Failed,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    records.sort_by(record_order);
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = RunManifest {
        config: config.clone(),
        cells: entries,
    };
    if let Some(d) = out_dir {
        write_json(&d.join("manifest.json"), &manifest)?;
    }
    Ok(RunOutput {
        summary: summarize(&records),
        records,
        manifest,
        longtail,
    })
}

pub(crate) fn record_order(a: &ExperimentRecord, b: &ExperimentRecord) -> std::cmp::Ordering {
    (&a.family, a.k, a.n, a.seed, a.resample).cmp(&(&b.family, b.k, b.n, b.seed, b.resample))
}

/// Per (family, seed, N, resample): the K with the best cross-validation AP
/// (smaller K on ties) and its test AP.
pub fn summarize(records: &[ExperimentRecord]) -> Vec<SummaryRow> {
    let mut best: BTreeMap<(String, u64, usize, usize), &ExperimentRecord> = BTreeMap::new();
    for r in records {
        let key = (r.family.clone(), r.seed, r.n, r.resample);
        match best.get(&key) {
            Some(b) if !(r.cv_ap > b.cv_ap || (r.cv_ap == b.cv_ap && r.k < b.k)) => {}
            _ => {
                best.insert(key, r);
            }
        }
    }
    best.into_values()
        .map(|r| SummaryRow {
            family: r.family.clone(),
            seed: r.seed,
            n: r.n,
            resample: r.resample,
            k: r.k,
            c: r.c_chosen,
            cv_ap: r.cv_ap,
            ap: r.ap,
        })
        .collect()
}
