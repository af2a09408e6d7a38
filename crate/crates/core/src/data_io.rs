//! Dataset manifests, model files and small JSON helpers.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::features::{load_raster, FeatureGrid, Raster};
use crate::partmodel::StarModel;
use crate::synthdata::{SynthDataset, SynthObject};
use crate::train::MixtureModel;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const SUPPORTED_MODEL_TYPES: [&str; 4] = ["mixture", "dpm", "epm", "edpm"];

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the manifest directory. `.pgm` rasters or `.fgrid` feature dumps.
    pub path: String,
    /// `(width, height)` in pixels.
    pub size: (usize, usize),
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    /// Ground-truth JSON (array of `{image_id, boxes}`), relative path.
    pub annotations: String,
    pub annotations_sha256: String,
    /// Optional true part placements, relative path.
    #[serde(default)]
    pub placements: Option<String>,
}

/// Pixels or precomputed descriptors of one image.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageData {
    Raster(Raster),
    Features(FeatureGrid),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<ImageEntry>,
    pub ground_truth: Vec<GroundTruth>,
    pub objects: Option<Vec<SynthObject>>,
}

impl Dataset {
    pub fn load_image(&self, entry: &ImageEntry) -> Result<ImageData> {
        let path = self.root.join(&entry.path);
        if entry.path.ends_with(".fgrid") {
            Ok(ImageData::Features(FeatureGrid::load(&path)?))
        } else {
            Ok(ImageData::Raster(load_raster(&path)?))
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }
}

/// Reads a manifest and checks every referenced file. All problems are
/// collected into one [`Error::Load`].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut problems = Vec::new();
    let mut ids = HashSet::new();
    for e in &manifest.images {
        if !ids.insert(e.id.as_str()) {
            problems.push(format!("duplicate image id {}", e.id));
        }
        check_file(&root.join(&e.path), &e.sha256, &mut problems);
    }
    let ann_path = root.join(&manifest.annotations);
    check_file(&ann_path, &manifest.annotations_sha256, &mut problems);
    let ground_truth: Vec<GroundTruth> = if ann_path.exists() {
        match read_json(&ann_path) {
            Ok(g) => g,
            Err(e) => {
                problems.push(e.to_string());
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };
    for g in &ground_truth {
        if !ids.contains(g.image_id.as_str()) {
            problems.push(format!("annotation references unknown image id {}", g.image_id));
            continue;
        }
        if let Err(e) = g.validate() {
            problems.push(format!("image {}: {e}", g.image_id));
        }
        let entry = manifest.images.iter().find(|e| e.id == g.image_id);
        if let Some(entry) = entry {
            let (w, h) = (entry.size.0 as f64, entry.size.1 as f64);
            for b in &g.boxes {
                if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
                    problems.push(format!("image {}: box {:?} leaves the {w}x{h} image", g.image_id, b));
                }
            }
        }
    }
    let objects = match &manifest.placements {
        Some(p) => match read_json(&root.join(p)) {
            Ok(o) => Some(o),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        },
        None => None,
    };
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    Ok(Dataset {
        root,
        images: manifest.images,
        ground_truth,
        objects,
    })
}

fn check_file(path: &Path, expected: &str, problems: &mut Vec<String>) {
    if !path.exists() {
        problems.push(format!("missing file {}", path.display()));
        return;
    }
    match sha256_file(path) {
        Ok(h) if h == expected => {}
        Ok(h) => problems.push(format!(
            "checksum mismatch for {}: expected {expected}, found {h}",
            path.display()
        )),
        Err(e) => problems.push(e.to_string()),
    }
}

/// Writes images, ground truth, placements and a manifest into `dir`.
/// Rasters go out as PGM, feature-mode grids as binary dumps.
pub fn save_synth_dataset(data: &SynthDataset, dir: &Path, split: Split) -> Result<PathBuf> {
    save_synth_splits(&[(data, split, "")], dir)
}

/// Like [`save_synth_dataset`] for several datasets under one manifest. Image
/// ids get the given prefix and placements are renumbered to the combined
/// image order.
pub fn save_synth_splits(parts: &[(&SynthDataset, Split, &str)], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut images = Vec::new();
    let mut ground_truth = Vec::new();
    let mut objects = Vec::new();
    for &(data, split, prefix) in parts {
        let offset = images.len();
        for img in &data.images {
            let id = format!("{prefix}{}", img.id);
            let (rel, bytes, size) = match &img.raster {
                Some(r) => (format!("images/{id}.pgm"), r.to_pgm(), (r.width(), r.height())),
                None => {
                    let mut buf = Vec::new();
                    img.grid.write_binary(&mut buf).map_err(|e| Error::io(&img_dir, e))?;
                    let (w, h) = img.grid.image_extent();
                    (format!("images/{id}.fgrid"), buf, (w as usize, h as usize))
                }
            };
            write_atomic(&dir.join(&rel), &bytes)?;
            images.push(ImageEntry {
                id,
                path: rel,
                size,
                split,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        ground_truth.extend(data.ground_truth.iter().map(|g| GroundTruth {
            image_id: format!("{prefix}{}", g.image_id),
            boxes: g.boxes.clone(),
        }));
        objects.extend(data.objects.iter().map(|o| SynthObject {
            image: o.image + offset,
            ..o.clone()
        }));
    }
    let gt_path = dir.join("ground_truth.json");
    write_json(&gt_path, &ground_truth)?;
    write_json(&dir.join("placements.json"), &objects)?;
    let manifest = DatasetManifest {
        images,
        annotations: "ground_truth.json".into(),
        annotations_sha256: sha256_file(&gt_path)?,
        placements: Some("placements.json".into()),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// A model of any registered family.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Mixture(MixtureModel),
    Star(StarModel),
}

impl SavedModel {
    pub fn type_tag(&self) -> &'static str {
        match self {
            SavedModel::Mixture(_) => "mixture",
            SavedModel::Star(m) => m.shape.tag(),
        }
    }

    pub fn detector(&self) -> &dyn crate::detect::Detector {
        match self {
            SavedModel::Mixture(m) => m,
            SavedModel::Star(m) => m,
        }
    }
}

#[derive(Serialize)]
struct ModelFileOut<'a, T: Serialize> {
    schema_version: u32,
    #[serde(rename = "type")]
    kind: &'a str,
    model: &'a T,
}

#[derive(Deserialize)]
struct ModelFileIn {
    schema_version: u32,
    #[serde(rename = "type")]
    kind: String,
    model: serde_json::Value,
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let kind = model.type_tag();
    let bytes = match model {
        SavedModel::Mixture(m) => {
            m.validate()?;
            serde_json::to_vec_pretty(&ModelFileOut { schema_version: MODEL_SCHEMA_VERSION, kind, model: m })?
        }
        SavedModel::Star(m) => {
            m.validate()?;
            serde_json::to_vec_pretty(&ModelFileOut { schema_version: MODEL_SCHEMA_VERSION, kind, model: m })?
        }
    };
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let file: ModelFileIn = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::Version {
            found: file.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let model = match file.kind.as_str() {
        "mixture" => {
            let m: MixtureModel = serde_json::from_value(file.model).map_err(|e| parse(e.to_string()))?;
            m.validate()?;
            SavedModel::Mixture(m)
        }
        "dpm" | "epm" | "edpm" => {
            let m: StarModel = serde_json::from_value(file.model).map_err(|e| parse(e.to_string()))?;
            m.validate()?;
            if m.shape.tag() != file.kind {
                return Err(parse(format!(
                    "type tag {} disagrees with shape model {}",
                    file.kind,
                    m.shape.tag()
                )));
            }
            SavedModel::Star(m)
        }
        other => {
            return Err(Error::UnknownModelType {
                found: other.to_string(),
                supported: SUPPORTED_MODEL_TYPES.join(", "),
            })
        }
    };
    Ok(model)
}
