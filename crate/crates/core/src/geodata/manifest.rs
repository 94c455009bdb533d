//! Dataset manifests: a JSON listing of image / ground truth / pseudo-label
//! files, relative to the manifest's own directory.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png
//! <root>/masks/<id>.png
//! <root>/pseudo/<id>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{corrupt_labels, synth_scene, SceneSpec};
use crate::raster::png_io::{read_label_map, read_rgb, write_label_map, write_rgb};
use crate::raster::{ClassCatalog, LabelMap, RasterImage};
use crate::seed::{derive_seed, stream};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<PathBuf>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub split: String,
    pub catalog: ClassCatalog,
    pub entries: Vec<ManifestEntry>,
    /// Directory entry paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub id: String,
    pub image: RasterImage,
    pub gt: LabelMap,
    pub pseudo: Option<LabelMap>,
}

impl DatasetManifest {
    pub fn new(name: &str, split: &str, catalog: ClassCatalog, root: &Path) -> Self {
        Self {
            name: name.to_string(),
            split: split.to_string(),
            catalog,
            entries: Vec::new(),
            root: root.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::at(path, e.into()))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::at(path, e.into()))?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(m)
    }

    /// Writes `manifest.json` into `root`.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::at(&self.root, e.into()))?;
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::at(&path, e.into()))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_entry(&self, index: usize) -> Result<LoadedEntry> {
        let e = &self.entries[index];
        let image = read_rgb(&self.resolve(&e.image))?;
        let gt = read_label_map(&self.resolve(&e.gt), &self.catalog)?;
        let pseudo = match &e.pseudo {
            Some(p) => Some(read_label_map(&self.resolve(p), &self.catalog)?),
            None => None,
        };
        let dims = (image.height(), image.width());
        let mismatch = |what: &str, m: &LabelMap| {
            (dims != (m.height(), m.width())).then(|| {
                Error::Shape(format!(
                    "entry `{}`: {what} is {}x{}, image is {}x{}",
                    e.id,
                    m.height(),
                    m.width(),
                    dims.0,
                    dims.1
                ))
            })
        };
        if let Some(err) = mismatch("ground truth", &gt) {
            return Err(err);
        }
        if let Some(err) = pseudo.as_ref().and_then(|p| mismatch("pseudo-label", p)) {
            return Err(err);
        }
        Ok(LoadedEntry {
            id: e.id.clone(),
            image,
            gt,
            pseudo,
        })
    }

    /// Loads every entry, collecting all failures into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !ids.insert(&e.id) {
                problems.push(format!("duplicate id `{}`", e.id));
            }
            if let Err(err) = self.load_entry(i) {
                problems.push(err.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(problems.join("; ")))
        }
    }
}

/// Generates `count` scenes from `base` (with per-scene seeds derived from
/// `seed`) under `root` and writes the manifest.
pub fn write_synthetic_dataset(
    root: &Path,
    name: &str,
    split: &str,
    count: usize,
    base: &SceneSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    let catalog = ClassCatalog::default();
    let mut manifest = DatasetManifest::new(name, split, catalog.clone(), root);
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::at(&dir, e.into()))?;
    }
    for i in 0..count {
        let spec = SceneSpec {
            seed: derive_seed(seed, &[stream::SCENE, i as u64]),
            ..base.clone()
        };
        let (image, labels) = synth_scene(&spec)?;
        let id = format!("{name}_{i:04}");
        let entry = ManifestEntry {
            image: PathBuf::from("images").join(format!("{id}.png")),
            gt: PathBuf::from("masks").join(format!("{id}.png")),
            pseudo: None,
            provenance: Provenance::Synthetic,
            id,
        };
        write_rgb(&manifest.resolve(&entry.image), &image)?;
        write_label_map(&manifest.resolve(&entry.gt), &labels, &catalog)?;
        manifest.entries.push(entry);
    }
    manifest.save()?;
    Ok(manifest)
}

/// Corrupts every ground-truth mask at `rate`, writes `pseudo/<id>.png` and
/// re-saves the manifest. Entries that fail are reported together.
pub fn write_pseudo_labels(manifest: &mut DatasetManifest, rate: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "corruption rate must be in [0, 1), got {rate}"
        )));
    }
    let dir = manifest.root.join("pseudo");
    fs::create_dir_all(&dir).map_err(|e| Error::at(&dir, e.into()))?;
    let mut problems = Vec::new();
    for i in 0..manifest.entries.len() {
        let e = &manifest.entries[i];
        let gt = match read_label_map(&manifest.resolve(&e.gt), &manifest.catalog) {
            Ok(gt) => gt,
            Err(err) => {
                problems.push(format!("entry `{}`: {err}", e.id));
                continue;
            }
        };
        let pseudo = corrupt_labels(&gt, rate, derive_seed(seed, &[stream::CORRUPT, i as u64]), &manifest.catalog)?;
        let rel = PathBuf::from("pseudo").join(format!("{}.png", e.id));
        write_label_map(&manifest.resolve(&rel), &pseudo, &manifest.catalog)?;
        manifest.entries[i].pseudo = Some(rel);
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems.join("; ")));
    }
    manifest.save()?;
    Ok(())
}
