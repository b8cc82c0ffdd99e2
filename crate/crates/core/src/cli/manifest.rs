//! Run manifest: the JSON file that carries state between subcommands.
//!
//! Paths inside the manifest are relative to the directory holding it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architectures::ArchitectureTag;
use crate::data::{load_csv, load_labels_csv, Dataset, SplitIndices};
use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::projection::{load_projection, ProjectionPair, TsneConfig};
use crate::training::TrainingConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub values: String,
    pub labels: Option<String>,
    /// `(rows, cols)` when each sample is an image.
    pub image_shape: Option<(usize, usize)>,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ProjectionSource {
    Tsne { config: TsneConfig, final_kl: f64 },
    File { original: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEntry {
    pub path: String,
    #[serde(flatten)]
    pub source: ProjectionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub run: usize,
    pub seed: u64,
    pub model: String,
    pub log: String,
    pub split: SplitIndices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    /// Base configuration; run `k` uses seed `config.seed + k`.
    pub config: TrainingConfig,
    pub runs: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetEntry,
    pub projection: ProjectionEntry,
    #[serde(default)]
    pub training: BTreeMap<ArchitectureTag, TrainingEntry>,
}

/// A manifest together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Located {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Accepts either a manifest file or a directory containing one.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

impl Located {
    pub fn load(p: &Path) -> Result<Self> {
        let path = manifest_path(p);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            row: e.line(),
            column: Some(e.column()),
            message: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                expected: MANIFEST_VERSION,
                found: manifest.version,
            });
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let located = Located { dir, manifest };
        for rel in located.referenced_files() {
            let abs = located.resolve(&rel);
            if !abs.is_file() {
                return Err(Error::io(
                    abs,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file named in manifest is missing"),
                ));
            }
        }
        Ok(located)
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("plain data");
        write_atomic_str(&self.dir.join(MANIFEST_FILE), &(text + "\n"))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn referenced_files(&self) -> Vec<String> {
        let m = &self.manifest;
        let mut files = vec![m.dataset.values.clone(), m.projection.path.clone()];
        files.extend(m.dataset.labels.clone());
        for entry in m.training.values() {
            files.extend(entry.runs.iter().map(|r| r.model.clone()));
        }
        files
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = &self.manifest.dataset;
        let plain = load_csv(&self.resolve(&ds.values), false, false)?;
        let labels = match &ds.labels {
            Some(p) => Some(load_labels_csv(&self.resolve(p))?),
            None => None,
        };
        let dataset = Dataset::new(plain.values().clone(), labels, ds.name.clone())?;
        if (dataset.n(), dataset.d()) != (ds.n, ds.d) {
            return Err(Error::Shape(format!(
                "manifest describes {}x{} data, file has {}x{}",
                ds.n,
                ds.d,
                dataset.n(),
                dataset.d()
            )));
        }
        Ok(dataset)
    }

    pub fn load_pair(&self) -> Result<ProjectionPair> {
        let data = self.load_dataset()?;
        let mut pair = load_projection(data, &self.resolve(&self.manifest.projection.path))?;
        let tag = match &self.manifest.projection.source {
            ProjectionSource::Tsne { .. } => "tsne",
            ProjectionSource::File { .. } => "file",
        };
        pair = ProjectionPair::new(pair.data().clone(), pair.coords().clone(), tag)?;
        Ok(pair)
    }
}
