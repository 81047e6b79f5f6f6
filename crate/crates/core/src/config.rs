//! Run configuration files and dataset manifests.
//!
//! Both are JSON. Unknown keys are rejected at every nesting level, and
//! relative paths are resolved against the directory of the file that
//! names them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_off, load_xyz, normalize_cloud, PointCloud};
use crate::network::NetworkConfig;
use crate::seed;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of the pretraining clouds.
    pub train_manifest: Option<PathBuf>,
    /// Points sampled from each `.off` mesh. XYZ clouds keep their points.
    pub mesh_points: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            mesh_points: 2048,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses and validates a config. Missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| in_file(path, e))?;
        if let Some(m) = cfg.data.train_manifest.take() {
            cfg.data.train_manifest = Some(resolve(path, &m));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.data.mesh_points == 0 {
            return Err(Error::Config("data.mesh_points must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn resolve(base_file: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new("")).join(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub path: PathBuf,
    pub label: u32,
}

/// A list of labelled cloud files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    /// Reads a manifest; item paths come back resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m = Self::parse(&text).map_err(|e| in_file(path, e))?;
        for item in &mut m.items {
            item.path = resolve(path, &item.path);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loads every item as a normalized, labelled cloud. Meshes (`.off`)
    /// are sampled with `mesh_points` points and a per-item seed.
    pub fn load_clouds(&self, mesh_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                load_item(item, mesh_points, seed::derive(seed, &[i as u64]))
                    .map_err(|e| e.at_cloud(i))
            })
            .collect()
    }
}

/// Reads an XYZ cloud as stored, or samples `mesh_points` points from an
/// `.off` mesh.
pub fn load_cloud(path: &Path, mesh_points: usize, seed: u64) -> Result<PointCloud> {
    let is_mesh = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("off"));
    if is_mesh {
        load_off(path, mesh_points, seed)
    } else {
        load_xyz(path)
    }
}

fn load_item(item: &ManifestItem, mesh_points: usize, seed: u64) -> Result<PointCloud> {
    let mut pc = normalize_cloud(&load_cloud(&item.path, mesh_points, seed)?)?;
    pc.label = Some(item.label);
    Ok(pc)
}
