//! Scenes found in a directory, loaded once at startup and shared read-only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clod_core::ply::load_ply;
use clod_core::GaussianScene;
use serde::{Deserialize, Serialize};

use crate::error::StartupError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    /// File stem of the PLY.
    pub id: String,
    pub n_total: usize,
    pub sh_degree: usize,
    pub bounds: Bounds,
    pub file_bytes: u64,
    pub file_mb: f64,
}

/// A PLY in the directory that could not be loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneError {
    pub file: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneList {
    pub scenes: Vec<SceneInfo>,
    pub errors: Vec<SceneError>,
}

#[derive(Debug, Default)]
pub struct Catalog {
    scenes: BTreeMap<String, Arc<GaussianScene>>,
    list: SceneList,
}

impl Catalog {
    /// Loads every `*.ply` directly under `dir`, sorted by file name.
    pub fn load(dir: &Path) -> Result<Self, StartupError> {
        let read_err = |source| StartupError::ScenesDir {
            path: dir.to_path_buf(),
            source,
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(read_err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(read_err)?;
        files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")));
        files.sort();
        let mut catalog = Catalog::default();
        for path in files {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let loaded = std::fs::metadata(&path)
                .map_err(|e| e.to_string())
                .and_then(|m| load_ply(&path).map(|s| (m.len(), s)).map_err(|e| e.to_string()));
            match loaded {
                Ok((bytes, scene)) => catalog.insert(id, scene, bytes),
                Err(error) => catalog.list.errors.push(SceneError { file: name, error }),
            }
        }
        Ok(catalog)
    }

    /// Adds an in-memory scene; `file_bytes` is what `list` reports.
    pub fn insert(&mut self, id: String, scene: GaussianScene, file_bytes: u64) {
        let (lo, hi) = scene.bounds();
        let info = SceneInfo {
            id: id.clone(),
            n_total: scene.len(),
            sh_degree: scene.sh_degree,
            bounds: Bounds {
                min: lo.into(),
                max: hi.into(),
            },
            file_bytes,
            file_mb: file_bytes as f64 / 1e6,
        };
        self.list.scenes.retain(|s| s.id != id);
        self.list.scenes.push(info);
        self.scenes.insert(id, Arc::new(scene));
    }

    pub fn get(&self, id: &str) -> Option<Arc<GaussianScene>> {
        self.scenes.get(id).cloned()
    }

    pub fn list(&self) -> &SceneList {
        &self.list
    }
}
