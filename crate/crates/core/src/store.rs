//! Image stores: where manifest image ids resolve to rasters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, ImageError, Result};
use crate::raster::Raster;

pub trait ImageStore: Sync {
    fn load(&self, id: &str) -> Result<Raster>;
    fn contains(&self, id: &str) -> bool;
}

/// Ids are paths relative to `root` (absolute ids are used as given).
#[derive(Debug, Clone)]
pub struct FsStore {
    pub root: PathBuf,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsStore { root: root.into() }
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }
}

impl ImageStore for FsStore {
    fn load(&self, id: &str) -> Result<Raster> {
        Raster::load(self.path_of(id))
    }

    fn contains(&self, id: &str) -> bool {
        self.path_of(id).is_file()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryStore {
    pub images: BTreeMap<String, Raster>,
}

impl MemoryStore {
    pub fn insert(&mut self, id: impl Into<String>, r: Raster) {
        self.images.insert(id.into(), r);
    }

    pub fn get(&self, id: &str) -> Option<&Raster> {
        self.images.get(id)
    }

    /// Write every image as PPM under `dir`, creating subdirectories.
    pub fn save_to_dir(&self, dir: &Path) -> Result<()> {
        for (id, r) in &self.images {
            let path = dir.join(id);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            r.save(&path)?;
        }
        Ok(())
    }
}

impl ImageStore for MemoryStore {
    fn load(&self, id: &str) -> Result<Raster> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Image(ImageError::Missing(PathBuf::from(id))))
    }

    fn contains(&self, id: &str) -> bool {
        self.images.contains_key(id)
    }
}
