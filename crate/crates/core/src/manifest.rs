//! Dataset manifest: the query-structured image lists fed to the pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PartTruth;
use crate::geometry::BBox;
use crate::raster::write_atomic;
use crate::store::ImageStore;
use crate::viewpoint::Viewpoint;

pub const MANIFEST_VERSION: u32 = 1;
pub const SIDE_KEY: &str = "side";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardDomainEntry {
    pub image: String,
    pub object_box: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint: Option<Viewpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<Vec<PartTruth>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_name: String,
    pub parts: Vec<String>,
    /// Keyed by viewpoint name, or `side` for unsplit profile views.
    pub object_sets: BTreeMap<String, Vec<String>>,
    pub part_sets: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub hard_domain: Vec<HardDomainEntry>,
}

/// Key of an object set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectSetKey {
    View(Viewpoint),
    Side,
}

impl ObjectSetKey {
    pub fn parse(s: &str) -> Result<Self> {
        if s == SIDE_KEY {
            return Ok(ObjectSetKey::Side);
        }
        s.parse()
            .map(ObjectSetKey::View)
            .map_err(|_| Error::Manifest(format!("unknown object set {s:?}")))
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.parts.is_empty() {
            return Err(Error::Manifest("manifest lists no parts".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].contains(p) {
                return Err(Error::Manifest(format!("part {p:?} listed twice")));
            }
        }
        for key in self.part_sets.keys() {
            if !self.parts.contains(key) {
                return Err(Error::Manifest(format!("part set {key:?} names no declared part")));
            }
        }
        for key in self.object_sets.keys() {
            ObjectSetKey::parse(key)?;
        }
        for e in &self.hard_domain {
            if !e.object_box.is_valid() {
                return Err(Error::Manifest(format!("hard-domain entry {} has an invalid box", e.image)));
            }
            for p in e.parts.iter().flatten() {
                if p.part_id >= self.parts.len() {
                    return Err(Error::Manifest(format!("hard-domain entry {} names part {}", e.image, p.part_id)));
                }
            }
        }
        Ok(())
    }

    /// Every referenced image, in manifest order.
    pub fn image_ids(&self) -> Vec<&str> {
        self.object_sets
            .values()
            .chain(self.part_sets.values())
            .flatten()
            .map(String::as_str)
            .chain(self.hard_domain.iter().map(|e| e.image.as_str()))
            .collect()
    }

    pub fn check_files(&self, store: &dyn ImageStore) -> Result<()> {
        match self.image_ids().into_iter().find(|id| !store.contains(id)) {
            Some(id) => Err(Error::Manifest(format!("referenced image {id:?} does not exist"))),
            None => Ok(()),
        }
    }

    pub fn part_set(&self, part: usize) -> &[String] {
        self.part_sets.get(&self.parts[part]).map_or(&[], Vec::as_slice)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}
