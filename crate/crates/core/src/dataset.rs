use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{fmap, manifest};
use crate::types::{DatasetManifest, FeatureMap};

/// A resolved manifest with every feature map loaded, index-aligned with
/// `manifest.entries`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub maps: Vec<FeatureMap>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(manifest::load(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let maps = manifest
            .entries
            .par_iter()
            .map(|e| fmap::read(&e.feature_file))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, maps)
    }

    pub fn new(manifest: DatasetManifest, maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.len() != manifest.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: manifest.entries.len(),
                actual: maps.len(),
            });
        }
        if let Some(first) = maps.first() {
            for (e, fm) in manifest.entries.iter().zip(&maps) {
                if fm.dim() != first.dim() {
                    return Err(Error::Invalid(format!(
                        "[{}] feature dim {} differs from {}",
                        e.image_id,
                        fm.dim(),
                        first.dim()
                    )));
                }
                if fm.image_h() != e.image_h || fm.image_w() != e.image_w {
                    return Err(Error::Invalid(format!(
                        "[{}] feature map describes a {}x{} image, manifest says {}x{}",
                        e.image_id,
                        fm.image_w(),
                        fm.image_h(),
                        e.image_w,
                        e.image_h
                    )));
                }
            }
        }
        Ok(Self { manifest, maps })
    }

    pub fn dim(&self) -> Option<usize> {
        self.maps.first().map(FeatureMap::dim)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}
