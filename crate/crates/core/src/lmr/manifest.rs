//! Scene manifests: the sparse-reconstruction view of a photo collection,
//! listing images and 3D points with their per-image observations.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u64,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

/// One image's sighting of a 3D point: pixel position and camera-frame
/// depth (any consistent unit).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: u64,
    pub x_px: f64,
    pub y_px: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Point3d {
    pub point_id: u64,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneManifest {
    pub images: Vec<ManifestImage>,
    pub points3d: Vec<Point3d>,
}

impl SceneManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: SceneManifest = serde_json::from_str(text)
            .map_err(|e| Error::Manifest(format!("parse failed: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::io_msg(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn image(&self, id: u64) -> Result<&ManifestImage> {
        self.images
            .iter()
            .find(|im| im.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown image id {id}")))
    }

    /// Structural validation; error messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for im in &self.images {
            if !ids.insert(im.id) {
                return Err(Error::Manifest(format!(
                    "images[].id: duplicate image id {}",
                    im.id
                )));
            }
            if im.width == 0 || im.height == 0 {
                return Err(Error::Manifest(format!(
                    "images[].width/height: image {} is {}x{}",
                    im.id, im.width, im.height
                )));
            }
            if im.path.is_empty() {
                return Err(Error::Manifest(format!(
                    "images[].path: empty path for image {}",
                    im.id
                )));
            }
        }
        let mut pids = BTreeSet::new();
        for p in &self.points3d {
            if !pids.insert(p.point_id) {
                return Err(Error::Manifest(format!(
                    "points3d[].point_id: duplicate point id {}",
                    p.point_id
                )));
            }
            let mut seen = BTreeSet::new();
            for o in &p.observations {
                let im = self.images.iter().find(|im| im.id == o.image_id).ok_or_else(|| {
                    Error::Manifest(format!(
                        "observations[].image_id: point {} references unknown image {}",
                        p.point_id, o.image_id
                    ))
                })?;
                if !seen.insert(o.image_id) {
                    return Err(Error::Manifest(format!(
                        "observations[].image_id: point {} observed twice by image {}",
                        p.point_id, o.image_id
                    )));
                }
                let inside = o.x_px.is_finite()
                    && o.y_px.is_finite()
                    && o.x_px >= 0.0
                    && o.y_px >= 0.0
                    && o.x_px < f64::from(im.width)
                    && o.y_px < f64::from(im.height);
                if !inside {
                    return Err(Error::Manifest(format!(
                        "observations[].x_px/y_px: point {} at ({}, {}) outside image {} ({}x{})",
                        p.point_id, o.x_px, o.y_px, o.image_id, im.width, im.height
                    )));
                }
                if !(o.depth.is_finite() && o.depth > 0.0) {
                    return Err(Error::Manifest(format!(
                        "observations[].depth: point {} in image {} has depth {}",
                        p.point_id, o.image_id, o.depth
                    )));
                }
            }
        }
        Ok(())
    }
}
