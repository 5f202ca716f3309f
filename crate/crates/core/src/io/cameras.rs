//! Camera lists stored as a JSON array of
//! `{fx, fy, cx, cy, width, height, world_to_camera}` records, where
//! `world_to_camera` is a row-major 4×4 matrix.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormalize, rotation_deviation, CameraModel, ROTATION_TOLERANCE};

/// Rotation blocks further than this from orthonormal are rejected on load.
pub const ORTHONORMALITY_GATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Vec<f64>,
}

impl CameraRecord {
    pub fn from_camera(camera: &CameraModel) -> Self {
        let m = camera.world_to_camera();
        Self {
            fx: camera.fx(),
            fy: camera.fy(),
            cx: camera.cx(),
            cy: camera.cy(),
            width: camera.width(),
            height: camera.height(),
            world_to_camera: (0..16).map(|k| m[(k / 4, k % 4)]).collect(),
        }
    }

    /// Builds a camera, snapping a nearly orthonormal rotation block to the
    /// closest rotation when it drifts past the rendering tolerance.
    pub fn to_camera(&self, index: usize) -> Result<CameraModel> {
        if self.world_to_camera.len() != 16 {
            return Err(Error::Validation(format!(
                "camera {index}: world_to_camera has {} entries, expected 16",
                self.world_to_camera.len()
            )));
        }
        let mut m = Matrix4::from_row_slice(&self.world_to_camera);
        let deviation = rotation_deviation(&m);
        if !(deviation <= ORTHONORMALITY_GATE) {
            return Err(Error::Validation(format!(
                "camera {index}: rotation block deviates from orthonormal by {deviation:e} (limit {ORTHONORMALITY_GATE:e})"
            )));
        }
        if deviation > ROTATION_TOLERANCE {
            let r = orthonormalize(&m.fixed_view::<3, 3>(0, 0).into_owned());
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        }
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, m)
            .map_err(|e| Error::Validation(format!("camera {index}: {e}")))
    }
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<CameraModel>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text).map_err(|e| {
        let offset = text
            .lines()
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: e.to_string(),
        }
    })?;
    if records.is_empty() {
        log::warn!("{} contains no cameras", path.display());
    }
    records.iter().enumerate().map(|(i, r)| r.to_camera(i)).collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraModel>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, path)
}

pub fn save_cameras(path: impl AsRef<Path>, cameras: &[CameraModel]) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from_camera).collect();
    let text = serde_json::to_string_pretty(&records).expect("camera records serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
