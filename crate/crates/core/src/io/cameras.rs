use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::read_file;
use crate::scene::CameraView;

/// On-disk camera record: `K` and `T` row-major, `T` camera-to-world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<f64>,
}

impl CameraRecord {
    pub fn from_view(view: &CameraView) -> Self {
        let k = view.intrinsics();
        let t = view.pose();
        Self {
            view_id: view.view_id().to_string(),
            width: view.width(),
            height: view.height(),
            k: (0..9).map(|i| k[(i / 3, i % 3)]).collect(),
            t: (0..16).map(|i| t[(i / 4, i % 4)]).collect(),
        }
    }

    pub fn to_view(&self) -> Result<CameraView> {
        if self.k.len() != 9 || self.t.len() != 16 {
            return Err(Error::Validation(format!(
                "view {}: K needs 9 values and T 16 (got {} and {})",
                self.view_id,
                self.k.len(),
                self.t.len()
            )));
        }
        CameraView::new(
            self.view_id.clone(),
            self.width,
            self.height,
            Matrix3::from_row_slice(&self.k),
            Matrix4::from_row_slice(&self.t),
        )
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraView>> {
    let data = read_file(path)?;
    let records: Vec<CameraRecord> = serde_json::from_slice(&data)
        .map_err(|e| Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    records.iter().map(CameraRecord::to_view).collect()
}

pub fn write_cameras(path: &Path, views: &[CameraView]) -> Result<()> {
    let records: Vec<CameraRecord> = views.iter().map(CameraRecord::from_view).collect();
    super::write_json(path, &records)
}
