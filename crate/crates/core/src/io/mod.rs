//! File formats and scene directory layout.

pub mod binary;
pub mod cameras;
pub mod instances;
pub mod masks;
pub mod ply;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::overseg::{oversegment, OversegConfig};
use crate::scene::{FeatureTable, SceneBundle, SuperpointPartition};

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = binary::create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::io(path, e.into()))
        .and_then(|_| w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e)))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let data = binary::read_file(path)?;
    serde_json::from_slice(&data)
        .map_err(|e| Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

/// Standard file names inside a scene directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePaths {
    pub cloud: PathBuf,
    pub cameras: PathBuf,
    pub superpoints: PathBuf,
    pub features: PathBuf,
    pub masks: PathBuf,
    pub ground_truth: PathBuf,
}

impl ScenePaths {
    pub fn from_dir(dir: &Path) -> Self {
        Self {
            cloud: dir.join("cloud.ply"),
            cameras: dir.join("cameras.json"),
            superpoints: dir.join("superpoints.sp3d"),
            features: dir.join("features.ft3d"),
            masks: dir.join("masks"),
            ground_truth: dir.join("gt.in3d"),
        }
    }
}

pub fn read_superpoints(path: &Path, count: usize) -> Result<SuperpointPartition> {
    let raw = binary::read_label_file(path, binary::SUPERPOINT_MAGIC)?;
    let mut labels = Vec::with_capacity(raw.len());
    for (i, &l) in raw.iter().enumerate() {
        if l < 0 {
            return Err(Error::Validation(format!(
                "{}: point {i} has negative superpoint id {l}",
                path.display()
            )));
        }
        labels.push(l as u32);
    }
    SuperpointPartition::new(labels, count).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_superpoints(path: &Path, partition: &SuperpointPartition) -> Result<()> {
    let labels: Vec<i32> = partition.labels().iter().map(|&l| l as i32).collect();
    binary::write_label_file(path, binary::SUPERPOINT_MAGIC, &labels)
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let (_, dim, data) = binary::read_feature_file(path)?;
    FeatureTable::new(dim, data).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_features(path: &Path, features: &FeatureTable) -> Result<()> {
    binary::write_feature_file(path, features.dim(), features.data())
}

/// Loads and cross-validates a scene. The superpoint count U is taken from
/// the feature table. A missing superpoint file is replaced by the internal
/// over-segmentation, whose segment count must then match the features.
pub fn load_scene(paths: &ScenePaths) -> Result<SceneBundle> {
    let cloud = ply::read_ply(&paths.cloud)?;
    let views = cameras::read_cameras(&paths.cameras)?;
    let features = read_features(&paths.features)?;
    let partition = if paths.superpoints.exists() {
        read_superpoints(&paths.superpoints, features.rows())?
    } else {
        tracing::info!("no superpoint file, running over-segmentation");
        oversegment(&cloud, &OversegConfig::default())?
    };
    SceneBundle::new(cloud, views, partition, features)
}

pub fn save_scene(paths: &ScenePaths, scene: &SceneBundle) -> Result<()> {
    ply::write_ply(&paths.cloud, &scene.cloud)?;
    cameras::write_cameras(&paths.cameras, &scene.views)?;
    write_superpoints(&paths.superpoints, &scene.partition)?;
    write_features(&paths.features, &scene.features)
}
