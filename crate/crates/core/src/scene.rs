//! Shared domain types. Everything here is validated on construction and
//! immutable afterwards, so it can be shared freely across worker threads.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point positions in world coordinates (meters), with optional 8-bit colors.
///
/// Colors are carried for visualization only; no pipeline stage reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Validation("point cloud is empty".into()));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::Validation(format!(
                    "color count {} does not match point count {}",
                    c.len(),
                    positions.len()
                )));
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    /// Color of point `i` as reals in [0, 1].
    pub fn color(&self, i: usize) -> Option<[f64; 3]> {
        self.colors
            .as_ref()
            .map(|c| c[i].map(|v| f64::from(v) / 255.0))
    }

    /// Positions of a subset of points, in the order given.
    pub fn gather(&self, indices: &[u32]) -> Vec<[f64; 3]> {
        indices.iter().map(|&i| self.positions[i as usize]).collect()
    }
}

/// A pinhole camera: intrinsics, camera-to-world pose and image size.
///
/// The camera looks down +Z in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    view_id: String,
    width: u32,
    height: u32,
    intrinsics: Matrix3<f64>,
    pose: Matrix4<f64>,
    rotation_inv: Matrix3<f64>,
    center: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl CameraView {
    pub fn new(
        view_id: impl Into<String>,
        width: u32,
        height: u32,
        intrinsics: Matrix3<f64>,
        pose: Matrix4<f64>,
    ) -> Result<Self> {
        let view_id = view_id.into();
        if view_id.is_empty() {
            return Err(Error::Validation("view id is empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("view {view_id}: image size {width}x{height} is empty")));
        }
        if intrinsics.iter().chain(pose.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("view {view_id}: camera matrix has a non-finite entry")));
        }
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Config(format!("view {view_id}: intrinsics are not upper-triangular")));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(2, 2)] <= 0.0 {
            return Err(Error::Config(format!("view {view_id}: intrinsics need positive focal entries")));
        }
        let last_row = [pose[(3, 0)], pose[(3, 1)], pose[(3, 2)], pose[(3, 3)]];
        if last_row != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config(format!("view {view_id}: pose last row must be (0, 0, 0, 1)")));
        }
        let rotation: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rotation.transpose() * rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::Config(format!(
                "view {view_id}: pose rotation is not a proper orthonormal matrix (deviation {err:.3e})"
            )));
        }
        let center = Vector3::new(pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]);
        Ok(Self {
            view_id,
            width,
            height,
            intrinsics,
            pose,
            rotation_inv: rotation.transpose(),
            center,
        })
    }

    pub fn view_id(&self) -> &str {
        &self.view_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    /// Camera-to-world transform.
    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn center(&self) -> [f64; 3] {
        [self.center.x, self.center.y, self.center.z]
    }

    /// World point to camera frame, inverting the rigid pose.
    #[inline]
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = Vector3::new(p[0], p[1], p[2]) - self.center;
        let c = self.rotation_inv * d;
        [c.x, c.y, c.z]
    }
}

/// Over-segmentation of the cloud: every point belongs to exactly one superpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointPartition {
    labels: Vec<u32>,
    offsets: Vec<usize>,
    members: Vec<u32>,
}

impl SuperpointPartition {
    pub fn new(labels: Vec<u32>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Validation("superpoint count is zero".into()));
        }
        let mut sizes = vec![0usize; count];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= count {
                return Err(Error::Validation(format!(
                    "point {i} has superpoint id {l}, outside [0, {count})"
                )));
            }
            sizes[l] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("superpoint {empty} has no member points")));
        }
        let mut offsets = Vec::with_capacity(count + 1);
        offsets.push(0);
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut cursor = offsets.clone();
        let mut members = vec![0u32; labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            let slot = &mut cursor[l as usize];
            members[*slot] = i as u32;
            *slot += 1;
        }
        Ok(Self {
            labels,
            offsets,
            members,
        })
    }

    /// Builds a partition from arbitrary labels by renumbering them densely in
    /// order of first appearance.
    pub fn from_arbitrary_labels(raw: &[u32]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        let count = map.len();
        Self::new(labels, count)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, point: usize) -> u32 {
        self.labels[point]
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn point_count(&self) -> usize {
        self.labels.len()
    }

    /// Sorted point indices of superpoint `u`.
    pub fn members(&self, u: usize) -> &[u32] {
        &self.members[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn size(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }
}

/// One feature vector per superpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("feature dimension is zero".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "feature data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        for (u, row) in data.chunks(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("feature row {u} has a non-finite entry")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Validation(format!("feature row {u} is the zero vector")));
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, u: usize) -> &[f32] {
        &self.data[u * self.dim..(u + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// A binary 2D instance mask over one view's image raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask2D {
    view_id: String,
    mask_id: u32,
    width: u32,
    height: u32,
    bits: Vec<u64>,
    area: usize,
}

impl fmt::Debug for Mask2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask2D")
            .field("view_id", &self.view_id)
            .field("mask_id", &self.mask_id)
            .field("size", &(self.width, self.height))
            .field("area", &self.area)
            .finish()
    }
}

impl Mask2D {
    /// Builds a mask from a row-major boolean raster.
    pub fn from_raster(
        view_id: impl Into<String>,
        mask_id: u32,
        width: u32,
        height: u32,
        raster: &[bool],
    ) -> Result<Self> {
        let pixels = width as usize * height as usize;
        if raster.len() != pixels {
            return Err(Error::Validation(format!(
                "mask {mask_id}: raster has {} pixels, expected {width}x{height}",
                raster.len()
            )));
        }
        let set = raster.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i);
        Self::from_pixel_indices(view_id, mask_id, width, height, set)
    }

    /// Builds a mask from row-major pixel indices (`v * width + u`).
    pub fn from_pixel_indices(
        view_id: impl Into<String>,
        mask_id: u32,
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let total = width as usize * height as usize;
        let mut bits = vec![0u64; total.div_ceil(64)];
        let mut area = 0;
        for p in pixels {
            if p >= total {
                return Err(Error::Validation(format!(
                    "mask {mask_id}: pixel index {p} outside {width}x{height} raster"
                )));
            }
            let (w, b) = (p / 64, p % 64);
            if bits[w] & (1 << b) == 0 {
                bits[w] |= 1 << b;
                area += 1;
            }
        }
        if area == 0 {
            return Err(Error::Validation(format!("mask {mask_id} has no set pixels")));
        }
        Ok(Self {
            view_id: view_id.into(),
            mask_id,
            width,
            height,
            bits,
            area,
        })
    }

    pub fn view_id(&self) -> &str {
        &self.view_id
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.area
    }

    #[inline]
    pub fn contains(&self, u: u32, v: u32) -> bool {
        if u >= self.width || v >= self.height {
            return false;
        }
        self.contains_index(v as usize * self.width as usize + u as usize)
    }

    #[inline]
    pub fn contains_index(&self, p: usize) -> bool {
        self.bits[p / 64] & (1 << (p % 64)) != 0
    }

    /// Row-major indices of set pixels, ascending.
    pub fn pixel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let b = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(w * 64 + b)
            })
        })
    }

    pub fn with_mask_id(mut self, mask_id: u32) -> Self {
        self.mask_id = mask_id;
        self
    }
}

/// All 2D masks of a scene, across views.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSet {
    masks: Vec<Mask2D>,
}

impl MaskSet {
    pub fn new(masks: Vec<Mask2D>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &masks {
            if !seen.insert(m.mask_id) {
                return Err(Error::Validation(format!("mask id {} appears twice", m.mask_id)));
            }
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Mask2D] {
        &self.masks
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mask2D> {
        self.masks.iter()
    }

    pub fn for_view<'a>(&'a self, view_id: &'a str) -> impl Iterator<Item = &'a Mask2D> + 'a {
        self.masks.iter().filter(move |m| m.view_id == view_id)
    }

    pub fn get(&self, mask_id: u32) -> Option<&Mask2D> {
        self.masks.iter().find(|m| m.mask_id == mask_id)
    }

    /// Keeps the masks for which `keep` returns true, preserving order and ids.
    pub fn retain(&self, mut keep: impl FnMut(&Mask2D) -> bool) -> MaskSet {
        MaskSet {
            masks: self.masks.iter().filter(|m| keep(m)).cloned().collect(),
        }
    }

    pub fn into_vec(self) -> Vec<Mask2D> {
        self.masks
    }
}

impl<'a> IntoIterator for &'a MaskSet {
    type Item = &'a Mask2D;
    type IntoIter = std::slice::Iter<'a, Mask2D>;

    fn into_iter(self) -> Self::IntoIter {
        self.masks.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lifted,
    Seed,
    Grown,
    Merged,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Lifted => "lifted",
            Stage::Seed => "seed",
            Stage::Grown => "grown",
            Stage::Merged => "merged",
        }
    }
}

/// The 2D mask a point set descends from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MaskSource {
    pub view: String,
    pub mask: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    /// Sorted, distinct source masks. A merged instance lists every mask that
    /// contributed to it.
    pub sources: Vec<MaskSource>,
}

impl Provenance {
    pub fn single(stage: Stage, view: impl Into<String>, mask: u32) -> Self {
        Self {
            stage,
            sources: vec![MaskSource {
                view: view.into(),
                mask,
            }],
        }
    }

    /// Distinct supporting view ids, sorted.
    pub fn views(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.sources.iter().map(|s| s.view.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn merge(&self, other: &Provenance, stage: Stage) -> Provenance {
        let set: BTreeSet<MaskSource> = self.sources.iter().chain(&other.sources).cloned().collect();
        Provenance {
            stage,
            sources: set.into_iter().collect(),
        }
    }
}

/// A set of points with provenance and a confidence in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointSetInstance {
    points: Vec<u32>,
    pub provenance: Provenance,
    pub confidence: f64,
}

impl PointSetInstance {
    /// `points` must be strictly increasing and non-empty.
    pub fn new(points: Vec<u32>, provenance: Provenance, confidence: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("instance has no points".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("instance point indices are not strictly increasing".into()));
        }
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(Error::Validation(format!("instance confidence {confidence} outside (0, 1]")));
        }
        Ok(Self {
            points,
            provenance,
            confidence,
        })
    }

    /// Sorts and deduplicates `points` before validating.
    pub fn from_unsorted(mut points: Vec<u32>, provenance: Provenance, confidence: f64) -> Result<Self> {
        points.sort_unstable();
        points.dedup();
        Self::new(points, provenance, confidence)
    }

    pub fn points(&self) -> &[u32] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate_against(&self, n: usize) -> Result<()> {
        match self.points.last() {
            Some(&last) if (last as usize) < n => Ok(()),
            Some(&last) => Err(Error::Validation(format!(
                "instance references point {last} but the cloud has {n} points"
            ))),
            None => Err(Error::Validation("instance has no points".into())),
        }
    }
}

/// Instance proposals at some pipeline stage, plus the number of views the
/// pipeline ran on (the denominator of view-support confidence).
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub instances: Vec<PointSetInstance>,
    pub view_count: usize,
}

impl ProposalSet {
    pub fn new(instances: Vec<PointSetInstance>, view_count: usize) -> Self {
        Self {
            instances,
            view_count,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Confidence from view support: distinct supporting views over the number of
/// views used, clamped to (0, 1].
pub fn view_support_confidence(supporting_views: usize, view_count: usize) -> f64 {
    if view_count == 0 {
        return 1.0;
    }
    let c = supporting_views as f64 / view_count as f64;
    c.clamp(f64::MIN_POSITIVE, 1.0)
}

/// The read-only input world of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cloud: PointCloud,
    pub views: Vec<CameraView>,
    pub partition: SuperpointPartition,
    pub features: FeatureTable,
}

impl SceneBundle {
    pub fn new(
        cloud: PointCloud,
        views: Vec<CameraView>,
        partition: SuperpointPartition,
        features: FeatureTable,
    ) -> Result<Self> {
        if partition.point_count() != cloud.len() {
            return Err(Error::Validation(format!(
                "superpoint labels cover {} points but the cloud has {}",
                partition.point_count(),
                cloud.len()
            )));
        }
        if features.rows() != partition.count() {
            return Err(Error::Validation(format!(
                "feature table has {} rows but there are {} superpoints",
                features.rows(),
                partition.count()
            )));
        }
        let mut ids = BTreeSet::new();
        for v in &views {
            if !ids.insert(v.view_id()) {
                return Err(Error::Validation(format!("view id {} appears twice", v.view_id())));
            }
        }
        Ok(Self {
            cloud,
            views,
            partition,
            features,
        })
    }

    pub fn view_index(&self, view_id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.view_id() == view_id)
    }

    /// Checks that every mask refers to a known view and matches its raster size.
    pub fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        for m in masks {
            let Some(v) = self.view_index(m.view_id()) else {
                return Err(Error::Validation(format!(
                    "mask {} refers to unknown view {}",
                    m.mask_id(),
                    m.view_id()
                )));
            };
            let view = &self.views[v];
            if (m.width(), m.height()) != (view.width(), view.height()) {
                return Err(Error::Validation(format!(
                    "mask {} is {}x{} but view {} is {}x{}",
                    m.mask_id(),
                    m.width(),
                    m.height(),
                    view.view_id(),
                    view.width(),
                    view.height()
                )));
            }
        }
        Ok(())
    }
}
