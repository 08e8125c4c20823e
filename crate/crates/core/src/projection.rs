//! Pinhole projection, point rasterization into depth buffers and per-point
//! visibility.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::{read_raster_file, write_raster_file, DEPTH_MAGIC};
use crate::scene::{CameraView, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every in-frustum point with positive depth is visible.
    Naive,
    /// Only points attaining their pixel's minimum depth exactly.
    MinDepth,
    /// Points within `tau_vis` of their pixel's minimum depth.
    #[default]
    OcclusionAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub tau_vis: f64,
    pub strategy: Strategy,
    pub splat_radius: u32,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            tau_vis: 0.1,
            strategy: Strategy::OcclusionAware,
            splat_radius: 0,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_vis > 0.0 && self.tau_vis.is_finite()) {
            return Err(Error::Config(format!("tau_vis must be positive, got {}", self.tau_vis)));
        }
        Ok(())
    }
}

/// Sub-pixel image coordinates and camera-space depth of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub uv: Vec<[f64; 2]>,
    pub z: Vec<f64>,
}

impl Projection {
    /// Points on or behind the image plane cannot be projected.
    pub fn projectable(&self, i: usize) -> bool {
        self.z[i] > 0.0
    }

    /// Rounded pixel of point `i` if it is projectable and inside the image.
    #[inline]
    pub fn pixel(&self, i: usize, width: u32, height: u32) -> Option<(u32, u32)> {
        if !(self.z[i] > 0.0) {
            return None;
        }
        let u = self.uv[i][0].round();
        let v = self.uv[i][1].round();
        if u >= 0.0 && v >= 0.0 && u < f64::from(width) && v < f64::from(height) {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }
}

/// `z [u v 1]^T = K T^{-1} p` for every point. Coordinates of points with
/// `z <= 0` are still computed but must not be used.
pub fn project_points(cloud: &PointCloud, view: &CameraView) -> Result<Projection> {
    let k = view.intrinsics();
    let (fx, s, cx, fy, cy, k22) = (k[(0, 0)], k[(0, 1)], k[(0, 2)], k[(1, 1)], k[(1, 2)], k[(2, 2)]);
    let (uv, z): (Vec<[f64; 2]>, Vec<f64>) = cloud
        .positions()
        .par_iter()
        .map(|&p| {
            let c = view.to_camera(p);
            let w = k22 * c[2];
            let u = (fx * c[0] + s * c[1] + cx * c[2]) / w;
            let v = (fy * c[1] + cy * c[2]) / w;
            ([u, v], w)
        })
        .unzip();
    Ok(Projection { uv, z })
}

/// Per-pixel minimum depth, row-major, `+inf` where no point lands.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthBuffer {
    #[inline]
    pub fn at(&self, u: u32, v: u32) -> f64 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    /// Raw dump: `DB3D`, W, H, then float32 depths.
    pub fn write(&self, path: &Path) -> Result<()> {
        let values: Vec<f32> = self.data.iter().map(|&d| d as f32).collect();
        write_raster_file(path, DEPTH_MAGIC, &[self.width, self.height], &values)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, values) = read_raster_file(path, DEPTH_MAGIC, 2)?;
        Ok(Self {
            width: dims[0],
            height: dims[1],
            data: values.into_iter().map(f64::from).collect(),
        })
    }
}

/// Z-buffer from a projection. Pixel writes are applied sequentially in point
/// order after the parallel projection, so the result does not depend on the
/// number of workers (and `min` is order-independent anyway).
pub fn rasterize_projection(proj: &Projection, width: u32, height: u32, splat_radius: u32) -> DepthBuffer {
    let w = width as usize;
    let mut data = vec![f64::INFINITY; w * height as usize];
    let r = splat_radius as i64;
    for i in 0..proj.z.len() {
        let z = proj.z[i];
        if !(z > 0.0) {
            continue;
        }
        if r == 0 {
            if let Some((u, v)) = proj.pixel(i, width, height) {
                let slot = &mut data[v as usize * w + u as usize];
                if z < *slot {
                    *slot = z;
                }
            }
            continue;
        }
        let (cu, cv) = (proj.uv[i][0].round(), proj.uv[i][1].round());
        if !cu.is_finite() || !cv.is_finite() {
            continue;
        }
        let (cu, cv) = (cu as i64, cv as i64);
        for v in (cv - r).max(0)..=(cv + r).min(height as i64 - 1) {
            for u in (cu - r).max(0)..=(cu + r).min(width as i64 - 1) {
                let slot = &mut data[v as usize * w + u as usize];
                if z < *slot {
                    *slot = z;
                }
            }
        }
    }
    DepthBuffer { width, height, data }
}

pub fn rasterize_depth(cloud: &PointCloud, view: &CameraView, cfg: &MappingConfig) -> Result<DepthBuffer> {
    let proj = project_points(cloud, view)?;
    Ok(rasterize_projection(&proj, view.width(), view.height(), cfg.splat_radius))
}

/// Visibility and point-to-pixel correspondences of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMapping {
    pub view_id: String,
    pub width: u32,
    pub height: u32,
    /// Absent for the naive strategy, which needs no buffer.
    pub depth: Option<DepthBuffer>,
    pub visible: Vec<bool>,
    /// Valid only where `visible`.
    pub pixel: Vec<[u32; 2]>,
    pub z: Vec<f64>,
    /// Indices of visible points, ascending.
    pub visible_points: Vec<u32>,
}

impl ViewMapping {
    #[inline]
    pub fn pixel_index(&self, i: usize) -> usize {
        let [u, v] = self.pixel[i];
        v as usize * self.width as usize + u as usize
    }
}

pub fn verify_visibility(
    proj: &Projection,
    view: &CameraView,
    depth: Option<DepthBuffer>,
    cfg: &MappingConfig,
) -> Result<ViewMapping> {
    cfg.validate()?;
    let (w, h) = (view.width(), view.height());
    let depth = match cfg.strategy {
        Strategy::Naive => None,
        _ => Some(depth.ok_or_else(|| {
            Error::Config(format!("view {}: depth buffer required for {:?}", view.view_id(), cfg.strategy))
        })?),
    };
    if let Some(d) = &depth {
        if (d.width, d.height) != (w, h) {
            return Err(Error::Validation(format!(
                "view {}: depth buffer is {}x{} but the view is {w}x{h}",
                view.view_id(),
                d.width,
                d.height
            )));
        }
    }
    let n = proj.z.len();
    let mut visible = vec![false; n];
    let mut pixel = vec![[0u32; 2]; n];
    let mut visible_points = Vec::new();
    for i in 0..n {
        let Some((u, v)) = proj.pixel(i, w, h) else { continue };
        let z = proj.z[i];
        let ok = match (&depth, cfg.strategy) {
            (_, Strategy::Naive) => true,
            (Some(d), Strategy::MinDepth) => z == d.at(u, v),
            (Some(d), Strategy::OcclusionAware) => (z - d.at(u, v)).abs() <= cfg.tau_vis,
            (None, _) => unreachable!("checked above"),
        };
        if ok {
            visible[i] = true;
            pixel[i] = [u, v];
            visible_points.push(i as u32);
        }
    }
    Ok(ViewMapping {
        view_id: view.view_id().to_string(),
        width: w,
        height: h,
        depth,
        visible,
        pixel,
        z: proj.z.clone(),
        visible_points,
    })
}

/// Projection, rasterization and visibility for one view.
pub fn map_view(cloud: &PointCloud, view: &CameraView, cfg: &MappingConfig) -> Result<ViewMapping> {
    let proj = project_points(cloud, view)?;
    let depth = match cfg.strategy {
        Strategy::Naive => None,
        _ => Some(rasterize_projection(&proj, view.width(), view.height(), cfg.splat_radius)),
    };
    verify_visibility(&proj, view, depth, cfg)
}

/// Maps every view; output order follows `views`.
pub fn map_views(cloud: &PointCloud, views: &[CameraView], cfg: &MappingConfig) -> Result<Vec<ViewMapping>> {
    cfg.validate()?;
    views.par_iter().map(|v| map_view(cloud, v, cfg)).collect()
}
