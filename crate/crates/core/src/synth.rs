//! Synthetic scenes with known ground truth: a room shell with primitive
//! objects on the floor, orbit cameras, rendered per-view masks and the mask
//! failure modes the pipeline has to survive.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, binary, ScenePaths};
use crate::overseg::{oversegment, OversegConfig};
use crate::projection::{map_view, MappingConfig, ViewMapping};
use crate::scene::{CameraView, FeatureTable, Mask2D, MaskSet, PointCloud, SceneBundle};

pub const BACKGROUND: i32 = -1;

/// Default clearance between object footprints, and between objects and walls.
const MIN_GAP: f64 = 0.3;
/// Default floor clearance: floor this close to an object footprint is not
/// sampled, so floor behind an object's silhouette is never within the
/// visibility tolerance of the object itself.
const FLOOR_MARGIN: f64 = 0.2;
const PLACEMENT_RETRIES: usize = 2000;
const WALLS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Per view, the probability that two objects' masks come out as one.
    pub merge_mask_probability: f64,
    /// Masks are randomly dilated or eroded by this many pixels.
    pub boundary_noise_px: u32,
    pub feature_noise_sigma: f64,
    /// Two separated objects share one appearance; their masks are joined
    /// in every view that sees both.
    pub duplicate_appearance: bool,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            merge_mask_probability: 0.0,
            boundary_noise_px: 0,
            feature_noise_sigma: 0.02,
            duplicate_appearance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rng_seed: u64,
    pub room_size: [f64; 3],
    pub object_count: usize,
    pub points_per_object: usize,
    /// Points on the floor and walls.
    pub background_points: usize,
    /// Free floor between object footprints and between objects and walls.
    pub min_gap: f64,
    /// Unsampled floor ring around each object footprint; 0 puts objects in
    /// full contact with the floor.
    pub floor_clearance: f64,
    pub camera_count: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub feature_dim: usize,
    pub corruption: Corruption,
    pub overseg: OversegConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            room_size: [6.0, 5.0, 2.5],
            object_count: 8,
            points_per_object: 8000,
            background_points: 36_000,
            min_gap: MIN_GAP,
            floor_clearance: FLOOR_MARGIN,
            camera_count: 20,
            image_width: 128,
            image_height: 96,
            feature_dim: 32,
            corruption: Corruption::default(),
            overseg: OversegConfig {
                k_neighbors: 12,
                merge_threshold: 0.05,
                min_segment_size: 20,
                max_segment_size: Some(250),
                normal_weight: 0.5,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corruption;
        if self.object_count == 0
            || self.points_per_object == 0
            || self.camera_count == 0
            || self.image_width == 0
            || self.image_height == 0
            || self.feature_dim == 0
        {
            return Err(Error::Config("synthetic scene counts must be positive".into()));
        }
        if !(self.min_gap >= 0.0 && self.min_gap.is_finite()) {
            return Err(Error::Config(format!("min_gap must be non-negative, got {}", self.min_gap)));
        }
        if !(self.floor_clearance >= 0.0 && self.floor_clearance.is_finite()) {
            return Err(Error::Config(format!("floor_clearance must be non-negative, got {}", self.floor_clearance)));
        }
        if self.room_size.iter().any(|s| !(s.is_finite() && *s > 2.0 * self.min_gap)) {
            return Err(Error::Config(format!("room size {:?} is too small", self.room_size)));
        }
        if !(0.0..=1.0).contains(&c.merge_mask_probability) {
            return Err(Error::Config("merge_mask_probability must lie in [0, 1]".into()));
        }
        if !(c.feature_noise_sigma >= 0.0 && c.feature_noise_sigma.is_finite()) {
            return Err(Error::Config("feature_noise_sigma must be a non-negative number".into()));
        }
        if c.duplicate_appearance && self.object_count < 2 {
            return Err(Error::Config("duplicate_appearance needs at least two objects".into()));
        }
        self.overseg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Half extents along the rotated x and y axes and z.
    Box { half: [f64; 3], yaw: f64 },
    Sphere { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    fn footprint(&self) -> f64 {
        match *self {
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Sphere { radius } | Shape::Cylinder { radius, .. } => radius,
        }
    }
}

/// A primitive standing on the floor at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Object id per point, `BACKGROUND` for floor and walls.
    pub labels: Vec<i32>,
    /// Unit feature prototype per object.
    pub prototypes: Vec<Vec<f32>>,
    pub objects: Vec<SceneObject>,
    /// The look-alike pair when `duplicate_appearance` is on.
    pub duplicate_pair: Option<(usize, usize)>,
}

impl GroundTruth {
    pub fn object_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binary::write_label_file(path, binary::INSTANCE_MAGIC, &self.labels)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    match rng.random_range(0..3) {
        0 => Shape::Box {
            half: [uniform(rng, 0.2, 0.45), uniform(rng, 0.2, 0.45), uniform(rng, 0.2, 0.5)],
            yaw: uniform(rng, 0.0, PI),
        },
        1 => Shape::Sphere {
            radius: uniform(rng, 0.22, 0.4),
        },
        _ => Shape::Cylinder {
            radius: uniform(rng, 0.18, 0.35),
            height: uniform(rng, 0.4, 1.0),
        },
    }
}

fn fits(room: &[f64; 3], gap: f64, placed: &[SceneObject], shape: &Shape, p: [f64; 2]) -> bool {
    let r = shape.footprint();
    let inside = p[0] - r >= gap && p[0] + r <= room[0] - gap && p[1] - r >= gap && p[1] + r <= room[1] - gap;
    inside
        && placed.iter().all(|o| {
            let d = (o.position[0] - p[0]).hypot(o.position[1] - p[1]);
            d >= o.shape.footprint() + r + gap
        })
}

fn place_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let room = &cfg.room_size;
    let fail = || {
        Error::Generation(format!(
            "could not place {} objects in a {:.1} x {:.1} m room; try a smaller object_count",
            cfg.object_count, room[0], room[1]
        ))
    };
    let mut placed: Vec<SceneObject> = Vec::with_capacity(cfg.object_count);
    for k in 0..cfg.object_count {
        let look_alike = cfg.corruption.duplicate_appearance && k == 1;
        let mut done = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (shape, p) = if look_alike {
                // Same shape, 0.6 to 1.2 m of free floor from its twin.
                let twin = placed[0];
                let gap = uniform(rng, 0.6, 1.2);
                let dist = 2.0 * twin.shape.footprint() + gap;
                let a = uniform(rng, 0.0, TAU);
                (twin.shape, [twin.position[0] + dist * a.cos(), twin.position[1] + dist * a.sin()])
            } else {
                let shape = random_shape(rng);
                let r = shape.footprint();
                let lo = r + cfg.min_gap;
                if room[0] - lo <= lo || room[1] - lo <= lo {
                    continue;
                }
                (shape, [uniform(rng, lo, room[0] - lo), uniform(rng, lo, room[1] - lo)])
            };
            if fits(room, cfg.min_gap, &placed, &shape, p) {
                placed.push(SceneObject { shape, position: p });
                done = true;
                break;
            }
        }
        if !done {
            return Err(fail());
        }
    }
    Ok(placed)
}

fn sample_object(obj: &SceneObject, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<[f64; 3]>) {
    let [x0, y0] = obj.position;
    match obj.shape {
        Shape::Box { half, yaw } => {
            let [hx, hy, hz] = half;
            // Four sides and the top; boxes have no bottom face.
            let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy];
            let total: f64 = areas.iter().sum();
            let (c, s) = (yaw.cos(), yaw.sin());
            for _ in 0..n {
                let mut pick = uniform(rng, 0.0, total);
                let mut face = 0;
                while face < 4 && pick >= areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let a = uniform(rng, -1.0, 1.0);
                let b = uniform(rng, -1.0, 1.0);
                let local = match face {
                    0 => [hx, a * hy, (b + 1.0) * hz],
                    1 => [-hx, a * hy, (b + 1.0) * hz],
                    2 => [a * hx, hy, (b + 1.0) * hz],
                    3 => [a * hx, -hy, (b + 1.0) * hz],
                    _ => [a * hx, b * hy, 2.0 * hz],
                };
                out.push([x0 + c * local[0] - s * local[1], y0 + s * local[0] + c * local[1], local[2]]);
            }
        }
        Shape::Sphere { radius } => {
            for _ in 0..n {
                let z = uniform(rng, -1.0, 1.0);
                let a = uniform(rng, 0.0, TAU);
                let r = (1.0 - z * z).sqrt();
                out.push([x0 + radius * r * a.cos(), y0 + radius * r * a.sin(), radius * (1.0 + z)]);
            }
        }
        Shape::Cylinder { radius, height } => {
            let side = TAU * radius * height;
            let top = PI * radius * radius;
            for _ in 0..n {
                let a = uniform(rng, 0.0, TAU);
                if uniform(rng, 0.0, side + top) < side {
                    out.push([x0 + radius * a.cos(), y0 + radius * a.sin(), uniform(rng, 0.0, height)]);
                } else {
                    let r = radius * uniform(rng, 0.0, 1.0f64).sqrt();
                    out.push([x0 + r * a.cos(), y0 + r * a.sin(), height]);
                }
            }
        }
    }
}

/// Floor and four walls, area-weighted. Returns positions and the surface
/// index of each point (0 = floor).
fn sample_background(cfg: &SynthConfig, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<usize>) {
    let [sx, sy, sz] = cfg.room_size;
    let areas = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(cfg.background_points);
    let mut surfaces = Vec::with_capacity(cfg.background_points);
    while points.len() < cfg.background_points {
        let mut pick = uniform(rng, 0.0, total);
        let mut s = 0;
        while s < WALLS - 1 && pick >= areas[s] {
            pick -= areas[s];
            s += 1;
        }
        let a = uniform(rng, 0.0, 1.0);
        let b = uniform(rng, 0.0, 1.0);
        let p = match s {
            0 => [a * sx, b * sy, 0.0],
            1 => [a * sx, 0.0, b * sz],
            2 => [a * sx, sy, b * sz],
            3 => [0.0, a * sy, b * sz],
            _ => [sx, a * sy, b * sz],
        };
        if s == 0
            && objects.iter().any(|o| {
                floor_hidden(o, p, cfg.floor_clearance)
            })
        {
            continue;
        }
        points.push(p);
        surfaces.push(s);
    }
    (points, surfaces)
}

/// Whether a floor point lies under the object or inside its clearance ring.
fn floor_hidden(o: &SceneObject, p: [f64; 3], clearance: f64) -> bool {
    let (dx, dy) = (p[0] - o.position[0], p[1] - o.position[1]);
    match o.shape {
        Shape::Box { half, yaw } => {
            let (c, s) = (yaw.cos(), yaw.sin());
            let (lx, ly) = ((c * dx + s * dy).abs() - half[0], (-s * dx + c * dy).abs() - half[1]);
            lx.max(0.0).hypot(ly.max(0.0)) < clearance || (lx < 0.0 && ly < 0.0)
        }
        Shape::Sphere { radius } | Shape::Cylinder { radius, .. } => dx.hypot(dy) < radius + clearance,
    }
}

fn look_at(id: String, eye: [f64; 3], target: [f64; 3], cfg: &SynthConfig) -> Result<CameraView> {
    let eye_v = Vector3::from(eye);
    let forward = (Vector3::from(target) - eye_v).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let mut pose = Matrix4::identity();
    pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
    pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
    pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
    pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye_v);
    let (w, h) = (f64::from(cfg.image_width), f64::from(cfg.image_height));
    // 90 degree horizontal field of view.
    let f = w / 2.0;
    let k = Matrix3::new(f, 0.0, w / 2.0 - 0.5, 0.0, f, h / 2.0 - 0.5, 0.0, 0.0, 1.0);
    CameraView::new(id, cfg.image_width, cfg.image_height, k, pose)
}

fn orbit_cameras(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CameraView>> {
    let [sx, sy, sz] = cfg.room_size;
    let (cx, cy) = (sx / 2.0, sy / 2.0);
    let radius = 0.4 * sx.min(sy);
    let t = cfg.camera_count;
    let width = (t as f64).log10().ceil().max(3.0) as usize;
    (0..t)
        .map(|k| {
            let a = TAU * k as f64 / t as f64 + uniform(rng, -0.1, 0.1);
            let height = (uniform(rng, 1.5, 2.0)).min(sz - 0.1);
            let eye = [cx + radius * a.cos(), cy + radius * a.sin(), height];
            let target = [cx + uniform(rng, -0.5, 0.5), cy + uniform(rng, -0.5, 0.5), 0.3];
            look_at(format!("view_{k:0width$}"), eye, target, cfg)
        })
        .collect()
}

/// `count` unit vectors; orthonormal when `count <= dim`.
fn prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for q in &out {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Builds a scene and its ground truth. Everything is drawn from one seeded
/// stream in a fixed order.
pub fn generate_scene(cfg: &SynthConfig) -> Result<(SceneBundle, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let objects = place_objects(cfg, &mut rng)?;

    let mut positions = Vec::with_capacity(cfg.object_count * cfg.points_per_object + cfg.background_points);
    let mut labels = Vec::with_capacity(positions.capacity());
    for (k, obj) in objects.iter().enumerate() {
        sample_object(obj, cfg.points_per_object, &mut rng, &mut positions);
        labels.resize(positions.len(), k as i32);
    }
    let (bg, surfaces) = sample_background(cfg, &objects, &mut rng);
    let object_points = positions.len();
    positions.extend(bg);
    labels.resize(positions.len(), BACKGROUND);
    // Stored as float32 on disk; round now so a reload is exact.
    for p in &mut positions {
        *p = p.map(|c| f64::from(c as f32));
    }
    let cloud = PointCloud::new(positions, None)?;
    let views = orbit_cameras(cfg, &mut rng)?;

    let duplicate_pair = cfg.corruption.duplicate_appearance.then_some((0, 1));
    let distinct = cfg.object_count - usize::from(duplicate_pair.is_some());
    let protos = prototypes(distinct + WALLS, cfg.feature_dim, &mut rng);
    let object_proto: Vec<usize> = (0..cfg.object_count)
        .map(|k| if duplicate_pair.is_some() { k.saturating_sub(1) } else { k })
        .collect();

    let partition = oversegment(&cloud, &cfg.overseg)?;
    let dim = cfg.feature_dim;
    let mut data = Vec::with_capacity(partition.count() * dim);
    for u in 0..partition.count() {
        // Majority vote; background points vote for their surface.
        let mut votes = vec![0usize; distinct + WALLS];
        for &i in partition.members(u) {
            let i = i as usize;
            let slot = if i < object_points {
                object_proto[labels[i] as usize]
            } else {
                distinct + surfaces[i - object_points]
            };
            votes[slot] += 1;
        }
        let best = (0..votes.len()).max_by_key(|&s| (votes[s], std::cmp::Reverse(s))).expect("non-empty");
        let mut f: Vec<f64> = protos[best]
            .iter()
            .map(|&x| x + cfg.corruption.feature_noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        f.iter_mut().for_each(|x| *x /= norm);
        data.extend(f.iter().map(|&x| x as f32));
    }
    let features = FeatureTable::new(dim, data)?;
    let scene = SceneBundle::new(cloud, views, partition, features)?;
    let gt = GroundTruth {
        labels,
        prototypes: object_proto
            .iter()
            .map(|&s| protos[s].iter().map(|&x| x as f32).collect())
            .collect(),
        objects,
        duplicate_pair,
    };
    Ok((scene, gt))
}

/// Per-pixel owner of one view: the object of the lowest-index point whose
/// depth equals the buffer minimum, `BACKGROUND` for walls, `None` where no
/// point lands.
pub fn pixel_owners(mapping: &ViewMapping, labels: &[i32]) -> Vec<Option<i32>> {
    let depth = mapping.depth.as_ref().expect("render mappings carry a depth buffer");
    let mut owner = vec![None; mapping.width as usize * mapping.height as usize];
    for &i in &mapping.visible_points {
        let i = i as usize;
        let [u, v] = mapping.pixel[i];
        let p = mapping.pixel_index(i);
        if owner[p].is_none() && mapping.z[i] == depth.at(u, v) {
            owner[p] = Some(labels[i]);
        }
    }
    owner
}

/// Occlusion-aware mappings with default settings, as used for rendering.
pub fn render_mappings(scene: &SceneBundle) -> Result<Vec<ViewMapping>> {
    let cfg = MappingConfig::default();
    scene.views.par_iter().map(|v| map_view(&scene.cloud, v, &cfg)).collect()
}

/// Number of points of each object visible per view.
pub fn visibility_counts(mappings: &[ViewMapping], gt: &GroundTruth) -> Vec<Vec<usize>> {
    mappings
        .iter()
        .map(|m| {
            let mut counts = vec![0; gt.object_count()];
            for &i in &m.visible_points {
                if let Ok(k) = usize::try_from(gt.labels[i as usize]) {
                    counts[k] += 1;
                }
            }
            counts
        })
        .collect()
}

fn morph(raster: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; raster.len()];
    for v in 0..h {
        for u in 0..w {
            let (v0, v1) = (v.saturating_sub(r), (v + r).min(h - 1));
            let (u0, u1) = (u.saturating_sub(r), (u + r).min(w - 1));
            let mut window = (v0..=v1).flat_map(|y| (u0..=u1).map(move |x| y * w + x));
            out[v * w + u] = if dilate {
                window.any(|p| raster[p])
            } else {
                // Pixels beyond the border count as outside the mask.
                v0 + r == v && v1 == v + r && u0 + r == u && u1 == u + r && window.all(|p| raster[p])
            };
        }
    }
    out
}

/// Renders one mask per visible object per view, then applies the
/// configured corruptions. Mask ids are dense in view order.
pub fn render_masks(scene: &SceneBundle, gt: &GroundTruth, cfg: &SynthConfig) -> Result<MaskSet> {
    let mappings = render_mappings(scene)?;
    render_masks_with(scene, gt, cfg, &mappings)
}

pub fn render_masks_with(
    scene: &SceneBundle,
    gt: &GroundTruth,
    cfg: &SynthConfig,
    mappings: &[ViewMapping],
) -> Result<MaskSet> {
    let c = &cfg.corruption;
    let per_view: Vec<Vec<Vec<bool>>> = scene
        .views
        .par_iter()
        .zip(mappings)
        .enumerate()
        .map(|(vi, (view, mapping))| {
            let (w, h) = (view.width() as usize, view.height() as usize);
            let owners = pixel_owners(mapping, &gt.labels);
            let mut rasters: Vec<(usize, Vec<bool>)> = Vec::new();
            for k in 0..gt.object_count() {
                let raster: Vec<bool> = owners.iter().map(|o| *o == Some(k as i32)).collect();
                if raster.iter().any(|&b| b) {
                    rasters.push((k, raster));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x6d61_736b);
            rng.set_stream(vi as u64);
            // Groups of object rasters that end up as one mask.
            let mut groups: Vec<Vec<usize>> = (0..rasters.len()).map(|g| vec![g]).collect();
            if let Some((a, b)) = gt.duplicate_pair {
                let find = |k| rasters.iter().position(|(o, _)| *o == k);
                if let (Some(ia), Some(ib)) = (find(a), find(b)) {
                    groups[ia].push(ib);
                    groups[ib].clear();
                }
            }
            groups.retain(|g| !g.is_empty());
            if groups.len() >= 2 && rng.random_bool(c.merge_mask_probability) {
                let a = rng.random_range(0..groups.len());
                let mut b = rng.random_range(0..groups.len() - 1);
                if b >= a {
                    b += 1;
                }
                let moved = std::mem::take(&mut groups[b]);
                groups[a].extend(moved);
                groups.retain(|g| !g.is_empty());
            }
            let mut out = Vec::with_capacity(groups.len());
            for g in &groups {
                let mut raster = vec![false; w * h];
                for &r in g {
                    raster.iter_mut().zip(&rasters[r].1).for_each(|(o, &b)| *o |= b);
                }
                if c.boundary_noise_px > 0 {
                    let dilate = rng.random_bool(0.5);
                    let noisy = morph(&raster, w, h, c.boundary_noise_px as usize, dilate);
                    if noisy.iter().any(|&b| b) {
                        raster = noisy;
                    }
                }
                out.push(raster);
            }
            out
        })
        .collect();

    let mut masks = Vec::new();
    for (view, rasters) in scene.views.iter().zip(per_view) {
        for raster in rasters {
            let id = masks.len() as u32;
            masks.push(Mask2D::from_raster(view.view_id(), id, view.width(), view.height(), &raster)?);
        }
    }
    MaskSet::new(masks)
}

/// Writes the scene file set, its masks and `gt.in3d` into `dir`.
pub fn write_scene_dir(dir: &Path, scene: &SceneBundle, gt: &GroundTruth, masks: &MaskSet) -> Result<ScenePaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ScenePaths::from_dir(dir);
    io::save_scene(&paths, scene)?;
    io::masks::write_masks(&paths.masks, &scene.views, masks)?;
    gt.write(&paths.ground_truth)?;
    Ok(paths)
}
