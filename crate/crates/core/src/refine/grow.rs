//! Feature-guided growing of seeds over whole superpoints.
//!
//! The affinity of a candidate superpoint is `max(0, cos(f_seed, f_u))` times
//! its overlap with the seed. Two overlap measures are available:
//!
//! * `PointIou`: plain point-set IoU between the seed and the superpoint.
//!   A superpoint disjoint from the seed has IoU 0, so growth can only absorb
//!   superpoints the seed already intersects.
//! * `Contact`: the fraction of the superpoint's points that are in the seed
//!   or within `radius` of it. Adjacent superpoints on the same surface touch
//!   the seed along their border, which lets growth cross superpoint
//!   boundaries inside an object.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{FeatureTable, PointCloud, PointSetInstance, Provenance, Stage, SuperpointPartition};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OverlapMode {
    PointIou {
        /// Superpoints adjacent to an absorbed one (k nearest centroids) are
        /// also candidates.
        centroid_neighbors: usize,
    },
    Contact {
        radius: f64,
    },
}

impl Default for OverlapMode {
    fn default() -> Self {
        OverlapMode::Contact { radius: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowConfig {
    /// Growth stops once the best affinity drops below this. Contact overlap
    /// sits near 1 for any touching superpoint, so the floor effectively
    /// bounds the cosine; 0.25 keeps a seed carrying a sliver of a
    /// neighbouring object from drifting into it. Literal IoU overlap is far
    /// smaller and wants a floor around 0.05.
    pub affinity_floor: f64,
    pub max_iterations: Option<usize>,
    pub overlap: OverlapMode,
    /// Seeds of the same view may not absorb a superpoint another seed of that
    /// view already absorbed. Off by default: conflicts are settled later.
    pub exclusive_claims: bool,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            affinity_floor: 0.25,
            max_iterations: None,
            overlap: OverlapMode::default(),
            exclusive_claims: false,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.affinity_floor > 0.0) {
            return Err(Error::Config(format!("affinity floor must be positive, got {}", self.affinity_floor)));
        }
        match self.overlap {
            OverlapMode::Contact { radius } if !(radius >= 0.0 && radius.is_finite()) => {
                Err(Error::Config(format!("contact radius must be non-negative, got {radius}")))
            }
            _ => Ok(()),
        }
    }
}

/// Scene data shared by all seeds, built once.
pub struct GrowContext<'a> {
    pub partition: &'a SuperpointPartition,
    features: Vec<f64>,
    norms: Vec<f64>,
    dim: usize,
    /// Contact mode: CSR lists of other points within the radius.
    near_offsets: Vec<usize>,
    near: Vec<u32>,
    /// IoU mode: centroid k-NN adjacency.
    adjacency: Vec<Vec<u32>>,
}

impl<'a> GrowContext<'a> {
    pub fn new(cloud: &PointCloud, partition: &'a SuperpointPartition, features: &FeatureTable, cfg: &GrowConfig) -> Result<Self> {
        cfg.validate()?;
        if features.rows() != partition.count() || partition.point_count() != cloud.len() {
            return Err(Error::Validation("cloud, superpoints and features disagree".into()));
        }
        let dim = features.dim();
        let feats: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();
        let norms = feats.chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut ctx = Self {
            partition,
            features: feats,
            norms,
            dim,
            near_offsets: vec![0],
            near: Vec::new(),
            adjacency: Vec::new(),
        };
        match cfg.overlap {
            OverlapMode::Contact { radius } => {
                let tree = KdTree::new(cloud.positions());
                let lists: Vec<Vec<u32>> = cloud
                    .positions()
                    .par_iter()
                    .enumerate()
                    .map(|(i, &p)| tree.within_radius(p, radius).into_iter().filter(|&j| j as usize != i).collect())
                    .collect();
                for l in lists {
                    ctx.near.extend_from_slice(&l);
                    ctx.near_offsets.push(ctx.near.len());
                }
            }
            OverlapMode::PointIou { centroid_neighbors } => {
                let centroids: Vec<[f64; 3]> = (0..partition.count())
                    .map(|u| {
                        let m = partition.members(u);
                        let mut c = [0.0; 3];
                        for &i in m {
                            let p = cloud.position(i as usize);
                            for a in 0..3 {
                                c[a] += p[a];
                            }
                        }
                        c.map(|v| v / m.len() as f64)
                    })
                    .collect();
                let lists = crate::overseg::knn_lists(&centroids, centroid_neighbors.min(centroids.len().saturating_sub(1)));
                let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); centroids.len()];
                for (u, l) in lists.iter().enumerate() {
                    for &v in l {
                        adj[u].insert(v);
                        adj[v as usize].insert(u as u32);
                    }
                }
                ctx.adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
            }
        }
        Ok(ctx)
    }

    fn feature(&self, u: usize) -> &[f64] {
        &self.features[u * self.dim..(u + 1) * self.dim]
    }

    fn near_points(&self, i: usize) -> &[u32] {
        &self.near[self.near_offsets[i]..self.near_offsets[i + 1]]
    }
}

/// Point-count-weighted mean of the features of the superpoints the seed
/// intersects, weighted by intersection size.
pub fn seed_feature(points: &[u32], partition: &SuperpointPartition, features: &FeatureTable) -> Vec<f64> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in points {
        *counts.entry(partition.label(p as usize)).or_default() += 1;
    }
    let mut sum = vec![0.0; features.dim()];
    let total: usize = counts.values().sum();
    for (&u, &c) in &counts {
        for (s, &f) in sum.iter_mut().zip(features.row(u as usize)) {
            *s += c as f64 * f64::from(f);
        }
    }
    sum.iter_mut().for_each(|s| *s /= total as f64);
    sum
}

fn cosine(a: &[f64], b: &[f64], norm_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (na * norm_b)
}

/// `max(0, cos(seed_feature, f_u)) * IoU(seed, s_u)` with literal point-set IoU.
pub fn affinity(seed: &[u32], seed_feature: &[f64], candidate: usize, partition: &SuperpointPartition, features: &FeatureTable) -> f64 {
    let f: Vec<f64> = features.row(candidate).iter().map(|&v| f64::from(v)).collect();
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let members = partition.members(candidate);
    let inter = crate::refine::merge::intersection_len(seed, members);
    let iou = inter as f64 / (seed.len() + members.len() - inter) as f64;
    cosine(seed_feature, &f, norm).max(0.0) * iou
}

struct GrowState<'c, 'a> {
    ctx: &'c GrowContext<'a>,
    in_seed: Vec<bool>,
    touched: Vec<bool>,
    inside: BTreeMap<u32, usize>,
    contact: BTreeMap<u32, usize>,
    absorbed: BTreeSet<u32>,
    size: usize,
    feature_sum: Vec<f64>,
}

impl<'c, 'a> GrowState<'c, 'a> {
    fn add_point(&mut self, p: u32, contact: bool) {
        let i = p as usize;
        if self.in_seed[i] {
            return;
        }
        self.in_seed[i] = true;
        self.size += 1;
        let u = self.ctx.partition.label(i);
        *self.inside.entry(u).or_default() += 1;
        let f = &self.ctx.features[u as usize * self.ctx.dim..(u as usize + 1) * self.ctx.dim];
        self.feature_sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
        if contact {
            self.touch(p);
            for k in 0..self.ctx.near_points(i).len() {
                let q = self.ctx.near_points(i)[k];
                self.touch(q);
            }
        }
    }

    fn touch(&mut self, q: u32) {
        if !self.touched[q as usize] {
            self.touched[q as usize] = true;
            *self.contact.entry(self.ctx.partition.label(q as usize)).or_default() += 1;
        }
    }
}

/// Grows one seed until no candidate reaches the affinity floor. Candidates
/// are never superpoints in `blocked`. Ties go to the lowest superpoint id.
pub fn grow_seed(seed: &PointSetInstance, ctx: &GrowContext<'_>, cfg: &GrowConfig, blocked: &HashSet<u32>) -> Result<PointSetInstance> {
    let n = ctx.partition.point_count();
    seed.validate_against(n)?;
    let contact_mode = matches!(cfg.overlap, OverlapMode::Contact { .. });
    let mut st = GrowState {
        ctx,
        in_seed: vec![false; n],
        touched: vec![false; if contact_mode { n } else { 0 }],
        inside: BTreeMap::new(),
        contact: BTreeMap::new(),
        absorbed: BTreeSet::new(),
        size: 0,
        feature_sum: vec![0.0; ctx.dim],
    };
    for &p in seed.points() {
        st.add_point(p, contact_mode);
    }
    let mut iterations = 0;
    loop {
        if cfg.max_iterations.is_some_and(|m| iterations >= m) {
            break;
        }
        let candidates: BTreeSet<u32> = match cfg.overlap {
            OverlapMode::Contact { .. } => st.contact.keys().copied().collect(),
            OverlapMode::PointIou { .. } => st
                .inside
                .keys()
                .copied()
                .chain(st.absorbed.iter().flat_map(|&u| ctx.adjacency[u as usize].iter().copied()))
                .collect(),
        };
        let mut best: Option<(f64, u32)> = None;
        for u in candidates {
            let size = ctx.partition.size(u as usize);
            let inside = st.inside.get(&u).copied().unwrap_or(0);
            if inside == size || blocked.contains(&u) {
                continue;
            }
            let overlap = match cfg.overlap {
                OverlapMode::Contact { .. } => st.contact.get(&u).copied().unwrap_or(0) as f64 / size as f64,
                OverlapMode::PointIou { .. } => inside as f64 / (st.size + size - inside) as f64,
            };
            let a = cosine(&st.feature_sum, ctx.feature(u as usize), ctx.norms[u as usize]).max(0.0) * overlap;
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, u));
            }
        }
        match best {
            Some((a, u)) if a >= cfg.affinity_floor => {
                for &p in ctx.partition.members(u as usize) {
                    st.add_point(p, contact_mode);
                }
                st.absorbed.insert(u);
                iterations += 1;
            }
            _ => break,
        }
    }
    let points: Vec<u32> = (0..n as u32).filter(|&i| st.in_seed[i as usize]).collect();
    PointSetInstance::new(
        points,
        Provenance {
            stage: Stage::Grown,
            sources: seed.provenance.sources.clone(),
        },
        seed.confidence,
    )
}

/// Grows every seed. Without exclusive claims seeds grow independently in
/// parallel; with them, seeds of one view grow in order and each skips the
/// superpoints earlier seeds of that view absorbed.
pub fn grow_seeds(seeds: &[PointSetInstance], ctx: &GrowContext<'_>, cfg: &GrowConfig) -> Result<Vec<PointSetInstance>> {
    cfg.validate()?;
    if !cfg.exclusive_claims {
        let empty = HashSet::new();
        return seeds.par_iter().map(|s| grow_seed(s, ctx, cfg, &empty)).collect();
    }
    let mut by_view: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (k, s) in seeds.iter().enumerate() {
        let view = s.provenance.sources.first().map(|m| m.view.clone()).unwrap_or_default();
        by_view.entry(view).or_default().push(k);
    }
    let groups: Vec<Vec<usize>> = by_view.into_values().collect();
    let grown: Vec<Vec<(usize, PointSetInstance)>> = groups
        .par_iter()
        .map(|idx| {
            let mut claimed = HashSet::new();
            let mut out = Vec::with_capacity(idx.len());
            for &k in idx {
                let g = grow_seed(&seeds[k], ctx, cfg, &claimed)?;
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for &p in g.points() {
                    *counts.entry(ctx.partition.label(p as usize)).or_default() += 1;
                }
                claimed.extend(
                    counts
                        .into_iter()
                        .filter(|&(u, c)| c == ctx.partition.size(u as usize))
                        .map(|(u, _)| u),
                );
                out.push((k, g));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut flat: Vec<(usize, PointSetInstance)> = grown.into_iter().flatten().collect();
    flat.sort_by_key(|(k, _)| *k);
    Ok(flat.into_iter().map(|(_, g)| g).collect())
}
