//! Internal over-segmentation for scenes shipped without a superpoint file:
//! Felzenszwalb–Huttenlocher merging over a symmetric k-NN graph.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{PointCloud, SuperpointPartition};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OversegConfig {
    pub k_neighbors: usize,
    /// Scale `k` of the merge predicate `w <= Int(C) + k / |C|` (meters).
    pub merge_threshold: f64,
    pub min_segment_size: usize,
    /// Segments never grow past this size during the main pass; `None` = no cap.
    pub max_segment_size: Option<usize>,
    /// Adds `normal_weight * (1 - |n_i . n_j|)` to each edge weight so that
    /// creases between surfaces become boundaries. 0 keeps pure distances.
    pub normal_weight: f64,
}

impl Default for OversegConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            merge_threshold: 0.05,
            min_segment_size: 20,
            max_segment_size: None,
            normal_weight: 0.0,
        }
    }
}

impl OversegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 || self.min_segment_size == 0 || !(self.merge_threshold > 0.0) {
            return Err(Error::Config("over-segmentation parameters must be positive".into()));
        }
        if self.max_segment_size.is_some_and(|m| m < self.min_segment_size) {
            return Err(Error::Config("max_segment_size is below min_segment_size".into()));
        }
        if !(self.normal_weight >= 0.0) {
            return Err(Error::Config("normal_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

/// Neighbour lists (self excluded, nearest first) for every point.
pub fn knn_lists(positions: &[[f64; 3]], k: usize) -> Vec<Vec<u32>> {
    let tree = KdTree::new(positions);
    positions
        .par_iter()
        .enumerate()
        .map(|(i, &p)| tree.knn(p, k, Some(i)).into_iter().map(|(_, j)| j).collect())
        .collect()
}

/// Symmetric k-NN graph: an edge `{i, j}` exists if either point is among the
/// other's `k` nearest. Each edge appears once with `i < j`, sorted by
/// `(i, j)`; weights are Euclidean distances.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Vec<Edge> {
    let k = k.min(cloud.len().saturating_sub(1));
    let lists = knn_lists(cloud.positions(), k);
    edges_from_lists(cloud.positions(), &lists)
}

fn edges_from_lists(positions: &[[f64; 3]], lists: &[Vec<u32>]) -> Vec<Edge> {
    let mut pairs: Vec<(u32, u32)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            let i = i as u32;
            l.iter().map(move |&j| (i.min(j), i.max(j)))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            weight: crate::spatial::dist2(positions[i as usize], positions[j as usize]).sqrt(),
        })
        .collect()
}

/// Unit surface normals from the smallest principal axis of each point's
/// neighbourhood. The sign is arbitrary.
pub fn estimate_normals(positions: &[[f64; 3]], lists: &[Vec<u32>]) -> Vec<[f64; 3]> {
    lists
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut mean = [0.0; 3];
            let n = (l.len() + 1) as f64;
            for &j in l.iter().chain(std::iter::once(&(i as u32))) {
                let p = positions[j as usize];
                for a in 0..3 {
                    mean[a] += p[a] / n;
                }
            }
            let mut cov = Matrix3::zeros();
            for &j in l.iter().chain(std::iter::once(&(i as u32))) {
                let p = positions[j as usize];
                let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut best = 0;
            for a in 1..3 {
                if eig.eigenvalues[a] < eig.eigenvalues[best] {
                    best = a;
                }
            }
            let v = eig.eigenvectors.column(best);
            [v[0], v[1], v[2]]
        })
        .collect()
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) {
        // Lower root id wins so the structure is order-deterministic.
        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        self.parent[drop as usize] = keep;
        self.size[keep as usize] += self.size[drop as usize];
        self.internal[keep as usize] = self.internal[keep as usize]
            .max(self.internal[drop as usize])
            .max(weight);
    }
}

/// Felzenszwalb–Huttenlocher segmentation of `n` points. Edges are processed
/// in `(weight, i, j)` order; afterwards segments smaller than
/// `min_segment_size` are merged across their lowest-weight edges.
pub fn segment_graph(edges: &[Edge], n: usize, cfg: &OversegConfig) -> Result<SuperpointPartition> {
    cfg.validate()?;
    let mut sorted = edges.to_vec();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let mut ds = DisjointSet::new(n);
    let k = cfg.merge_threshold;
    let cap = cfg.max_segment_size.unwrap_or(usize::MAX);
    for e in &sorted {
        let (a, b) = (ds.find(e.i), ds.find(e.j));
        if a == b {
            continue;
        }
        let (sa, sb) = (ds.size[a as usize] as usize, ds.size[b as usize] as usize);
        if sa + sb > cap {
            continue;
        }
        let ta = ds.internal[a as usize] + k / sa as f64;
        let tb = ds.internal[b as usize] + k / sb as f64;
        if e.weight <= ta.min(tb) {
            ds.union(a, b, e.weight);
        }
    }
    for e in &sorted {
        let (a, b) = (ds.find(e.i), ds.find(e.j));
        if a != b
            && ((ds.size[a as usize] as usize) < cfg.min_segment_size
                || (ds.size[b as usize] as usize) < cfg.min_segment_size)
        {
            ds.union(a, b, e.weight);
        }
    }
    let labels: Vec<u32> = (0..n as u32).map(|i| ds.find(i)).collect();
    SuperpointPartition::from_arbitrary_labels(&labels)
}

/// Full over-segmentation of a cloud.
pub fn oversegment(cloud: &PointCloud, cfg: &OversegConfig) -> Result<SuperpointPartition> {
    cfg.validate()?;
    let k = cfg.k_neighbors.min(cloud.len().saturating_sub(1));
    let lists = knn_lists(cloud.positions(), k);
    let mut edges = edges_from_lists(cloud.positions(), &lists);
    if cfg.normal_weight > 0.0 {
        let normals = estimate_normals(cloud.positions(), &lists);
        for e in &mut edges {
            let (a, b) = (normals[e.i as usize], normals[e.j as usize]);
            let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs().min(1.0);
            e.weight += cfg.normal_weight * (1.0 - dot);
        }
    }
    segment_graph(&edges, cloud.len(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn grid(origin: [f64; 3], side: usize, spacing: f64) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for x in 0..side {
            for y in 0..side {
                for z in 0..3 {
                    out.push([
                        origin[0] + x as f64 * spacing,
                        origin[1] + y as f64 * spacing,
                        origin[2] + z as f64 * spacing,
                    ]);
                }
            }
        }
        out
    }

    #[test]
    fn three_points_make_a_triangle() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], None).unwrap();
        let e = build_knn_graph(&c, 2);
        let pairs: Vec<(u32, u32)> = e.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(e[1].weight, 2.0);
    }

    #[test]
    fn graph_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let c = PointCloud::new(pts.clone(), None).unwrap();
        let k = 6;
        let got: BTreeSet<(u32, u32)> = build_knn_graph(&c, k).iter().map(|e| (e.i, e.j)).collect();
        let mut expect = BTreeSet::new();
        for i in 0..pts.len() {
            let mut d: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| (crate::spatial::dist2(pts[i], pts[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in &d[..k] {
                expect.insert((i.min(j) as u32, i.max(j) as u32));
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn two_separated_clusters_give_two_segments() {
        let mut pts = grid([0.0; 3], 10, 0.01);
        pts.extend(grid([1.0, 0.0, 0.0], 10, 0.01));
        let c = PointCloud::new(pts, None).unwrap();
        let sp = oversegment(&c, &OversegConfig::default()).unwrap();
        assert_eq!(sp.count(), 2);
        assert_ne!(sp.label(0), sp.label(c.len() - 1));
    }

    #[test]
    fn uniform_cluster_is_one_segment() {
        let c = PointCloud::new(grid([0.0; 3], 15, 0.01), None).unwrap();
        assert_eq!(oversegment(&c, &OversegConfig::default()).unwrap().count(), 1);
    }

    #[test]
    fn size_floor_and_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..3000).map(|_| [rng.random(), rng.random(), rng.random::<f64>() * 0.1]).collect();
        let c = PointCloud::new(pts, None).unwrap();
        let cfg = OversegConfig {
            max_segment_size: Some(200),
            normal_weight: 0.1,
            ..Default::default()
        };
        let sp = oversegment(&c, &cfg).unwrap();
        assert!(sp.count() >= 3000 / 200);
        assert!((0..sp.count()).all(|u| sp.size(u) >= cfg.min_segment_size));
    }
}
