//! HDBSCAN over 3D points: core distances, an exact mutual-reachability MST,
//! and excess-of-mass cluster selection on the condensed tree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{dist2, KdTree};

pub const NOISE: i32 = -1;

/// Inverse distances are capped so coincident points do not produce infinite
/// densities (and `inf - inf` in stability sums).
const MAX_LAMBDA: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub min_cluster_size: usize,
    /// Defaults to `min_cluster_size` when `None`.
    pub min_samples: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

impl ClusterConfig {
    pub fn indoor() -> Self {
        Self {
            min_cluster_size: 30,
            min_samples: None,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            min_cluster_size: 150,
            min_samples: None,
        }
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::Config(format!(
                "min_cluster_size must be at least 2, got {}",
                self.min_cluster_size
            )));
        }
        if self.min_samples() == 0 {
            return Err(Error::Config("min_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Distance to the `k`-th nearest other point. With `k` or fewer other
/// points every core distance is `+inf`.
pub fn core_distances(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; points.len()];
    }
    if points.len() < k + 1 {
        return vec![f64::INFINITY; points.len()];
    }
    let tree = KdTree::new(points);
    points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| tree.knn(p, k, Some(i))[k - 1].0.sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

/// Prim's algorithm over the implicit complete graph with weights
/// `max(core_i, core_j, d(i, j))`. Exact, `O(n^2)` time and `O(n)` memory.
/// Ties pick the lowest vertex, then the lowest attachment point.
pub fn mutual_reachability_mst(points: &[[f64; 3]], core: &[f64]) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![u32::MAX; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        let (pc, cc) = (points[current], core[current]);
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let w = dist2(pc, points[v]).sqrt().max(cc).max(core[v]);
            if w < best[v] || (w == best[v] && (current as u32) < from[v]) {
                best[v] = w;
                from[v] = current as u32;
            }
            if best[v] < next_w || next == usize::MAX {
                next_w = best[v];
                next = v;
            }
        }
        in_tree[next] = true;
        let a = from[next];
        edges.push(MstEdge {
            i: a.min(next as u32),
            j: a.max(next as u32),
            weight: next_w,
        });
        current = next;
    }
    edges
}

#[derive(Debug, Clone, Copy)]
struct CondensedEntry {
    parent: usize,
    /// Point index if `size == 1 && !is_cluster`, else a cluster id.
    child: usize,
    is_cluster: bool,
    lambda: f64,
    size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        (1.0 / distance).min(MAX_LAMBDA)
    } else {
        MAX_LAMBDA
    }
}

/// Labels from an MST over `n` points. Clusters are numbered in order of
/// their lowest member index; noise is `-1`.
pub fn extract_clusters(mst: &[MstEdge], n: usize, min_cluster_size: usize) -> Vec<i32> {
    if n < min_cluster_size || n == 0 {
        return vec![NOISE; n];
    }
    if n == 1 {
        return vec![0];
    }
    // Single-linkage dendrogram: nodes n.. are merges in ascending weight.
    let mut sorted = mst.to_vec();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let total = 2 * n - 1;
    let mut parent_uf: Vec<usize> = (0..total).collect();
    let mut children = vec![(0usize, 0usize); total];
    let mut dist = vec![0.0; total];
    let mut size = vec![1usize; total];
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut next = n;
    for e in &sorted {
        let a = find(&mut parent_uf, e.i as usize);
        let b = find(&mut parent_uf, e.j as usize);
        debug_assert_ne!(a, b, "input is not a tree");
        children[next] = (a.min(b), a.max(b));
        dist[next] = e.weight;
        size[next] = size[a] + size[b];
        parent_uf[a] = next;
        parent_uf[b] = next;
        next += 1;
    }
    assert_eq!(next, total, "MST must have n - 1 edges");
    let root = total - 1;

    let leaves = |node: usize, out: &mut Vec<usize>| {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(children[x].1);
                stack.push(children[x].0);
            }
        }
    };

    // Condense top-down.
    let mut entries: Vec<CondensedEntry> = Vec::new();
    let mut label_of = vec![usize::MAX; total];
    label_of[root] = 0;
    let mut cluster_count = 1usize;
    let mut stack = vec![root];
    let mut fallen = Vec::new();
    while let Some(node) = stack.pop() {
        if node < n {
            continue;
        }
        let c = label_of[node];
        let lambda = lambda_of(dist[node]);
        let (l, r) = children[node];
        let (big_l, big_r) = (size[l] >= min_cluster_size, size[r] >= min_cluster_size);
        match (big_l, big_r) {
            (true, true) => {
                for child in [l, r] {
                    label_of[child] = cluster_count;
                    entries.push(CondensedEntry {
                        parent: c,
                        child: cluster_count,
                        is_cluster: true,
                        lambda,
                        size: size[child],
                    });
                    cluster_count += 1;
                    stack.push(child);
                }
            }
            (true, false) | (false, true) => {
                let (keep, drop) = if big_l { (l, r) } else { (r, l) };
                label_of[keep] = c;
                stack.push(keep);
                fallen.clear();
                leaves(drop, &mut fallen);
                for &p in &fallen {
                    entries.push(CondensedEntry {
                        parent: c,
                        child: p,
                        is_cluster: false,
                        lambda,
                        size: 1,
                    });
                }
            }
            (false, false) => {
                fallen.clear();
                leaves(node, &mut fallen);
                for &p in &fallen {
                    entries.push(CondensedEntry {
                        parent: c,
                        child: p,
                        is_cluster: false,
                        lambda,
                        size: 1,
                    });
                }
            }
        }
    }

    // Stability and excess-of-mass selection; the root may be selected.
    let mut birth = vec![0.0; cluster_count];
    let mut cluster_parent = vec![usize::MAX; cluster_count];
    let mut child_clusters: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    for e in entries.iter().filter(|e| e.is_cluster) {
        birth[e.child] = e.lambda;
        cluster_parent[e.child] = e.parent;
        child_clusters[e.parent].push(e.child);
    }
    let mut stability = vec![0.0; cluster_count];
    for e in &entries {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }
    let mut selected = vec![false; cluster_count];
    // Children always carry larger ids than their parent.
    for c in (0..cluster_count).rev() {
        let subtree: f64 = child_clusters[c].iter().map(|&k| stability[k]).sum();
        if child_clusters[c].is_empty() || stability[c] >= subtree {
            selected[c] = true;
            let mut stack = child_clusters[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(child_clusters[k].iter().copied());
            }
        } else {
            stability[c] = subtree;
        }
    }

    let mut point_parent = vec![usize::MAX; n];
    for e in entries.iter().filter(|e| !e.is_cluster) {
        point_parent[e.child] = e.parent;
    }
    let mut raw = vec![NOISE; n];
    for p in 0..n {
        let mut c = point_parent[p];
        while c != usize::MAX {
            if selected[c] {
                raw[p] = c as i32;
                break;
            }
            c = cluster_parent[c];
        }
    }
    renumber(&raw)
}

/// Dense cluster ids in order of first appearance; noise stays `-1`.
pub fn renumber(raw: &[i32]) -> Vec<i32> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|&l| {
            if l < 0 {
                NOISE
            } else {
                let next = map.len() as i32;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

pub fn hdbscan(points: &[[f64; 3]], cfg: &ClusterConfig) -> Result<Vec<i32>> {
    cfg.validate()?;
    let k = cfg.min_samples();
    if points.len() < k + 1 || points.len() < cfg.min_cluster_size {
        return Ok(vec![NOISE; points.len()]);
    }
    let core = core_distances(points, k);
    let mst = mutual_reachability_mst(points, &core);
    Ok(extract_clusters(&mst, points.len(), cfg.min_cluster_size))
}

pub fn cluster_count(labels: &[i32]) -> usize {
    labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
}
