//! Open-vocabulary labels for proposals: dense per-view pixel features are
//! averaged onto the points that see them, then onto proposals, and ranked
//! by cosine similarity against a query embedding.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::{read_raster_file, write_raster_file, PIXEL_FEATURE_MAGIC};
use crate::projection::ViewMapping;
use crate::scene::PointSetInstance;
use crate::synth::pixel_owners;

/// One view's dense feature map, pixel-major: `data[(v * W + u) * D + d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub view_id: String,
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(view_id: impl Into<String>, width: u32, height: u32, dim: usize, data: Vec<f32>) -> Result<Self> {
        let view_id = view_id.into();
        if dim == 0 {
            return Err(Error::Validation(format!("feature map of {view_id} has zero channels")));
        }
        if data.len() != width as usize * height as usize * dim {
            return Err(Error::Validation(format!(
                "feature map of {view_id} holds {} values, expected {width}x{height}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("feature map of {view_id} has non-finite values")));
        }
        Ok(Self {
            view_id,
            width,
            height,
            dim,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let p = (v as usize * self.width as usize + u as usize) * self.dim;
        &self.data[p..p + self.dim]
    }
}

pub fn write_pixel_features(path: &Path, map: &FeatureMap) -> Result<()> {
    write_raster_file(
        path,
        PIXEL_FEATURE_MAGIC,
        &[map.width, map.height, map.dim as u32],
        &map.data,
    )
}

pub fn read_pixel_features(path: &Path, view_id: &str) -> Result<FeatureMap> {
    let (dims, data) = read_raster_file(path, PIXEL_FEATURE_MAGIC, 3)?;
    FeatureMap::new(view_id, dims[0], dims[1], dims[2] as usize, data).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Feature maps for a set of views, all with the same channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureSource {
    maps: Vec<FeatureMap>,
}

impl PixelFeatureSource {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::Validation("pixel feature source has no views".into()));
        };
        let dim = first.dim;
        let mut ids = std::collections::BTreeSet::new();
        for m in &maps {
            if m.dim != dim {
                return Err(Error::Validation(format!(
                    "feature map of {} has {} channels, expected {dim}",
                    m.view_id, m.dim
                )));
            }
            if !ids.insert(m.view_id.as_str()) {
                return Err(Error::Validation(format!("view {} has two feature maps", m.view_id)));
            }
        }
        Ok(Self { maps })
    }

    /// Reads `<dir>/<view_id>.pf3d` for each listed view.
    pub fn load(dir: &Path, view_ids: &[&str]) -> Result<Self> {
        let maps = view_ids
            .iter()
            .map(|id| read_pixel_features(&dir.join(format!("{id}.pf3d")), id))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for m in &self.maps {
            write_pixel_features(&dir.join(format!("{}.pf3d", m.view_id)), m)?;
        }
        Ok(())
    }

    /// Pixels owned by object `k` carry `prototypes[k]` plus isotropic
    /// Gaussian noise of scale `sigma`; background and empty pixels are zero.
    /// `mappings` must carry depth buffers.
    pub fn synthetic(
        mappings: &[ViewMapping],
        labels: &[i32],
        prototypes: &[Vec<f32>],
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = prototypes.first().map_or(0, Vec::len);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("feature noise must be finite and non-negative, got {sigma}")));
        }
        let maps = mappings
            .par_iter()
            .enumerate()
            .map(|(vi, m)| {
                if m.depth.is_none() {
                    return Err(Error::Validation(format!("mapping of {} has no depth buffer", m.view_id)));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7066_3364);
                rng.set_stream(vi as u64);
                let mut data = vec![0f32; m.width as usize * m.height as usize * dim];
                for (p, owner) in pixel_owners(m, labels).into_iter().enumerate() {
                    let Some(k) = owner.filter(|&k| k >= 0) else { continue };
                    for (d, &c) in prototypes[k as usize].iter().enumerate() {
                        let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                        data[p * dim + d] = (f64::from(c) + noise) as f32;
                    }
                }
                FeatureMap::new(m.view_id.clone(), m.width, m.height, dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }
}

/// Per-point features. A point is flagged when its feature is the zero
/// vector: seen by no view, or its views cancel out.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub dim: usize,
    pub data: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl PointFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Mean of the pixel features over the views where each point is visible.
/// Views are visited in view-id order, so the result does not depend on the
/// order of `mappings` or of the source.
pub fn aggregate_point_features(mappings: &[ViewMapping], source: &PixelFeatureSource) -> Result<PointFeatures> {
    let n = mappings.first().map_or(0, |m| m.visible.len());
    let dim = source.dim();
    let mut pairs = Vec::with_capacity(source.maps().len());
    for map in source.maps() {
        let mapping = mappings
            .iter()
            .find(|m| m.view_id == map.view_id)
            .ok_or_else(|| Error::Validation(format!("no mapping for feature view {}", map.view_id)))?;
        if (mapping.width, mapping.height) != (map.width, map.height) {
            return Err(Error::Validation(format!(
                "feature map of {} is {}x{} but the view is {}x{}",
                map.view_id, map.width, map.height, mapping.width, mapping.height
            )));
        }
        if mapping.visible.len() != n {
            return Err(Error::Validation("mappings disagree on the point count".into()));
        }
        pairs.push((mapping, map));
    }
    pairs.sort_by(|a, b| a.1.view_id.cmp(&b.1.view_id));

    let mut sum = vec![0f64; n * dim];
    let mut count = vec![0u32; n];
    for (mapping, map) in &pairs {
        for &i in &mapping.visible_points {
            let i = i as usize;
            let [u, v] = mapping.pixel[i];
            for (s, &f) in sum[i * dim..(i + 1) * dim].iter_mut().zip(map.pixel(u, v)) {
                *s += f64::from(f);
            }
            count[i] += 1;
        }
    }
    let mut flagged = vec![false; n];
    for i in 0..n {
        let row = &mut sum[i * dim..(i + 1) * dim];
        if count[i] > 0 {
            let c = f64::from(count[i]);
            row.iter_mut().for_each(|x| *x /= c);
        }
        flagged[i] = row.iter().all(|&x| x == 0.0);
    }
    Ok(PointFeatures {
        dim,
        data: sum,
        flagged,
    })
}

/// Mean feature of a proposal's unflagged points.
pub fn proposal_feature(proposal: &PointSetInstance, features: &PointFeatures) -> Result<Vec<f64>> {
    let mut mean = vec![0f64; features.dim];
    let mut used = 0usize;
    for &i in proposal.points() {
        let i = i as usize;
        if i >= features.len() {
            return Err(Error::Validation(format!("proposal point {i} is outside the feature table")));
        }
        if features.flagged[i] {
            continue;
        }
        for (m, &f) in mean.iter_mut().zip(features.row(i)) {
            *m += f;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Undefined(format!(
            "no point of the {}-point proposal has a feature",
            proposal.len()
        )));
    }
    mean.iter_mut().for_each(|m| *m /= used as f64);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextQuery {
    pub query: String,
    pub embedding: Vec<f64>,
}

impl TextQuery {
    pub fn validate(&self) -> Result<()> {
        if self.embedding.is_empty() || self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "query `{}` needs a non-empty finite embedding",
                self.query
            )));
        }
        if norm(&self.embedding) == 0.0 {
            return Err(Error::Validation(format!("query `{}` has a zero embedding", self.query)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let q: TextQuery = crate::io::read_json(path)?;
        q.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(q)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `(proposal index, score)` by descending cosine, ties by index.
pub fn rank_by_query(proposal_features: &[Vec<f64>], query: &TextQuery) -> Result<Vec<(usize, f64)>> {
    query.validate()?;
    if let Some(f) = proposal_features.iter().find(|f| f.len() != query.embedding.len()) {
        return Err(Error::Validation(format!(
            "query has {} dimensions but proposal features have {}",
            query.embedding.len(),
            f.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = proposal_features
        .iter()
        .enumerate()
        .map(|(k, f)| (k, cosine(f, &query.embedding)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Provenance, Stage};
    use proptest::prelude::*;

    fn mapping(id: &str, visible: Vec<bool>, pixel: Vec<[u32; 2]>, w: u32, h: u32) -> ViewMapping {
        let visible_points = (0..visible.len() as u32).filter(|&i| visible[i as usize]).collect();
        let n = visible.len();
        ViewMapping {
            view_id: id.into(),
            width: w,
            height: h,
            depth: None,
            visible,
            pixel,
            z: vec![1.0; n],
            visible_points,
        }
    }

    fn instance(points: Vec<u32>) -> PointSetInstance {
        PointSetInstance::new(points, Provenance::single(Stage::Merged, "v", 0), 1.0).unwrap()
    }

    #[test]
    fn single_view_copies_pixel_feature() {
        let map = FeatureMap::new("a", 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = mapping("a", vec![true, false], vec![[1, 0], [0, 0]], 2, 1);
        let pf = aggregate_point_features(&[m], &PixelFeatureSource::new(vec![map]).unwrap()).unwrap();
        assert_eq!(pf.row(0), &[3.0, 4.0]);
        assert_eq!(pf.flagged, vec![false, true]);
        assert_eq!(pf.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn opposite_features_cancel_and_flag() {
        let a = FeatureMap::new("a", 1, 1, 2, vec![0.5, -1.0]).unwrap();
        let b = FeatureMap::new("b", 1, 1, 2, vec![-0.5, 1.0]).unwrap();
        let ms = [
            mapping("a", vec![true], vec![[0, 0]], 1, 1),
            mapping("b", vec![true], vec![[0, 0]], 1, 1),
        ];
        let pf = aggregate_point_features(&ms, &PixelFeatureSource::new(vec![a, b]).unwrap()).unwrap();
        assert_eq!(pf.row(0), &[0.0, 0.0]);
        assert!(pf.flagged[0]);
        assert!(matches!(proposal_feature(&instance(vec![0]), &pf), Err(Error::Undefined(_))));
    }

    #[test]
    fn missing_mapping_is_rejected() {
        let a = FeatureMap::new("a", 1, 1, 1, vec![1.0]).unwrap();
        let ms = [mapping("b", vec![true], vec![[0, 0]], 1, 1)];
        assert!(aggregate_point_features(&ms, &PixelFeatureSource::new(vec![a]).unwrap()).is_err());
    }

    #[test]
    fn proposal_mean_skips_flagged_points() {
        let pf = PointFeatures {
            dim: 2,
            data: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            flagged: vec![false, true, false],
        };
        assert_eq!(proposal_feature(&instance(vec![0, 1, 2]), &pf).unwrap(), vec![0.5, 0.5]);
        assert_eq!(proposal_feature(&instance(vec![0]), &pf).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn ranking_matches_and_orthogonal_ties() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 3.0]];
        let q = TextQuery {
            query: "b".into(),
            embedding: vec![0.0, 2.0],
        };
        let r = rank_by_query(&feats, &q).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(r[0].1, 1.0);
        let q = TextQuery {
            query: "z".into(),
            embedding: vec![0.0, 0.0, 1.0],
        };
        assert!(rank_by_query(&feats, &q).is_err());
        let flat = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let r = rank_by_query(&flat, &q).unwrap();
        assert_eq!(r, vec![(0, 0.0), (1, 0.0)]);
    }

    #[test]
    fn zero_query_is_invalid() {
        let q = TextQuery {
            query: "x".into(),
            embedding: vec![0.0, 0.0],
        };
        assert!(matches!(q.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn pixel_feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = FeatureMap::new("v", 3, 2, 2, (0..12).map(|x| x as f32 * 0.5).collect()).unwrap();
        let src = PixelFeatureSource::new(vec![map.clone()]).unwrap();
        src.save(dir.path()).unwrap();
        assert_eq!(PixelFeatureSource::load(dir.path(), &["v"]).unwrap(), src);
        let bytes = std::fs::read(dir.path().join("v.pf3d")).unwrap();
        assert_eq!(&bytes[..4], b"PF3D");
    }

    fn fixture() -> impl Strategy<Value = (Vec<FeatureMap>, Vec<ViewMapping>)> {
        (1usize..5, 1usize..4, 1usize..30).prop_flat_map(|(views, dim, n)| {
            let (w, h) = (4u32, 3u32);
            let maps = proptest::collection::vec(
                proptest::collection::vec(-2.0f32..2.0, (w * h) as usize * dim),
                views,
            );
            let vis = proptest::collection::vec(
                proptest::collection::vec((any::<bool>(), 0..w, 0..h), n),
                views,
            );
            (maps, vis).prop_map(move |(maps, vis)| {
                let maps: Vec<FeatureMap> = maps
                    .into_iter()
                    .enumerate()
                    .map(|(t, d)| FeatureMap::new(format!("v{t}"), w, h, dim, d).unwrap())
                    .collect();
                let mappings = vis
                    .into_iter()
                    .enumerate()
                    .map(|(t, pts)| {
                        let visible = pts.iter().map(|p| p.0).collect();
                        let pixel = pts.iter().map(|p| [p.1, p.2]).collect();
                        mapping(&format!("v{t}"), visible, pixel, w, h)
                    })
                    .collect();
                (maps, mappings)
            })
        })
    }

    proptest! {
        #[test]
        fn aggregation_matches_loop_oracle((maps, mappings) in fixture()) {
            let src = PixelFeatureSource::new(maps.clone()).unwrap();
            let pf = aggregate_point_features(&mappings, &src).unwrap();
            let n = mappings[0].visible.len();
            let dim = maps[0].dim;
            for i in 0..n {
                let mut acc = vec![0.0f64; dim];
                let mut c = 0;
                for (m, f) in mappings.iter().zip(&maps) {
                    if m.visible[i] {
                        c += 1;
                        let [u, v] = m.pixel[i];
                        for d in 0..dim {
                            acc[d] += f64::from(f.data[((v * f.width + u) as usize) * dim + d]);
                        }
                    }
                }
                for d in 0..dim {
                    let want = if c == 0 { 0.0 } else { acc[d] / c as f64 };
                    prop_assert!((pf.row(i)[d] - want).abs() <= 1e-12);
                }
                if c == 0 {
                    prop_assert!(pf.flagged[i]);
                }
            }
            let members: Vec<u32> = (0..n as u32).collect();
            if let Ok(mean) = proposal_feature(&instance(members), &pf) {
                let used: Vec<usize> = (0..n).filter(|&i| !pf.flagged[i]).collect();
                for d in 0..dim {
                    let want = used.iter().map(|&i| pf.row(i)[d]).sum::<f64>() / used.len() as f64;
                    prop_assert!((mean[d] - want).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn aggregation_commutes_with_view_permutation((maps, mappings) in fixture(), rot in 0usize..5) {
            let pf = aggregate_point_features(&mappings, &PixelFeatureSource::new(maps.clone()).unwrap()).unwrap();
            let mut pm = maps.clone();
            let mut mm = mappings.clone();
            let r = rot % pm.len();
            pm.rotate_left(r);
            mm.reverse();
            let pf2 = aggregate_point_features(&mm, &PixelFeatureSource::new(pm).unwrap()).unwrap();
            prop_assert_eq!(pf, pf2);
        }

        #[test]
        fn positive_scaling_keeps_ranking((maps, mappings) in fixture(), scale in 0.1f32..10.0, q in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let dim = maps[0].dim;
            let q = TextQuery { query: "q".into(), embedding: q[..dim].to_vec() };
            prop_assume!(q.validate().is_ok());
            let n = mappings[0].visible.len() as u32;
            let props: Vec<PointSetInstance> = (0..n).map(|i| instance(vec![i])).collect();
            let rank = |maps: Vec<FeatureMap>| {
                let pf = aggregate_point_features(&mappings, &PixelFeatureSource::new(maps).unwrap()).unwrap();
                let feats: Vec<Vec<f64>> = props.iter().map(|p| proposal_feature(p, &pf).unwrap_or_else(|_| vec![0.0; dim])).collect();
                rank_by_query(&feats, &q).unwrap()
            };
            let scaled: Vec<FeatureMap> = maps.iter().map(|m| {
                FeatureMap::new(m.view_id.clone(), m.width, m.height, m.dim, m.data.iter().map(|x| x * scale).collect()).unwrap()
            }).collect();
            let a = rank(maps);
            let b = rank(scaled);
            for ((ia, sa), (ib, sb)) in a.iter().zip(&b) {
                prop_assert!((sa - sb).abs() <= 1e-6);
                if ia != ib {
                    let (x, y) = (a.iter().find(|r| r.0 == *ib).unwrap().1, b.iter().find(|r| r.0 == *ia).unwrap().1);
                    prop_assert!((x - y).abs() <= 1e-6, "order changed beyond a near tie");
                }
            }
        }
    }
}
