use rayon::prelude::*;

use crate::cluster::{hdbscan, ClusterConfig};
use crate::error::{Error, Result};
use crate::mask_filter::mask_footprint;
use crate::projection::ViewMapping;
use crate::scene::{view_support_confidence, MaskSet, PointCloud, PointSetInstance, Provenance, Stage};

/// Lifts each mask to the points visible in its view whose pixel it covers.
/// Output follows mask order; masks that lift to nothing are dropped.
pub fn lift_masks(masks: &MaskSet, mappings: &[ViewMapping]) -> Result<Vec<PointSetInstance>> {
    let view_count = mappings.len();
    let lifted: Vec<Option<PointSetInstance>> = masks
        .masks()
        .par_iter()
        .map(|mask| {
            let mapping = mappings
                .iter()
                .find(|m| m.view_id == mask.view_id())
                .ok_or_else(|| Error::Validation(format!("mask {} has no mapping for view {}", mask.mask_id(), mask.view_id())))?;
            let points = mask_footprint(mapping, mask);
            if points.is_empty() {
                tracing::debug!(mask = mask.mask_id(), view = mask.view_id(), "mask lifts to no visible point, dropped");
                return Ok(None);
            }
            PointSetInstance::new(
                points,
                Provenance::single(Stage::Lifted, mask.view_id(), mask.mask_id()),
                view_support_confidence(1, view_count),
            )
            .map(Some)
        })
        .collect::<Result<_>>()?;
    Ok(lifted.into_iter().flatten().collect())
}

/// Splits every lifted mask into spatially dense clusters; each cluster
/// becomes a seed with the mask's provenance. Noise points are discarded.
pub fn split_seeds(lifted: &[PointSetInstance], cloud: &PointCloud, cfg: &ClusterConfig) -> Result<Vec<PointSetInstance>> {
    cfg.validate()?;
    let per_mask: Vec<Vec<PointSetInstance>> = lifted
        .par_iter()
        .map(|inst| {
            let xyz = cloud.gather(inst.points());
            let labels = hdbscan(&xyz, cfg)?;
            let clusters = crate::cluster::cluster_count(&labels);
            if clusters == 0 {
                tracing::debug!(points = inst.len(), "lifted mask is all noise, dropped");
            }
            let mut groups = vec![Vec::new(); clusters];
            for (k, &l) in labels.iter().enumerate() {
                if l >= 0 {
                    groups[l as usize].push(inst.points()[k]);
                }
            }
            let provenance = Provenance {
                stage: Stage::Seed,
                sources: inst.provenance.sources.clone(),
            };
            groups
                .into_iter()
                .map(|g| PointSetInstance::new(g, provenance.clone(), inst.confidence))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_mask.into_iter().flatten().collect())
}

/// Relabels lifted masks as seeds without splitting (splitting disabled).
pub fn unsplit_seeds(lifted: &[PointSetInstance]) -> Vec<PointSetInstance> {
    lifted
        .iter()
        .map(|inst| {
            let mut s = inst.clone();
            s.provenance.stage = Stage::Seed;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Mask2D;

    fn mapping(n: usize, visible: &[usize], w: u32) -> ViewMapping {
        let mut vis = vec![false; n];
        for &i in visible {
            vis[i] = true;
        }
        ViewMapping {
            view_id: "v".into(),
            width: w,
            height: 1,
            depth: None,
            visible: vis,
            pixel: (0..n as u32).map(|i| [i % w, 0]).collect(),
            z: vec![1.0; n],
            visible_points: visible.iter().map(|&i| i as u32).collect(),
        }
    }

    #[test]
    fn full_mask_lifts_whole_cloud_and_occluded_mask_is_dropped() {
        let m = mapping(6, &[0, 1, 2, 3, 4, 5], 6);
        let masks = MaskSet::new(vec![Mask2D::from_pixel_indices("v", 3, 6, 1, 0..6).unwrap()]).unwrap();
        let lifted = lift_masks(&masks, &[m]).unwrap();
        assert_eq!(lifted[0].points(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(lifted[0].provenance.stage, Stage::Lifted);

        let m = mapping(6, &[0, 1], 6);
        let masks = MaskSet::new(vec![Mask2D::from_pixel_indices("v", 3, 6, 1, 3..6).unwrap()]).unwrap();
        assert!(lift_masks(&masks, &[m]).unwrap().is_empty());
    }

    #[test]
    fn small_lift_gives_no_seed() {
        let cloud = PointCloud::new((0..10).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect(), None).unwrap();
        let inst = PointSetInstance::new((0..10).collect(), Provenance::single(Stage::Lifted, "v", 0), 1.0).unwrap();
        assert!(split_seeds(&[inst], &cloud, &ClusterConfig::default()).unwrap().is_empty());
    }
}
