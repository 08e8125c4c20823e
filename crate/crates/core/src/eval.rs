//! Class-agnostic instance metrics: greedy confidence-ordered matching with
//! all-point interpolated average precision.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::create;
use crate::scene::{Mask2D, MaskSet, ProposalSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Thresholds averaged into mAP.
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|k| f64::from(50 + 5 * k) / 100.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("no IoU thresholds".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1)".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be sorted ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the prediction list.
    pub prediction: usize,
    pub ground_truth: i32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(threshold, AP)` for the mAP thresholds.
    pub ap_per_threshold: Vec<(f64, f64)>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
    /// True-positive matches at IoU 0.5.
    pub matches: Vec<MatchRecord>,
    pub instance_count: usize,
    pub ground_truth_count: usize,
}

/// Ground-truth point lists keyed by id (labels < 0 are background).
fn ground_truth_groups(gt: &[i32]) -> BTreeMap<i32, usize> {
    let mut sizes = BTreeMap::new();
    for &l in gt.iter().filter(|&&l| l >= 0) {
        *sizes.entry(l).or_default() += 1;
    }
    sizes
}

/// IoUs of every prediction against every ground-truth id it touches, ordered
/// by each instance's lowest point index so that IoU ties are broken the same
/// way however the ground truth is numbered.
fn overlaps(predictions: &ProposalSet, gt: &[i32], gt_sizes: &BTreeMap<i32, usize>) -> Result<Vec<Vec<(i32, f64)>>> {
    let mut first: BTreeMap<i32, usize> = BTreeMap::new();
    for (i, &l) in gt.iter().enumerate().filter(|(_, &l)| l >= 0) {
        first.entry(l).or_insert(i);
    }
    predictions
        .instances
        .iter()
        .map(|p| {
            p.validate_against(gt.len())?;
            let mut inter: BTreeMap<i32, usize> = BTreeMap::new();
            for &i in p.points() {
                let l = gt[i as usize];
                if l >= 0 {
                    *inter.entry(l).or_default() += 1;
                }
            }
            let mut ious: Vec<(i32, f64)> = inter
                .into_iter()
                .map(|(g, i)| (g, i as f64 / (p.len() + gt_sizes[&g] - i) as f64))
                .collect();
            ious.sort_by_key(|(g, _)| first[g]);
            Ok(ious)
        })
        .collect()
}

/// Predictions in descending confidence; ties keep input order.
fn confidence_order(predictions: &ProposalSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions.instances[b]
            .confidence
            .total_cmp(&predictions.instances[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Area under the precision/recall curve with the precision envelope
/// (all-point interpolation).
pub fn average_precision(tp_flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    ap
}

fn match_with(order: &[usize], ious: &[Vec<(i32, f64)>], gt_count: usize, theta: f64) -> (f64, Vec<MatchRecord>) {
    let mut taken = std::collections::BTreeSet::new();
    let mut flags = Vec::with_capacity(order.len());
    let mut matches = Vec::new();
    for &p in order {
        let best = ious[p]
            .iter()
            .filter(|(g, iou)| *iou >= theta && !taken.contains(g))
            .fold(None::<(i32, f64)>, |acc, &(g, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((g, iou)),
            });
        match best {
            Some((g, iou)) => {
                taken.insert(g);
                flags.push(true);
                matches.push(MatchRecord {
                    prediction: p,
                    ground_truth: g,
                    iou,
                });
            }
            None => flags.push(false),
        }
    }
    (average_precision(&flags, gt_count), matches)
}

/// AP at one IoU threshold. An empty ground truth makes AP undefined.
pub fn match_and_ap(predictions: &ProposalSet, gt: &[i32], theta: f64) -> Result<(f64, Vec<MatchRecord>)> {
    let sizes = ground_truth_groups(gt);
    if sizes.is_empty() {
        return Err(Error::Undefined("ground truth has no instances".into()));
    }
    let ious = overlaps(predictions, gt, &sizes)?;
    Ok(match_with(&confidence_order(predictions), &ious, sizes.len(), theta))
}

pub fn evaluate(predictions: &ProposalSet, gt: &[i32], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let sizes = ground_truth_groups(gt);
    if sizes.is_empty() {
        return Err(Error::Undefined("ground truth has no instances".into()));
    }
    let ious = overlaps(predictions, gt, &sizes)?;
    let order = confidence_order(predictions);
    let ap_at = |t: f64| match_with(&order, &ious, sizes.len(), t);
    let ap_per_threshold: Vec<(f64, f64)> = cfg.iou_thresholds.iter().map(|&t| (t, ap_at(t).0)).collect();
    let map = ap_per_threshold.iter().map(|(_, a)| a).sum::<f64>() / ap_per_threshold.len() as f64;
    let (ap50, matches) = ap_at(0.5);
    Ok(EvalReport {
        ap_per_threshold,
        map,
        ap50,
        ap25: ap_at(0.25).0,
        matches,
        instance_count: predictions.len(),
        ground_truth_count: sizes.len(),
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// `threshold,ap` rows including the 0.25 and 0.5 taps.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(f64, f64)> = self.ap_per_threshold.clone();
        for tap in [(0.25, self.ap25), (0.5, self.ap50)] {
            if !rows.iter().any(|(t, _)| *t == tap.0) {
                rows.push(tap);
            }
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut w = create(path)?;
        let r = (|| {
            writeln!(w, "threshold,ap")?;
            for (t, a) in rows {
                writeln!(w, "{t},{a}")?;
            }
            w.flush()
        })();
        r.map_err(|e| Error::io(path, e))
    }
}

/// Simulated occlusion: every mask independently loses a uniformly random
/// `floor(percentage / 100 * area)` of its pixels. Masks left empty are
/// dropped. The draw for a mask depends only on `seed` and its id.
pub fn patch_drop(masks: &MaskSet, percentage: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..100.0).contains(&percentage) {
        return Err(Error::Config(format!("drop percentage must lie in [0, 100), got {percentage}")));
    }
    let mut out = Vec::with_capacity(masks.len());
    for mask in masks {
        let pixels: Vec<usize> = mask.pixel_indices().collect();
        let drop = (percentage * pixels.len() as f64 / 100.0).floor() as usize;
        if drop == 0 {
            out.push(mask.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(mask.mask_id()));
        let mut keep = vec![true; pixels.len()];
        for k in sample(&mut rng, pixels.len(), drop) {
            keep[k] = false;
        }
        let kept = pixels.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p);
        match Mask2D::from_pixel_indices(mask.view_id(), mask.mask_id(), mask.width(), mask.height(), kept) {
            Ok(m) => out.push(m),
            Err(_) => continue,
        }
    }
    MaskSet::new(out)
}
