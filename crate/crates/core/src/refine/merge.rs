//! Progressive multi-view merging under a decreasing IoU schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{view_support_confidence, PointSetInstance, ProposalSet, Provenance, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergeSchedule {
    pub thresholds: Vec<f64>,
}

impl Default for MergeSchedule {
    fn default() -> Self {
        Self {
            thresholds: vec![0.7, 0.6, 0.5, 0.4, 0.3],
        }
    }
}

impl MergeSchedule {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        let s = Self { thresholds };
        s.validate()?;
        Ok(s)
    }

    /// The single fixed threshold used for outdoor scenes.
    pub fn outdoor() -> Self {
        Self { thresholds: vec![0.2] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("merge schedule is empty".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("merge threshold {t} outside (0, 1)")));
        }
        if self.thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("merge thresholds must be strictly decreasing".into()));
        }
        Ok(())
    }
}

pub(crate) fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn union_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

pub fn point_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_len(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

struct Live {
    points: Vec<u32>,
    provenance: Provenance,
}

/// Merges proposals across views. For each threshold, the pair with the
/// highest IoU at or above it is united (ties by lower ids) and IoUs are
/// recomputed, until no pair qualifies. Input order does not matter:
/// proposals are first sorted canonically. Every output carries the merged
/// stage tag and a confidence recomputed from its supporting views.
pub fn merge_views(proposals: &[PointSetInstance], schedule: &MergeSchedule, view_count: usize) -> Result<ProposalSet> {
    schedule.validate()?;
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&proposals[a], &proposals[b]);
        x.points()
            .cmp(y.points())
            .then_with(|| x.provenance.sources.cmp(&y.provenance.sources))
    });
    let mut live: Vec<Option<Live>> = order
        .iter()
        .map(|&k| {
            Some(Live {
                points: proposals[k].points().to_vec(),
                provenance: proposals[k].provenance.clone(),
            })
        })
        .collect();

    // Intersection sizes of overlapping pairs, keyed (low id, high id).
    let mut inter: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut holders: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, l) in live.iter().enumerate() {
        for &p in &l.as_ref().unwrap().points {
            holders.entry(p).or_default().push(k);
        }
    }
    for ks in holders.values() {
        for (x, &a) in ks.iter().enumerate() {
            for &b in &ks[x + 1..] {
                *inter.entry((a, b)).or_default() += 1;
            }
        }
    }
    drop(holders);
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); live.len()];
    for &(a, b) in inter.keys() {
        neighbours[a].insert(b);
        neighbours[b].insert(a);
    }

    for &theta in &schedule.thresholds {
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (&(a, b), &i) in &inter {
                let (la, lb) = (live[a].as_ref().unwrap().points.len(), live[b].as_ref().unwrap().points.len());
                let iou = i as f64 / (la + lb - i) as f64;
                if iou >= theta && best.is_none_or(|(bi, _, _)| iou > bi) {
                    best = Some((iou, a, b));
                }
            }
            let Some((_, a, b)) = best else { break };
            let la = live[a].take().unwrap();
            let lb = live[b].take().unwrap();
            let merged = Live {
                points: union_sorted(&la.points, &lb.points),
                provenance: la.provenance.merge(&lb.provenance, Stage::Merged),
            };
            let c = live.len();
            let touching: BTreeSet<usize> = neighbours[a]
                .iter()
                .chain(&neighbours[b])
                .copied()
                .filter(|&k| k != a && k != b)
                .collect();
            for k in [a, b] {
                for n in std::mem::take(&mut neighbours[k]) {
                    neighbours[n].remove(&k);
                    inter.remove(&(k.min(n), k.max(n)));
                }
            }
            neighbours.push(BTreeSet::new());
            for k in touching {
                let i = intersection_len(&merged.points, &live[k].as_ref().unwrap().points);
                if i > 0 {
                    inter.insert((k, c), i);
                    neighbours[k].insert(c);
                    neighbours[c].insert(k);
                }
            }
            live.push(Some(merged));
        }
    }

    let instances = live
        .into_iter()
        .flatten()
        .map(|l| {
            let views = l.provenance.views().len();
            let provenance = Provenance {
                stage: Stage::Merged,
                sources: l.provenance.sources,
            };
            PointSetInstance::new(l.points, provenance, view_support_confidence(views, view_count))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProposalSet::new(instances, view_count))
}
