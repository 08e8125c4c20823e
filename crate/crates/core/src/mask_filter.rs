//! Cross-view co-occurrence scoring of 2D masks over superpoints.
//!
//! Each mask `m` (from view `t`) is first lifted to its footprint: the points
//! visible in `t` whose pixel lies inside `m`. For every view `j` the table
//! holds `P[m][j]`, the superpoints more than `inclusion_fraction` of whose
//! points are both visible in `j` and inside that footprint. For `j = t` this
//! is exactly the set of superpoints the mask makes visible.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::create;
use crate::projection::ViewMapping;
use crate::scene::{Mask2D, MaskSet, SuperpointPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Per other view, the margin between the best and second-best matching
    /// mask of that view, averaged over views where the mask has support.
    #[default]
    Consensus,
    /// The normalized double sum over all peer masks and views.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub score_threshold: f64,
    pub inclusion_fraction: f64,
    pub mode: ScoreMode,
    /// Literal mode only: divide by the number of views where the mask's set
    /// is non-empty instead of the total view count.
    pub normalize_by_nonempty_views: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.2,
            inclusion_fraction: 0.5,
            mode: ScoreMode::Consensus,
            normalize_by_nonempty_views: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold >= 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score threshold must lie in [0, 1), got {}",
                self.score_threshold
            )));
        }
        if !(self.inclusion_fraction > 0.0 && self.inclusion_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "inclusion fraction must lie in (0, 1], got {}",
                self.inclusion_fraction
            )));
        }
        Ok(())
    }
}

/// Points visible in `mapping` whose pixel lies inside `mask`, ascending.
pub fn mask_footprint(mapping: &ViewMapping, mask: &Mask2D) -> Vec<u32> {
    mapping
        .visible_points
        .iter()
        .copied()
        .filter(|&i| mask.contains_index(mapping.pixel_index(i as usize)))
        .collect()
}

/// Superpoints with more than `frac` of their points among `points`
/// (ascending, each point counted once). Returned ascending.
pub fn superpoints_covered(points: impl IntoIterator<Item = u32>, partition: &SuperpointPartition, frac: f64) -> Vec<u32> {
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for i in points {
        *counts.entry(partition.label(i as usize)).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(u, c)| c as f64 / partition.size(u as usize) as f64 > frac)
        .map(|(u, _)| u)
        .collect()
}

/// Superpoints the mask makes visible in its own view (strict `> frac`).
pub fn visible_superpoints(mapping: &ViewMapping, mask: &Mask2D, partition: &SuperpointPartition, frac: f64) -> Vec<u32> {
    superpoints_covered(mask_footprint(mapping, mask), partition, frac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSuperpointTable {
    pub view_ids: Vec<String>,
    pub mask_ids: Vec<u32>,
    /// Index into `view_ids` of each mask's own view.
    pub mask_view: Vec<usize>,
    /// `sets[m][j]`: ascending superpoint ids.
    sets: Vec<Vec<Vec<u32>>>,
}

impl MaskSuperpointTable {
    pub fn new(view_ids: Vec<String>, mask_ids: Vec<u32>, mask_view: Vec<usize>, sets: Vec<Vec<Vec<u32>>>) -> Result<Self> {
        let t = view_ids.len();
        if mask_ids.len() != sets.len() || mask_view.len() != sets.len() {
            return Err(Error::Validation("table dimensions disagree".into()));
        }
        for (m, row) in sets.iter().enumerate() {
            if row.len() != t || mask_view[m] >= t {
                return Err(Error::Validation(format!("mask {} has {} view entries, expected {t}", mask_ids[m], row.len())));
            }
            if row.iter().any(|s| s.windows(2).any(|w| w[0] >= w[1])) {
                return Err(Error::Validation(format!("mask {} has unsorted superpoint sets", mask_ids[m])));
            }
        }
        Ok(Self {
            view_ids,
            mask_ids,
            mask_view,
            sets,
        })
    }

    pub fn mask_count(&self) -> usize {
        self.sets.len()
    }

    pub fn view_count(&self) -> usize {
        self.view_ids.len()
    }

    pub fn set(&self, m: usize, j: usize) -> &[u32] {
        &self.sets[m][j]
    }

    /// The set of mask `m` in its own view.
    pub fn own_set(&self, m: usize) -> &[u32] {
        &self.sets[m][self.mask_view[m]]
    }
}

/// Builds the table. `mappings` must contain one mapping per view of every
/// mask; the table's views follow the order of `mappings`.
pub fn build_table(
    masks: &MaskSet,
    mappings: &[ViewMapping],
    partition: &SuperpointPartition,
    frac: f64,
) -> Result<MaskSuperpointTable> {
    let view_ids: Vec<String> = mappings.iter().map(|m| m.view_id.clone()).collect();
    let mask_view = masks
        .iter()
        .map(|m| {
            view_ids.iter().position(|v| v == m.view_id()).ok_or_else(|| {
                Error::Validation(format!("mask {} refers to view {} which has no mapping", m.mask_id(), m.view_id()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<Vec<Vec<u32>>> = masks
        .masks()
        .par_iter()
        .zip(mask_view.par_iter())
        .map(|(mask, &t)| {
            let footprint = mask_footprint(&mappings[t], mask);
            mappings
                .iter()
                .map(|mj| {
                    superpoints_covered(
                        footprint.iter().copied().filter(|&i| mj.visible[i as usize]),
                        partition,
                        frac,
                    )
                })
                .collect()
        })
        .collect();
    MaskSuperpointTable::new(view_ids, masks.iter().map(|m| m.mask_id()).collect(), mask_view, sets)
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
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

/// `|a ∩ b| / sqrt(|a| |b|)`, 0 when either set is empty.
pub fn normalized_overlap(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    intersection_len(a, b) as f64 / ((a.len() as f64) * (b.len() as f64)).sqrt()
}

/// `c_m = 1 / ((K - 1) T) * sum_{n != m} sum_j overlap(P[m][j], P[n][j])`.
/// With `normalize_by_nonempty_views`, `T` is replaced by the number of views
/// where `P[m][j]` is non-empty. Needs at least two masks.
pub fn cooccurrence_scores(table: &MaskSuperpointTable, normalize_by_nonempty_views: bool) -> Result<Vec<f64>> {
    let k = table.mask_count();
    if k < 2 {
        return Err(Error::Undefined("co-occurrence needs at least two masks".into()));
    }
    let t = table.view_count();
    Ok((0..k)
        .into_par_iter()
        .map(|m| {
            let mut sum = 0.0;
            let mut nonempty = 0usize;
            for j in 0..t {
                let pm = table.set(m, j);
                if pm.is_empty() {
                    continue;
                }
                nonempty += 1;
                for n in (0..k).filter(|&n| n != m) {
                    sum += normalized_overlap(pm, table.set(n, j));
                }
            }
            let views = if normalize_by_nonempty_views { nonempty } else { t };
            if views == 0 {
                0.0
            } else {
                sum / ((k - 1) as f64 * views as f64)
            }
        })
        .collect())
}

/// For each other view `j` where `P[m][j]` is non-empty, compares it with the
/// own-view sets of the masks of `j` and takes the best overlap minus the
/// runner-up; the score is the mean over those views (0 if there are none).
/// A mask that straddles two objects matches each of them only partially in
/// views that separate them, so its margin collapses.
pub fn consensus_scores(table: &MaskSuperpointTable) -> Vec<f64> {
    let t = table.view_count();
    let mut by_view: Vec<Vec<usize>> = vec![Vec::new(); t];
    for (m, &v) in table.mask_view.iter().enumerate() {
        by_view[v].push(m);
    }
    (0..table.mask_count())
        .into_par_iter()
        .map(|m| {
            let mut sum = 0.0;
            let mut views = 0usize;
            for j in (0..t).filter(|&j| j != table.mask_view[m]) {
                let pm = table.set(m, j);
                if pm.is_empty() {
                    continue;
                }
                views += 1;
                let (mut best, mut second) = (0.0f64, 0.0f64);
                for &n in &by_view[j] {
                    let s = normalized_overlap(pm, table.own_set(n));
                    if s > best {
                        second = best;
                        best = s;
                    } else if s > second {
                        second = s;
                    }
                }
                sum += best - second;
            }
            if views == 0 {
                0.0
            } else {
                sum / views as f64
            }
        })
        .collect()
}

pub fn score_masks(table: &MaskSuperpointTable, cfg: &FilterConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        ScoreMode::Consensus => Ok(consensus_scores(table)),
        ScoreMode::Literal => cooccurrence_scores(table, cfg.normalize_by_nonempty_views),
    }
}

/// Keeps masks with `score >= threshold`. Removing every mask is an error.
pub fn filter_masks(masks: &MaskSet, scores: &[f64], cfg: &FilterConfig) -> Result<MaskSet> {
    cfg.validate()?;
    if scores.len() != masks.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} masks",
            scores.len(),
            masks.len()
        )));
    }
    let mut idx = 0;
    let kept = masks.retain(|_| {
        let keep = scores[idx] >= cfg.score_threshold;
        idx += 1;
        keep
    });
    if kept.is_empty() && !masks.is_empty() {
        return Err(Error::pipeline(
            "filter",
            format!(
                "every mask scored below the threshold {}; lower --cmin",
                cfg.score_threshold
            ),
        ));
    }
    Ok(kept)
}

/// Per-mask scores with the filter decision, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub mask_id: u32,
    pub view_id: String,
    pub score: f64,
    pub retained: bool,
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = create(path)?;
    let r = (|| {
        writeln!(w, "mask_id,view_id_of_origin,c_m,retained")?;
        for rec in records {
            writeln!(w, "{},{},{},{}", rec.mask_id, rec.view_id, rec.score, rec.retained)?;
        }
        w.flush()
    })();
    r.map_err(|e| Error::io(path, e))
}

/// Scores and filters in one pass. With fewer than two masks, or fewer than
/// two views in consensus mode, there is no peer evidence and every mask
/// passes.
pub fn run_filter(
    masks: &MaskSet,
    mappings: &[ViewMapping],
    partition: &SuperpointPartition,
    cfg: &FilterConfig,
) -> Result<(MaskSet, Vec<ScoreRecord>)> {
    cfg.validate()?;
    let no_peers = masks.len() < 2 || (cfg.mode == ScoreMode::Consensus && mappings.len() < 2);
    let scores = if no_peers {
        tracing::warn!(masks = masks.len(), views = mappings.len(), "no peer evidence, keeping every mask");
        vec![1.0; masks.len()]
    } else {
        let table = build_table(masks, mappings, partition, cfg.inclusion_fraction)?;
        score_masks(&table, cfg)?
    };
    let kept = filter_masks(masks, &scores, cfg)?;
    let records = masks
        .iter()
        .zip(&scores)
        .map(|(m, &s)| ScoreRecord {
            mask_id: m.mask_id(),
            view_id: m.view_id().to_string(),
            score: s,
            retained: s >= cfg.score_threshold,
        })
        .collect();
    tracing::info!(before = masks.len(), after = kept.len(), "mask filtering");
    Ok((kept, records))
}
