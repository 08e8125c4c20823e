//! End-to-end orchestration: view subsampling, the six stages, checkpoints
//! and per-stage timings.
//!
//! Every stage hands its output on in precedence order (see
//! [`precedence_order`]), which is also the order checkpoints are read back
//! in. A full run therefore equals the composition of single-stage runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::io::binary::{read_label_file, write_label_file};
use crate::io::instances::{precedence_order, read_checkpoint, write_checkpoint, write_instances};
use crate::io::{self, masks, ScenePaths};
use crate::mask_filter::{run_filter, write_scores_csv, FilterConfig, ScoreRecord};
use crate::projection::{map_view, project_points, rasterize_projection, verify_visibility, DepthBuffer, MappingConfig, Strategy, ViewMapping};
use crate::refine::{
    grow_seeds, lift_masks, merge_views, split_seeds, unsplit_seeds, GrowConfig, GrowContext, MergeSchedule,
};
use crate::scene::{MaskSet, PointSetInstance, ProposalSet, SceneBundle};

const VISIBLE_MAGIC: &[u8; 4] = b"VS3D";

/// Ablation switches for the three refinement components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Cross-view mask filtering.
    pub filter: bool,
    /// Density splitting of lifted masks into seeds.
    pub split: bool,
    /// Feature-guided growing of seeds.
    pub grow: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            filter: true,
            split: true,
            grow: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mapping: MappingConfig,
    pub filter: FilterConfig,
    pub cluster: ClusterConfig,
    pub grow: GrowConfig,
    pub merge: MergeSchedule,
    pub eval: EvalConfig,
    /// Share of the scene's views used, in (0, 1].
    pub view_fraction: f64,
    pub view_seed: u64,
    /// Draw views at random (seeded) instead of by uniform stride.
    pub random_view_sampling: bool,
    pub components: Components,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mapping: MappingConfig::default(),
            filter: FilterConfig::default(),
            cluster: ClusterConfig::default(),
            grow: GrowConfig::default(),
            merge: MergeSchedule::default(),
            eval: EvalConfig::default(),
            view_fraction: 0.1,
            view_seed: 0,
            random_view_sampling: false,
            components: Components::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.view_fraction > 0.0 && self.view_fraction <= 1.0) {
            return Err(Error::Config(format!("view fraction must lie in (0, 1], got {}", self.view_fraction)));
        }
        self.mapping.validate()?;
        self.filter.validate()?;
        self.cluster.validate()?;
        self.grow.validate()?;
        self.merge.validate()?;
        self.eval.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path).map_err(|e| match e {
            Error::Parse { path, location, message } => Error::Config(format!("{}: {location}: {message}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Map,
    Filter,
    Lift,
    Split,
    Grow,
    Merge,
}

impl StageName {
    pub const ALL: [StageName; 6] = [
        StageName::Map,
        StageName::Filter,
        StageName::Lift,
        StageName::Split,
        StageName::Grow,
        StageName::Merge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Map => "map",
            StageName::Filter => "filter",
            StageName::Lift => "lift",
            StageName::Split => "split",
            StageName::Grow => "grow",
            StageName::Merge => "merge",
        }
    }

    /// The stage whose checkpoint this one reads.
    pub fn requires(self) -> Option<StageName> {
        match self {
            StageName::Map => None,
            StageName::Filter => Some(StageName::Map),
            StageName::Lift => Some(StageName::Filter),
            StageName::Split => Some(StageName::Lift),
            StageName::Grow => Some(StageName::Split),
            StageName::Merge => Some(StageName::Grow),
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Indices of the views used: `ceil(fraction * T)` of them, by uniform
/// stride or seeded random draw, ascending either way.
pub fn select_views(total: usize, fraction: f64, seed: u64, random: bool) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let n = ((fraction * total as f64).ceil() as usize).clamp(1, total);
    if random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).map(|k| k * total / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: StageName,
    pub seconds: f64,
    /// Masks or proposals the stage produced.
    pub outputs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub views: Vec<String>,
    pub masks_in: usize,
    pub masks_kept: usize,
    pub instances: usize,
    pub timings: Vec<StageTiming>,
}

/// Attaches the stage name to failures that are not input errors.
fn in_stage<T>(stage: StageName, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } | Error::Validation(_) | Error::Config(_) | Error::Pipeline { .. } => e,
        other => Error::pipeline(stage.as_str(), other.to_string()),
    })
}

fn canonical(mut instances: Vec<PointSetInstance>) -> Vec<PointSetInstance> {
    let order = precedence_order(&instances);
    let mut slots: Vec<Option<PointSetInstance>> = instances.drain(..).map(Some).collect();
    order.into_iter().map(|i| slots[i].take().expect("permutation")).collect()
}

/// Masks of the selected views only, ordered by view then mask id.
fn select_masks(scene: &SceneBundle, masks: &MaskSet, views: &[usize]) -> Result<MaskSet> {
    let mut kept: Vec<(usize, u32, usize)> = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        if let Some(v) = scene.view_index(m.view_id()) {
            if views.binary_search(&v).is_ok() {
                kept.push((v, m.mask_id(), k));
            }
        }
    }
    kept.sort_unstable();
    MaskSet::new(kept.into_iter().map(|(_, _, k)| masks.masks()[k].clone()).collect())
}

/// Output of every stage of one in-memory run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mappings: Vec<ViewMapping>,
    pub filtered: MaskSet,
    pub scores: Vec<ScoreRecord>,
    pub lifted: Vec<PointSetInstance>,
    pub seeds: Vec<PointSetInstance>,
    pub grown: Vec<PointSetInstance>,
    pub proposals: ProposalSet,
    pub report: RunReport,
}

struct Timer {
    timings: Vec<StageTiming>,
}

impl Timer {
    fn run<T>(&mut self, stage: StageName, count: impl Fn(&T) -> usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = in_stage(stage, f())?;
        let seconds = start.elapsed().as_secs_f64();
        let outputs = count(&out);
        tracing::info!(stage = stage.as_str(), seconds, outputs, "stage finished");
        self.timings.push(StageTiming { stage, seconds, outputs });
        Ok(out)
    }
}

pub fn map_stage(scene: &SceneBundle, views: &[usize], cfg: &MappingConfig) -> Result<Vec<ViewMapping>> {
    cfg.validate()?;
    use rayon::prelude::*;
    views.par_iter().map(|&v| map_view(&scene.cloud, &scene.views[v], cfg)).collect()
}

pub fn filter_stage(
    scene: &SceneBundle,
    masks: &MaskSet,
    views: &[usize],
    mappings: &[ViewMapping],
    cfg: &PipelineConfig,
) -> Result<(MaskSet, Vec<ScoreRecord>)> {
    let selected = select_masks(scene, masks, views)?;
    if selected.is_empty() {
        return Err(Error::pipeline("filter", "the selected views carry no masks"));
    }
    if cfg.components.filter {
        run_filter(&selected, mappings, &scene.partition, &cfg.filter)
    } else {
        Ok((selected, Vec::new()))
    }
}

pub fn lift_stage(masks: &MaskSet, mappings: &[ViewMapping]) -> Result<Vec<PointSetInstance>> {
    Ok(canonical(lift_masks(masks, mappings)?))
}

pub fn split_stage(scene: &SceneBundle, lifted: &[PointSetInstance], cfg: &PipelineConfig) -> Result<Vec<PointSetInstance>> {
    let seeds = if cfg.components.split {
        split_seeds(lifted, &scene.cloud, &cfg.cluster)?
    } else {
        unsplit_seeds(lifted)
    };
    Ok(canonical(seeds))
}

pub fn grow_stage(scene: &SceneBundle, seeds: &[PointSetInstance], cfg: &PipelineConfig) -> Result<Vec<PointSetInstance>> {
    if !cfg.components.grow {
        return Ok(seeds.to_vec());
    }
    let ctx = GrowContext::new(&scene.cloud, &scene.partition, &scene.features, &cfg.grow)?;
    Ok(canonical(grow_seeds(seeds, &ctx, &cfg.grow)?))
}

/// Proposals come back in precedence order, so a proposal's index equals its
/// id in the written instance file.
pub fn merge_stage(grown: &[PointSetInstance], view_count: usize, cfg: &PipelineConfig) -> Result<ProposalSet> {
    let merged = merge_views(grown, &cfg.merge, view_count)?;
    Ok(ProposalSet::new(canonical(merged.instances), merged.view_count))
}

/// Runs all stages in memory.
pub fn run_pipeline(scene: &SceneBundle, masks: &MaskSet, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    scene.check_masks(masks)?;
    let views = select_views(scene.views.len(), cfg.view_fraction, cfg.view_seed, cfg.random_view_sampling);
    let mut t = Timer { timings: Vec::new() };
    let mappings = t.run(StageName::Map, Vec::len, || map_stage(scene, &views, &cfg.mapping))?;
    let (filtered, scores) = t.run(StageName::Filter, |o: &(MaskSet, _)| o.0.len(), || {
        filter_stage(scene, masks, &views, &mappings, cfg)
    })?;
    let lifted = t.run(StageName::Lift, Vec::len, || lift_stage(&filtered, &mappings))?;
    let seeds = t.run(StageName::Split, Vec::len, || split_stage(scene, &lifted, cfg))?;
    let grown = t.run(StageName::Grow, Vec::len, || grow_stage(scene, &seeds, cfg))?;
    let proposals = t.run(StageName::Merge, ProposalSet::len, || merge_stage(&grown, views.len(), cfg))?;
    let report = RunReport {
        views: views.iter().map(|&v| scene.views[v].view_id().to_string()).collect(),
        masks_in: masks.len(),
        masks_kept: filtered.len(),
        instances: proposals.len(),
        timings: t.timings,
    };
    Ok(RunOutput {
        mappings,
        filtered,
        scores,
        lifted,
        seeds,
        grown,
        proposals,
        report,
    })
}

/// Checkpoint file layout under one directory.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub dir: PathBuf,
}

impl Checkpoints {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn map_dir(&self) -> PathBuf {
        self.dir.join("map")
    }

    fn views_file(&self) -> PathBuf {
        self.map_dir().join("views.json")
    }

    fn filter_dir(&self) -> PathBuf {
        self.dir.join("filter")
    }

    /// Label file holding the given stage's proposals.
    pub fn instances(&self, stage: StageName) -> PathBuf {
        self.dir.join(format!("{}.in3d", stage.as_str()))
    }

    fn done(&self, stage: StageName) -> bool {
        match stage {
            StageName::Map => self.views_file().exists(),
            StageName::Filter => self.filter_dir().join("masks").exists(),
            s => self.instances(s).exists(),
        }
    }

    fn require(&self, stage: StageName) -> Result<()> {
        let mut need = stage.requires();
        while let Some(r) = need {
            if !self.done(r) {
                return Err(Error::MissingCheckpoint {
                    stage: stage.as_str().into(),
                    requires: r.as_str().into(),
                });
            }
            need = r.requires();
        }
        Ok(())
    }

    pub fn write_map(&self, scene: &SceneBundle, views: &[usize], mappings: &[ViewMapping]) -> Result<()> {
        let dir = self.map_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ids: Vec<&str> = views.iter().map(|&v| scene.views[v].view_id()).collect();
        for (id, m) in ids.iter().zip(mappings) {
            if let Some(d) = &m.depth {
                d.write(&dir.join(format!("{id}.db3d")))?;
            }
            let vis: Vec<i32> = m.visible_points.iter().map(|&i| i as i32).collect();
            write_label_file(&dir.join(format!("{id}.visible")), VISIBLE_MAGIC, &vis)?;
        }
        io::write_json(&self.views_file(), &ids)
    }

    /// Selected view indices and their mappings, rebuilt from the stored
    /// depth buffers.
    pub fn read_map(&self, scene: &SceneBundle, cfg: &MappingConfig) -> Result<(Vec<usize>, Vec<ViewMapping>)> {
        let ids: Vec<String> = io::read_json(&self.views_file())?;
        let dir = self.map_dir();
        let mut views = Vec::with_capacity(ids.len());
        let mut mappings = Vec::with_capacity(ids.len());
        for id in &ids {
            let v = scene
                .view_index(id)
                .ok_or_else(|| Error::Validation(format!("checkpoint names unknown view {id}")))?;
            let view = &scene.views[v];
            let proj = project_points(&scene.cloud, view)?;
            // The dump holds float32 depths; the buffer is rebuilt at full
            // precision and the dump only checks that it is current.
            let depth = match cfg.strategy {
                Strategy::Naive => None,
                _ => {
                    let path = dir.join(format!("{id}.db3d"));
                    let stored = DepthBuffer::read(&path)?;
                    let depth = rasterize_projection(&proj, view.width(), view.height(), cfg.splat_radius);
                    let same = (stored.width, stored.height) == (depth.width, depth.height)
                        && stored.data.iter().zip(&depth.data).all(|(&a, &b)| a == f64::from(b as f32));
                    if !same {
                        return Err(Error::Validation(format!(
                            "{}: depth buffer differs from the current scene and settings; rerun `map`",
                            path.display()
                        )));
                    }
                    Some(depth)
                }
            };
            let mapping = verify_visibility(&proj, view, depth, cfg)?;
            let vis_path = dir.join(format!("{id}.visible"));
            let stored = read_label_file(&vis_path, VISIBLE_MAGIC)?;
            if !stored.iter().map(|&i| i as u32).eq(mapping.visible_points.iter().copied()) {
                return Err(Error::Validation(format!(
                    "{}: visibility differs from the current mapping settings; rerun `map`",
                    vis_path.display()
                )));
            }
            views.push(v);
            mappings.push(mapping);
        }
        Ok((views, mappings))
    }

    pub fn write_filter(&self, scene: &SceneBundle, kept: &MaskSet, scores: &[ScoreRecord]) -> Result<()> {
        let dir = self.filter_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_scores_csv(&dir.join("scores.csv"), scores)?;
        masks::write_masks(&dir.join("masks"), &scene.views, kept)
    }

    pub fn read_filter(&self, scene: &SceneBundle) -> Result<MaskSet> {
        let all = masks::read_masks(&self.filter_dir().join("masks"), &scene.views)?;
        // Same order as the in-memory path.
        let views: Vec<usize> = (0..scene.views.len()).collect();
        select_masks(scene, &all, &views)
    }

    pub fn write_proposals(&self, stage: StageName, instances: Vec<PointSetInstance>, point_count: usize, view_count: usize) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_checkpoint(&ProposalSet::new(instances, view_count), point_count, &self.instances(stage))
    }

    pub fn read_proposals(&self, stage: StageName) -> Result<ProposalSet> {
        read_checkpoint(&self.instances(stage))
    }
}

/// Runs exactly one stage against the checkpoints in `ckpt`, writing its own.
pub fn run_stage(stage: StageName, scene: &SceneBundle, masks: &MaskSet, cfg: &PipelineConfig, ckpt: &Checkpoints) -> Result<StageTiming> {
    cfg.validate()?;
    ckpt.require(stage)?;
    let n = scene.cloud.len();
    let mut t = Timer { timings: Vec::new() };
    match stage {
        StageName::Map => {
            let views = select_views(scene.views.len(), cfg.view_fraction, cfg.view_seed, cfg.random_view_sampling);
            let mappings = t.run(stage, Vec::len, || map_stage(scene, &views, &cfg.mapping))?;
            ckpt.write_map(scene, &views, &mappings)?;
        }
        StageName::Filter => {
            scene.check_masks(masks)?;
            let (views, mappings) = ckpt.read_map(scene, &cfg.mapping)?;
            let (kept, scores) = t.run(stage, |o: &(MaskSet, _)| o.0.len(), || {
                filter_stage(scene, masks, &views, &mappings, cfg)
            })?;
            ckpt.write_filter(scene, &kept, &scores)?;
        }
        StageName::Lift => {
            let (views, mappings) = ckpt.read_map(scene, &cfg.mapping)?;
            let kept = ckpt.read_filter(scene)?;
            let lifted = t.run(stage, Vec::len, || lift_stage(&kept, &mappings))?;
            ckpt.write_proposals(stage, lifted, n, views.len())?;
        }
        StageName::Split => {
            let lifted = ckpt.read_proposals(StageName::Lift)?;
            let seeds = t.run(stage, Vec::len, || split_stage(scene, &lifted.instances, cfg))?;
            ckpt.write_proposals(stage, seeds, n, lifted.view_count)?;
        }
        StageName::Grow => {
            let seeds = ckpt.read_proposals(StageName::Split)?;
            let grown = t.run(stage, Vec::len, || grow_stage(scene, &seeds.instances, cfg))?;
            ckpt.write_proposals(stage, grown, n, seeds.view_count)?;
        }
        StageName::Merge => {
            let grown = ckpt.read_proposals(StageName::Grow)?;
            let merged = t.run(stage, ProposalSet::len, || merge_stage(&grown.instances, grown.view_count, cfg))?;
            ckpt.write_proposals(stage, merged.instances, n, merged.view_count)?;
        }
    }
    Ok(t.timings.pop().expect("one stage ran"))
}

/// Loads a scene directory, runs every stage and writes the instance file,
/// its manifest and `<output>.report.json`. With a checkpoint directory every
/// stage's output is kept there as well.
pub fn run_scene_dir(scene_dir: &Path, output: &Path, cfg: &PipelineConfig, checkpoint_dir: Option<&Path>) -> Result<RunReport> {
    let paths = ScenePaths::from_dir(scene_dir);
    let scene = io::load_scene(&paths)?;
    let all_masks = masks::read_masks(&paths.masks, &scene.views)?;
    let out = run_pipeline(&scene, &all_masks, cfg)?;
    if let Some(dir) = checkpoint_dir {
        let ckpt = Checkpoints::new(dir);
        let views: Vec<usize> = out.report.views.iter().filter_map(|id| scene.view_index(id)).collect();
        let n = scene.cloud.len();
        let t = views.len();
        ckpt.write_map(&scene, &views, &out.mappings)?;
        ckpt.write_filter(&scene, &out.filtered, &out.scores)?;
        ckpt.write_proposals(StageName::Lift, out.lifted, n, t)?;
        ckpt.write_proposals(StageName::Split, out.seeds, n, t)?;
        ckpt.write_proposals(StageName::Grow, out.grown, n, t)?;
        ckpt.write_proposals(StageName::Merge, out.proposals.instances.clone(), n, t)?;
    }
    write_outputs(&out.proposals, scene.cloud.len(), output, &out.report)?;
    Ok(out.report)
}

pub fn report_path(output: &Path) -> PathBuf {
    output.with_extension("report.json")
}

pub fn write_outputs(proposals: &ProposalSet, point_count: usize, output: &Path, report: &RunReport) -> Result<()> {
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_instances(proposals, point_count, output)?;
    io::write_json(&report_path(output), report)
}
