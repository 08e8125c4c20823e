use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seedgrow::error::{Error, Result};
use seedgrow::eval::{evaluate, patch_drop};
use seedgrow::io::instances::{read_instance_labels, read_instances};
use seedgrow::io::{self as sio, masks, ScenePaths};
use seedgrow::pipeline::{map_stage, run_scene_dir, run_stage, Checkpoints, PipelineConfig, StageName};
use seedgrow::semantic::{aggregate_point_features, proposal_feature, rank_by_query, PixelFeatureSource, TextQuery};
use seedgrow::synth::{generate_scene, render_mappings, render_masks_with, write_scene_dir, SynthConfig};

#[derive(Parser)]
#[command(name = "seedgrow", version, about = "Training-free 3D instance segmentation from multi-view 2D masks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (JSON); flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Share of views to use, in (0, 1].
    #[arg(long, global = true)]
    views_fraction: Option<f64>,
    /// Depth tolerance of the visibility test, in metres.
    #[arg(long, global = true)]
    tau_vis: Option<f64>,
    /// Co-occurrence score threshold for keeping a mask.
    #[arg(long, global = true)]
    cmin: Option<f64>,
    #[arg(long, global = true)]
    min_cluster_size: Option<usize>,
    /// Comma-separated, strictly decreasing IoU thresholds, e.g. 0.7,0.5,0.3.
    #[arg(long, global = true, value_delimiter = ',')]
    merge_schedule: Option<Vec<f64>>,
    /// View sampling seed for pipeline commands, generator seed for `synth`
    /// and drop seed for `occlude`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with ground truth.
    Synth(SynthArgs),
    /// Compute per-view visibility and depth buffers.
    Map(StageArgs),
    /// Score and prune masks by cross-view co-occurrence.
    Filter(StageArgs),
    /// Lift filtered masks onto the point cloud.
    Lift(StageArgs),
    /// Split lifted masks into spatially contiguous seeds.
    Split(StageArgs),
    /// Grow seeds over superpoints.
    Grow(StageArgs),
    /// Merge grown proposals across views.
    Merge(StageArgs),
    /// Run every stage and write the instance file.
    Run(RunArgs),
    /// Score an instance file against ground-truth labels.
    Eval(EvalArgs),
    /// Drop a percentage of every mask's pixels.
    Occlude(OccludeArgs),
    /// Rank proposals against a text query embedding.
    Search(SearchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator configuration (JSON); flags below override it.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    merge_probability: Option<f64>,
    #[arg(long)]
    boundary_noise: Option<u32>,
    #[arg(long)]
    duplicates: bool,
    /// Also write per-view pixel features from the object prototypes into
    /// `<out>/pixel_features/` and one query per object into `<out>/queries/`.
    #[arg(long)]
    pixel_features: bool,
    /// Noise of the synthetic pixel features.
    #[arg(long, default_value_t = 0.0)]
    feature_noise: f64,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Instance file to write; the manifest and report go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write the report as JSON here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-threshold table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct OccludeArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Percentage of each mask's pixels to drop, in [0, 100).
    #[arg(long)]
    percent: f64,
    /// Output mask directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    /// Directory of `<view_id>.pf3d` feature maps.
    #[arg(long)]
    features: PathBuf,
    /// JSON file `{"query": ..., "embedding": [...]}`.
    #[arg(long)]
    query: PathBuf,
    /// Number of results to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

fn pipeline_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.views_fraction {
        cfg.view_fraction = v;
    }
    if let Some(v) = g.tau_vis {
        cfg.mapping.tau_vis = v;
    }
    if let Some(v) = g.cmin {
        cfg.filter.score_threshold = v;
    }
    if let Some(v) = g.min_cluster_size {
        cfg.cluster.min_cluster_size = v;
    }
    if let Some(v) = &g.merge_schedule {
        cfg.merge.thresholds = v.clone();
    }
    if let Some(v) = g.seed {
        cfg.view_seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(args: &SynthArgs, g: &Global) -> Result<()> {
    let mut cfg = match &args.synth_config {
        Some(p) => {
            let data = std::fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_slice::<SynthConfig>(&data).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = g.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = args.objects {
        cfg.object_count = v;
    }
    if let Some(v) = args.cameras {
        cfg.camera_count = v;
    }
    if let Some(v) = args.points_per_object {
        cfg.points_per_object = v;
    }
    if let Some(v) = args.merge_probability {
        cfg.corruption.merge_mask_probability = v;
    }
    if let Some(v) = args.boundary_noise {
        cfg.corruption.boundary_noise_px = v;
    }
    cfg.corruption.duplicate_appearance |= args.duplicates;
    cfg.validate()?;
    let (scene, gt) = generate_scene(&cfg)?;
    let mappings = render_mappings(&scene)?;
    let masks = render_masks_with(&scene, &gt, &cfg, &mappings)?;
    write_scene_dir(&args.out, &scene, &gt, &masks)?;
    if args.pixel_features {
        let src = PixelFeatureSource::synthetic(&mappings, &gt.labels, &gt.prototypes, args.feature_noise, cfg.rng_seed)?;
        src.save(&args.out.join("pixel_features"))?;
        for (k, p) in gt.prototypes.iter().enumerate() {
            let q = TextQuery {
                query: format!("object {k}"),
                embedding: p.iter().map(|&x| f64::from(x)).collect(),
            };
            let path = args.out.join("queries").join(format!("object_{k:02}.json"));
            write_json(&path, &q)?;
        }
    }
    println!(
        "wrote {} points, {} views, {} masks, {} objects to {}",
        scene.cloud.len(),
        scene.views.len(),
        masks.len(),
        gt.object_count(),
        args.out.display()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stage(stage: StageName, args: &StageArgs, g: &Global) -> Result<()> {
    let cfg = pipeline_config(g)?;
    let dir = g
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| Error::Config(format!("`{stage}` needs --checkpoint-dir")))?;
    let paths = ScenePaths::from_dir(&args.scene);
    let scene = sio::load_scene(&paths)?;
    let all_masks = masks::read_masks(&paths.masks, &scene.views)?;
    let t = run_stage(stage, &scene, &all_masks, &cfg, &Checkpoints::new(dir))?;
    println!("{}: {} outputs in {:.2}s", t.stage, t.outputs, t.seconds);
    Ok(())
}

fn run(args: &RunArgs, g: &Global) -> Result<()> {
    let cfg = pipeline_config(g)?;
    let report = run_scene_dir(&args.scene, &args.out, &cfg, g.checkpoint_dir.as_deref())?;
    for t in &report.timings {
        println!("{:<7} {:>8.2}s  {} outputs", t.stage.to_string(), t.seconds, t.outputs);
    }
    println!(
        "{} views, {}/{} masks kept, {} instances written to {}",
        report.views.len(),
        report.masks_kept,
        report.masks_in,
        report.instances,
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs, g: &Global) -> Result<()> {
    let cfg = pipeline_config(g)?;
    let pred = read_instances(&args.pred)?;
    let gt = read_instance_labels(&args.gt)?;
    let report = evaluate(&pred, &gt, &cfg.eval)?;
    if let Some(p) = &args.csv {
        report.write_csv(p)?;
    }
    if let Some(p) = &args.out {
        report.write_json(p)?;
    }
    println!("mAP {:.4}  AP50 {:.4}  AP25 {:.4}", report.map, report.ap50, report.ap25);
    Ok(())
}

fn occlude(args: &OccludeArgs, g: &Global) -> Result<()> {
    let paths = ScenePaths::from_dir(&args.scene);
    let views = sio::cameras::read_cameras(&paths.cameras)?;
    let all = masks::read_masks(&paths.masks, &views)?;
    let dropped = patch_drop(&all, args.percent, g.seed.unwrap_or(0))?;
    masks::write_masks(&args.out, &views, &dropped)?;
    println!("{} of {} masks survive, written to {}", dropped.len(), all.len(), args.out.display());
    Ok(())
}

fn search(args: &SearchArgs, g: &Global) -> Result<()> {
    let cfg = pipeline_config(g)?;
    let paths = ScenePaths::from_dir(&args.scene);
    let scene = sio::load_scene(&paths)?;
    let query = TextQuery::load(&args.query)?;
    let ids: Vec<&str> = scene
        .views
        .iter()
        .map(|v| v.view_id())
        .filter(|id| args.features.join(format!("{id}.pf3d")).exists())
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no feature map for any view of the scene",
            args.features.display()
        )));
    }
    let source = PixelFeatureSource::load(&args.features, &ids)?;
    let views: Vec<usize> = ids.iter().filter_map(|id| scene.view_index(id)).collect();
    let mappings = map_stage(&scene, &views, &cfg.mapping)?;
    let point_features = aggregate_point_features(&mappings, &source)?;
    let proposals = read_instances(&args.instances)?;
    let mut feats = Vec::with_capacity(proposals.len());
    for (k, p) in proposals.instances.iter().enumerate() {
        match proposal_feature(p, &point_features) {
            Ok(f) => feats.push(f),
            Err(Error::Undefined(m)) => {
                tracing::warn!(proposal = k, "{m}");
                feats.push(vec![0.0; point_features.dim]);
            }
            Err(e) => return Err(e),
        }
    }
    let ranked = rank_by_query(&feats, &query)?;
    println!("query `{}`", query.query);
    for (k, score) in ranked.iter().take(args.top) {
        println!("{k:>5}  {score:.4}  {} points", proposals.instances[*k].len());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(a, g),
        Command::Map(a) => stage(StageName::Map, a, g),
        Command::Filter(a) => stage(StageName::Filter, a, g),
        Command::Lift(a) => stage(StageName::Lift, a, g),
        Command::Split(a) => stage(StageName::Split, a, g),
        Command::Grow(a) => stage(StageName::Grow, a, g),
        Command::Merge(a) => stage(StageName::Merge, a, g),
        Command::Run(a) => run(a, g),
        Command::Eval(a) => eval(a, g),
        Command::Occlude(a) => occlude(a, g),
        Command::Search(a) => search(a, g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.global.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
