//! Command-line pipeline: synth, train, refine, render, extract, eval.
//!
//! Every command reads from and writes into a run directory. Input paths
//! default to the file the previous stage wrote there and can be overridden
//! individually.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eval::{evaluate_views, gaussian_accuracy, Protocol};
use crate::projection::project;
use crate::rasterizer::{render_color, render_semantic, SH_C0};
use crate::refine::{filter_all_classes, knn_refine, segment, select_ambiguous, RefineConfig, Segmentation};
use crate::scene_io::{
    load_cameras, load_label_map, load_scene, probe_code_count, save_cameras, save_label_map, save_scene, CameraRecord,
    LabelMap, Scene,
};
use crate::synthetic::{generate, one_hot_scene, planted_label_map, SynthSpec};
use crate::trainer::{train, OptimizerKind, TrainConfig, TrainView};

#[derive(Debug, Parser)]
#[command(
    name = "gsseg",
    version,
    about = "Segment 3D Gaussian splatting scenes from posed 2D masks"
)]
pub struct Cli {
    /// Worker threads for rendering and refinement (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with [train], [refine] and [eval] tables; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic scene with cameras and masks.
    Synth(SynthArgs),
    /// Learn per-Gaussian object codes from masks.
    Train(TrainArgs),
    /// KNN code averaging followed by per-class outlier filtering.
    Refine(RefineArgs),
    /// Render label maps and colors for a set of cameras.
    Render(RenderArgs),
    /// Write the Gaussians of selected classes to a new PLY.
    Extract(ExtractArgs),
    /// Score rendered label maps against ground-truth masks.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Demo {
    TwoBlob,
    ThreeBlob,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Fixture description in TOML.
    #[arg(long, conflicts_with = "demo", required_unless_present = "demo")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub demo: Option<Demo>,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Novel-pose cameras written under heldout/.
    #[arg(long, default_value_t = 4)]
    pub held_out: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Default: <run>/scene.ply
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Default: <run>/cameras.json
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Default: <run>/masks
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Class count; read from the scene's obj_code properties when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Blend raw codes instead of their softmax.
    #[arg(long)]
    pub raw_codes: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Default: <run>/trained.ply
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub filter_k: Option<usize>,
    #[arg(long)]
    pub filter_std_mult: Option<f64>,
    #[arg(long)]
    pub no_knn: bool,
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Default: <run>/refined.ply
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Default: <run>/cameras.json
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Render hard labels from this segmentation instead of the codes.
    #[arg(long)]
    pub segmentation: Option<PathBuf>,
    /// Default: <run>/renders
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also write one probability PGM per class.
    #[arg(long)]
    pub probabilities: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Class ids to keep, comma separated.
    #[arg(long = "class", value_delimiter = ',', required = true)]
    pub class_ids: Vec<u32>,
    /// Default: <run>/refined.ply
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Default: <run>/segmentation.json
    #[arg(long)]
    pub segmentation: Option<PathBuf>,
    /// Default: <run>/extracted.ply
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Default: <run>/refined.ply
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Render hard labels from this segmentation instead of the codes.
    #[arg(long)]
    pub segmentation: Option<PathBuf>,
    /// Default: <run>/cameras.json
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Ground truth. Default: <run>/masks
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Score these label PNGs instead of rendering the scene.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Per-Gaussian labels for Gaussian-level accuracy. Default: <run>/planted_labels.json if present.
    #[arg(long)]
    pub planted: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub no_background: bool,
    /// Default: <run>/metrics.json
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub include_background: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            protocol: Protocol::Pooled,
            include_background: true,
        }
    }
}

/// Settings shared by all commands, as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threads: Option<usize>,
    pub classes: Option<usize>,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, missing inputs or invalid configuration.
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(msg) => CliError::Usage(msg),
            e => CliError::Runtime(e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn or_default(path: &Option<PathBuf>, run: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| run.join(name))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    require(path, what)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn open_scene(path: &Path, classes: Option<usize>) -> CliResult<Scene> {
    require(path, "scene")?;
    let k = match classes {
        Some(k) => k,
        None => match probe_code_count(path)? {
            0 => {
                return Err(CliError::Usage(format!(
                    "{} has no obj_code properties; pass --classes",
                    path.display()
                )))
            }
            k => k,
        },
    };
    Ok(load_scene(path, k)?)
}

fn mask_path(dir: &Path, id: u32) -> Option<PathBuf> {
    [format!("{id:04}.png"), format!("{id}.png")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
}

fn load_masks(dir: &Path, cameras: &[CameraRecord], classes: usize) -> CliResult<Vec<LabelMap>> {
    require(dir, "masks directory")?;
    cameras
        .iter()
        .map(|r| {
            let path = mask_path(dir, r.id)
                .ok_or_else(|| CliError::Usage(format!("no mask for view {} in {}", r.id, dir.display())))?;
            Ok(load_label_map(path, classes)?)
        })
        .collect()
}

fn open_cameras(path: &Path) -> CliResult<Vec<CameraRecord>> {
    require(path, "camera file")?;
    Ok(load_cameras(path)?)
}

/// Per-Gaussian class assignment as stored in segmentation.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationFile {
    pub class_names: Vec<String>,
    pub class_of: Vec<u32>,
    pub confidence: Vec<f64>,
    /// Gaussians moved to background by outlier filtering.
    pub filtered: Vec<usize>,
}

impl SegmentationFile {
    pub fn segmentation(&self) -> Segmentation {
        Segmentation {
            class_of: self.class_of.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

fn open_segmentation(path: &Path, scene: &Scene) -> CliResult<Segmentation> {
    let file: SegmentationFile = read_json(path, "segmentation")?;
    if file.class_of.len() != scene.len() || file.confidence.len() != scene.len() {
        return Err(CliError::Usage(format!(
            "{} covers {} gaussians, the scene has {}",
            path.display(),
            file.class_of.len(),
            scene.len()
        )));
    }
    if let Some(&c) = file.class_of.iter().find(|&&c| c as usize >= scene.classes()) {
        return Err(CliError::Usage(format!(
            "{} refers to unknown class {c}",
            path.display()
        )));
    }
    Ok(file.segmentation())
}

const PALETTE: [[f64; 3]; 10] = [
    [0.5, 0.5, 0.5],
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.75, 0.10],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.55, 0.35, 0.15],
    [0.95, 0.45, 0.70],
];

pub fn class_color(class_id: u32) -> [f64; 3] {
    PALETTE[class_id as usize % PALETTE.len()]
}

/// Copy of `scene` with every Gaussian colored by its class.
pub fn colorize(scene: &Scene, seg: &Segmentation) -> Scene {
    let mut out = scene.clone();
    for (g, &c) in out.gaussians.iter_mut().zip(&seg.class_of) {
        g.color_dc = nalgebra::Vector3::from(class_color(c)).map(|v| (v - 0.5) / SH_C0);
        g.sh_rest.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

fn label_visualization(map: &LabelMap) -> image::RgbImage {
    let raw = map
        .labels
        .iter()
        .flat_map(|&l| class_color(l).map(|v| (v * 255.0).round() as u8))
        .collect();
    image::RgbImage::from_raw(map.width, map.height, raw).expect("dimensions match")
}

fn save_png(img: &image::RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(|source| {
        CliError::Runtime(Error::Image {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Parses arguments and runs the command inside a pool of the requested size.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    let threads = config.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args, &config),
        Command::Refine(args) => cmd_refine(args, &config),
        Command::Render(args) => cmd_render(args, &config),
        Command::Extract(args) => cmd_extract(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
    })
}

fn write_views(dir: &Path, cameras: &[CameraRecord], masks: &[LabelMap]) -> CliResult<()> {
    let mask_dir = dir.join("masks");
    create_dir(&mask_dir)?;
    save_cameras(cameras, dir.join("cameras.json"))?;
    for (record, mask) in cameras.iter().zip(masks) {
        save_label_map(mask, mask_dir.join(format!("{:04}.png", record.id)))?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = match (&args.spec, args.demo) {
        (Some(path), _) => {
            require(path, "fixture spec")?;
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(Demo::TwoBlob)) => SynthSpec::two_blob(7),
        (None, Some(Demo::ThreeBlob)) => SynthSpec::three_blob(7),
        (None, None) => return Err(CliError::Usage("pass --spec or --demo".into())),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let fixture = generate(&spec)?;
    create_dir(&args.run)?;

    save_scene(&fixture.scene, args.run.join("scene.ply"))?;
    let (cameras, masks): (Vec<_>, Vec<_>) = fixture
        .views
        .into_iter()
        .map(|v| {
            (
                CameraRecord {
                    id: v.id,
                    camera: v.camera,
                },
                v.labels,
            )
        })
        .unzip();
    write_views(&args.run, &cameras, &masks)?;
    write_json(&fixture.planted, &args.run.join("planted_labels.json"))?;

    if args.held_out > 0 {
        let cameras: Vec<CameraRecord> = spec
            .held_out_cameras(args.held_out)?
            .into_iter()
            .enumerate()
            .map(|(i, camera)| CameraRecord { id: i as u32, camera })
            .collect();
        let masks: Vec<LabelMap> = cameras
            .iter()
            .map(|r| planted_label_map(&fixture.scene, &fixture.planted, &r.camera))
            .collect();
        write_views(&args.run.join("heldout"), &cameras, &masks)?;
    }
    let spec_text = toml::to_string(&spec).expect("serializable");
    fs::write(args.run.join("spec.toml"), spec_text).map_err(|e| CliError::Runtime(Error::io(&args.run, e)))?;
    println!(
        "wrote {} gaussians, {} views and {} held-out views to {}",
        fixture.scene.len(),
        cameras.len(),
        args.held_out,
        args.run.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, config: &PipelineConfig) -> CliResult<()> {
    let scene_path = or_default(&args.scene, &args.run, "scene.ply");
    let cameras = open_cameras(&or_default(&args.cameras, &args.run, "cameras.json"))?;
    let masks_dir = or_default(&args.masks, &args.run, "masks");
    require(&masks_dir, "masks directory")?;
    let mut scene = open_scene(&scene_path, args.classes.or(config.classes))?;
    let masks = load_masks(&masks_dir, &cameras, scene.classes())?;

    let mut cfg = config.train.clone();
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(opt) = args.optimizer {
        cfg.optimizer = opt;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if args.raw_codes {
        cfg.normalize_codes = false;
    }

    let views = cameras
        .iter()
        .zip(masks)
        .map(|(r, m)| TrainView::new(r.id, r.camera.clone(), m, scene.classes()))
        .collect::<Result<Vec<_>, _>>()?;
    let every = (cfg.iterations / 10).max(1);
    let report = train(&mut scene, &views, &cfg, &mut |p| {
        if (p.iteration + 1) % every == 0 {
            log::info!("iteration {}/{}: loss {:.6}", p.iteration + 1, p.iterations, p.loss);
        }
    })?;

    create_dir(&args.run)?;
    save_scene(&scene, args.run.join("trained.ply"))?;
    write_json(&report, &args.run.join("report.json"))?;
    println!(
        "trained {} iterations over {} views in {:.2} s, loss {:.6} -> {:.6}",
        report.iterations,
        views.len(),
        report.wall_clock_seconds,
        report.initial_loss,
        report.final_loss
    );
    Ok(())
}

pub fn cmd_refine(args: &RefineArgs, config: &PipelineConfig) -> CliResult<()> {
    let scene = open_scene(
        &or_default(&args.scene, &args.run, "trained.ply"),
        args.classes.or(config.classes),
    )?;
    let mut cfg = config.refine.clone();
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.filter_k {
        cfg.filter_k = v;
    }
    if let Some(v) = args.filter_std_mult {
        cfg.filter_std_mult = v;
    }
    cfg.validate()?;

    let started = Instant::now();
    let refined = if args.no_knn {
        scene
    } else {
        let ambiguous = select_ambiguous(&scene, cfg.beta).len();
        let refined = knn_refine(&scene, &cfg)?;
        println!("knn: re-estimated {ambiguous} ambiguous gaussians");
        refined
    };
    let seg = segment(&refined);
    let (seg, filtered) = if args.no_filter {
        (seg, Vec::new())
    } else {
        let (merged, outcomes) = filter_all_classes(&refined, &seg, &cfg)?;
        let mut filtered = Vec::new();
        for o in &outcomes {
            if o.too_small {
                println!(
                    "filter: class {} has only {} members, skipped",
                    o.class_id,
                    o.members.len()
                );
            } else {
                println!(
                    "filter: class {} removed {} of {}",
                    o.class_id,
                    o.removed.len(),
                    o.members.len()
                );
            }
            filtered.extend(&o.removed);
        }
        filtered.sort_unstable();
        (merged, filtered)
    };

    save_scene(&refined, args.run.join("refined.ply"))?;
    save_scene(&colorize(&refined, &seg), args.run.join("segmented_colored.ply"))?;
    let file = SegmentationFile {
        class_names: refined.class_names().to_vec(),
        class_of: seg.class_of,
        confidence: seg.confidence,
        filtered,
    };
    write_json(&file, &args.run.join("segmentation.json"))?;
    let mut counts = vec![0usize; refined.classes()];
    for &c in &file.class_of {
        counts[c as usize] += 1;
    }
    println!(
        "refined in {:.3} s; gaussians per class: {counts:?}",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Label map of every camera rendered from the scene, or from hard labels
/// when a segmentation is given.
fn render_labels(
    scene: &Scene,
    seg: Option<&Segmentation>,
    cameras: &[CameraRecord],
    cfg: &TrainConfig,
) -> Vec<LabelMap> {
    let (source, normalize) = match seg {
        Some(seg) => (one_hot_scene(scene, &seg.class_of), false),
        None => (scene.clone(), cfg.normalize_codes),
    };
    cameras
        .iter()
        .map(|r| {
            let list = project(&source, &r.camera, &cfg.projection);
            render_semantic(&source, &list, normalize, &cfg.raster)
                .0
                .argmax_labels()
        })
        .collect()
}

pub fn cmd_render(args: &RenderArgs, config: &PipelineConfig) -> CliResult<()> {
    let scene = open_scene(
        &or_default(&args.scene, &args.run, "refined.ply"),
        args.classes.or(config.classes),
    )?;
    let cameras = open_cameras(&or_default(&args.cameras, &args.run, "cameras.json"))?;
    let seg = args
        .segmentation
        .as_ref()
        .map(|p| open_segmentation(p, &scene))
        .transpose()?;
    let out = or_default(&args.out_dir, &args.run, "renders");
    create_dir(&out)?;
    let cfg = &config.train;
    let started = Instant::now();
    let source = seg.as_ref().map(|s| one_hot_scene(&scene, &s.class_of));
    for r in &cameras {
        let list = project(&scene, &r.camera, &cfg.projection);
        let (semantic, _) = match &source {
            Some(s) => render_semantic(s, &list, false, &cfg.raster),
            None => render_semantic(&scene, &list, cfg.normalize_codes, &cfg.raster),
        };
        let labels = semantic.argmax_labels();
        let stem = format!("{:04}", r.id);
        save_label_map(&labels, out.join(format!("{stem}_labels.png")))?;
        save_png(
            &label_visualization(&labels),
            &out.join(format!("{stem}_labels_vis.png")),
        )?;
        save_png(
            &render_color(&scene, &list, &cfg.raster).to_rgb8(),
            &out.join(format!("{stem}_color.png")),
        )?;
        if args.probabilities {
            semantic.write_probability_pgms(&out, &stem)?;
        }
    }
    println!(
        "rendered {} views to {} in {:.3} s",
        cameras.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_extract(args: &ExtractArgs, config: &PipelineConfig) -> CliResult<()> {
    let scene = open_scene(
        &or_default(&args.scene, &args.run, "refined.ply"),
        args.classes.or(config.classes),
    )?;
    let seg = open_segmentation(&or_default(&args.segmentation, &args.run, "segmentation.json"), &scene)?;
    let extracted = crate::refine::extract_objects(&scene, &seg, &args.class_ids)?;
    let output = or_default(&args.output, &args.run, "extracted.ply");
    save_scene(&extracted, &output)?;
    println!(
        "extracted {} of {} gaussians (classes {:?}) to {}",
        extracted.len(),
        scene.len(),
        args.class_ids,
        output.display()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, config: &PipelineConfig) -> CliResult<()> {
    let cameras = open_cameras(&or_default(&args.cameras, &args.run, "cameras.json"))?;
    let masks_dir = or_default(&args.masks, &args.run, "masks");
    require(&masks_dir, "masks directory")?;

    let (class_names, predictions, scene_seg) = match &args.predictions {
        Some(dir) => {
            let k = args
                .classes
                .or(config.classes)
                .ok_or_else(|| CliError::Usage("--predictions needs --classes".into()))?;
            let preds = load_masks(dir, &cameras, k)?;
            (crate::scene_io::default_class_names(k), preds, None)
        }
        None => {
            let scene = open_scene(
                &or_default(&args.scene, &args.run, "refined.ply"),
                args.classes.or(config.classes),
            )?;
            let seg = args
                .segmentation
                .as_ref()
                .map(|p| open_segmentation(p, &scene))
                .transpose()?;
            let preds = render_labels(&scene, seg.as_ref(), &cameras, &config.train);
            let seg = seg.unwrap_or_else(|| segment(&scene));
            (scene.class_names().to_vec(), preds, Some(seg))
        }
    };
    let gt = load_masks(&masks_dir, &cameras, class_names.len())?;

    let protocol = args.protocol.unwrap_or(config.eval.protocol);
    let include_background = config.eval.include_background && !args.no_background;
    let pairs: Vec<(u32, LabelMap, LabelMap)> = cameras
        .iter()
        .zip(gt)
        .zip(predictions)
        .map(|((r, g), p)| (r.id, g, p))
        .collect();
    let mut report = evaluate_views(&pairs, &class_names, protocol, include_background)?;

    let planted_path = match &args.planted {
        Some(p) => Some(p.clone()),
        None => Some(args.run.join("planted_labels.json")).filter(|p| p.exists()),
    };
    if let (Some(path), Some(seg)) = (planted_path, &scene_seg) {
        let planted: Vec<u32> = read_json(&path, "planted labels")?;
        report.gaussian_accuracy = Some(gaussian_accuracy(seg, &planted)?);
    }

    let output = or_default(&args.output, &args.run, "metrics.json");
    if let Some(parent) = output.parent() {
        create_dir(parent)?;
    }
    write_json(&report, &output)?;
    println!("{report}");
    Ok(())
}
