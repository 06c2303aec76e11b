//! Batch subcommands. Each one reads its inputs, runs the shared pipeline in
//! `orchard_core` and writes artifacts; nothing here computes results itself.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use orchard_core::count::ingest_external_counts;
use orchard_core::data_io::{
    load_bbox_annotations, load_clicks, load_color_model, load_detections, load_manifest, load_pipeline_config,
    load_polygon_annotations, load_side_model, polygon_bbox, save_bbox_annotations, save_clicks, save_color_model,
    save_curves, save_document, save_manifest, save_pipeline_config, write_detections, write_report,
    write_side_model, write_text, BoxAnnotation, DatasetManifest, FrameEntry, ManifestSide, SceneBundle,
};
use orchard_core::detect::{Detection, Provenance, SupervisionSession};
use orchard_core::eval::{counting_confusion, curve_csv, metrics_over_iou_grid, render_metric_svg, FrameBoxes, Metric};
use orchard_core::imaging::{connected_components, rgb_to_lab, BinaryMask, Connectivity, LabImage, RgbImage};
use orchard_core::pipeline::{
    attach_masks, classify_all, detect_frame, resolve_side, simulated_user_clicks, small_frame_detect_config,
    spread_indices, PipelineConfig,
};
use orchard_core::yieldmap::{aggregate_track_count, render_yield_table, simulate_scene, SceneParams, SideModel};
use serde::Serialize;
use tracing::{info, warn};

/// Seed used when none is given, so that unattended runs are reproducible.
pub const DEFAULT_SEED: u64 = 0;

/// Frames classified together; bounds memory on full-resolution video.
const DETECT_CHUNK: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "orchard", version, about = "Apple detection, counting and yield estimation from orchard video")]
pub struct Cli {
    /// Log filter, e.g. `info` or `orchard_core=debug`.
    #[arg(long, global = true, env = "ORCHARD_LOG", default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate dataset inputs and convert them to pipeline formats.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Fit color classes over a set of frames and label them from recorded clicks.
    TrainColorModel(TrainArgs),
    /// Segment apples in every frame of a manifest.
    Detect(DetectArgs),
    /// Count fruit in every cluster track of a scene.
    Count(CountArgs),
    /// Precision, recall and F1 over the IoU grid, plus count confusion.
    Evaluate(EvaluateArgs),
    /// Merge both sides of one or more scenes into a yield table.
    Yield(YieldArgs),
    /// Render a synthetic orchard row with ground truth.
    Simulate(SimulateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Configuration shared by the commands that fit models. Values given as
/// flags take precedence over the configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Pipeline configuration (JSON, as written by `simulate`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every EM fit [default: the file's seed, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub slic_target: Option<usize>,
    #[arg(long)]
    pub compactness: Option<f64>,
    /// Number of color classes.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub kl_threshold: Option<f64>,
    /// Smallest reported detection, in pixels.
    #[arg(long)]
    pub min_area: Option<usize>,
    #[arg(long)]
    pub em_iterations: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_pipeline_config(p)?,
            None => PipelineConfig::default().with_seed(DEFAULT_SEED),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        let d = &mut cfg.detect;
        if let Some(v) = self.slic_target {
            d.slic.target_count = v;
        }
        if let Some(v) = self.compactness {
            d.slic.compactness = v;
        }
        if let Some(v) = self.components {
            d.components = v;
        }
        if let Some(v) = self.kl_threshold {
            d.kl_threshold = v;
        }
        if let Some(v) = self.min_area {
            d.min_area = v;
        }
        if let Some(v) = self.em_iterations {
            d.em.max_iterations = v;
            cfg.count.em.max_iterations = v;
        }
        cfg.validate().map_err(anyhow::Error::msg).context("invalid configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum IngestCommand {
    /// Check a manifest and convert its polygon annotations to boxes.
    Annotations {
        #[arg(long)]
        manifest: PathBuf,
        /// Box annotation file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach externally produced per-cluster counts (JSON lines
    /// `{"cluster_id", "count"}`) to a scene.
    Counts {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProvenanceArg {
    UserSupervised,
    SemiSupervised,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::UserSupervised => Provenance::UserSupervised,
            ProvenanceArg::SemiSupervised => Provenance::SemiSupervised,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest of the frames the clicks were made on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Recorded clicks (JSON lines `{"frame", "x", "y", "label"}`), replayed in order.
    #[arg(long)]
    pub clicks: PathBuf,
    #[arg(long, value_enum, default_value_t = ProvenanceArg::UserSupervised)]
    pub provenance: ProvenanceArg,
    /// Color model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; receives `detections.jsonl` and `masks/<frame>.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory of `<frame>.png` apple masks (from `detect`). Without it the
    /// scene's own cluster patches are counted.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Keep counts that are already set, e.g. ingested ones.
    #[arg(long)]
    pub only_unresolved: bool,
    /// Scene file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub dataset: String,
    pub method: String,
    pub detections: PathBuf,
    pub ground_truth: PathBuf,
}

fn parse_run(s: &str) -> Result<EvalRun, String> {
    let parts: Vec<&str> = s.splitn(4, ',').collect();
    match parts.as_slice() {
        [d, m, det, gt] if !d.is_empty() && !m.is_empty() => Ok(EvalRun {
            dataset: d.to_string(),
            method: m.to_string(),
            detections: det.into(),
            ground_truth: gt.into(),
        }),
        _ => Err("expected DATASET,METHOD,DETECTIONS,GROUND_TRUTH".into()),
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// DATASET,METHOD,DETECTIONS,GROUND_TRUTH. Repeat to add curves; each
    /// dataset becomes one plot panel.
    #[arg(long = "run", required = true, value_parser = parse_run)]
    pub runs: Vec<EvalRun>,
    /// Lines of `predicted true` cluster counts for a confusion matrix.
    #[arg(long)]
    pub count_pairs: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct YieldArgs {
    /// Scene with resolved counts; repeat for more table rows.
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long, default_value = "GMM")]
    pub method: String,
    /// Harvested count, overriding the one stored in a single scene.
    #[arg(long)]
    pub harvested: Option<usize>,
    /// Output stem; writes `<stem>.json` and `<stem>.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Output directory (a dataset directory the service can serve).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sim")]
    pub dataset: String,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub fruits_per_tree: Option<usize>,
    #[arg(long)]
    pub both_side_fraction: Option<f64>,
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    #[arg(long)]
    pub ground_tracks_per_tree: Option<usize>,
    #[arg(long)]
    pub views_per_track: Option<usize>,
    #[arg(long)]
    pub frame_size: Option<u32>,
    /// Frames, spread over the video, that the scripted annotator labels.
    #[arg(long, default_value_t = 10)]
    pub session_frames: usize,
    /// Click budget of the scripted annotator.
    #[arg(long, default_value_t = 20)]
    pub clicks: usize,
    /// The annotator considers every n-th apple pixel.
    #[arg(long, default_value_t = 7)]
    pub click_stride: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding `datasets/`, `sessions/`, `models/` and `reports/`.
    #[arg(long, env = "ORCHARD_DATA_ROOT")]
    pub data_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(IngestCommand::Annotations { manifest, out }) => ingest_annotations(&manifest, &out),
        Command::Ingest(IngestCommand::Counts { scene, counts, out }) => ingest_counts(&scene, &counts, &out),
        Command::TrainColorModel(a) => train_color_model(&a),
        Command::Detect(a) => detect(&a),
        Command::Count(a) => count(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Yield(a) => yield_table(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Serve(a) => {
            info!(data_root = %a.data_root.display(), addr = %a.addr, "serve");
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(a.data_root, a.addr))
        }
    }
}

fn log_config(command: &str, cfg: &PipelineConfig) {
    info!(
        seed = cfg.detect.em.rng_seed,
        config = %serde_json::to_string(cfg).unwrap_or_default(),
        "{command}"
    );
}

/// Frame ids become file names, so they must be plain path segments.
pub fn check_id(kind: &str, id: &str) -> Result<()> {
    ensure!(
        !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']),
        "{kind} id {id:?} cannot be used as a file name"
    );
    Ok(())
}

pub fn load_lab(entry: &FrameEntry) -> Result<LabImage> {
    let rgb = RgbImage::load_png(&entry.path).with_context(|| format!("frame {:?}", entry.id))?;
    Ok(rgb_to_lab(&rgb))
}

fn ingest_annotations(manifest: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let Some(path) = &m.annotations else {
        bail!("{}: manifest has no annotations file", manifest.display());
    };
    let (polygons, warnings) = load_polygon_annotations(path)?;
    for w in &warnings {
        warn!("{w}");
    }
    let mut boxes = Vec::new();
    for a in polygons {
        let Some(entry) = m.frame(&a.frame) else {
            warn!(frame = %a.frame, "annotated frame is not in the manifest; skipped");
            continue;
        };
        let img = RgbImage::load_png(&entry.path)?;
        let (w, h) = (img.width(), img.height());
        let mut frame_boxes = Vec::new();
        for (i, p) in a.polygons.iter().enumerate() {
            match polygon_bbox(p, w, h) {
                Some(b) => frame_boxes.push(b),
                None => warn!(frame = %a.frame, region = i, "polygon lies outside the frame; skipped"),
            }
        }
        boxes.push(BoxAnnotation {
            frame: a.frame,
            width: w,
            height: h,
            boxes: frame_boxes,
        });
    }
    boxes.sort_by(|a, b| a.frame.cmp(&b.frame));
    save_bbox_annotations(out, &boxes)?;
    info!(
        dataset = %m.dataset,
        frames = m.frames.len(),
        annotated = boxes.len(),
        objects = boxes.iter().map(|b| b.boxes.len()).sum::<usize>(),
        "wrote {}",
        out.display()
    );
    Ok(())
}

fn ingest_counts(scene: &Path, counts: &Path, out: &Path) -> Result<()> {
    let mut bundle = load_side_model(scene)?;
    let known: HashSet<String> = all_tracks(&bundle).map(|t| t.id.clone()).collect();
    let file = fs::File::open(counts).with_context(|| format!("{}", counts.display()))?;
    let ingested =
        ingest_external_counts(BufReader::new(file), &known).with_context(|| format!("{}", counts.display()))?;
    for side in [&mut bundle.front, &mut bundle.back] {
        for t in &mut side.tracks {
            if let Some(&c) = ingested.get(&t.id) {
                t.count = Some(c);
            }
        }
    }
    let unresolved = all_tracks(&bundle).filter(|t| t.count.is_none()).count();
    write_side_model(out, &bundle)?;
    info!(ingested = ingested.len(), unresolved, "wrote {}", out.display());
    Ok(())
}

fn all_tracks(b: &SceneBundle) -> impl Iterator<Item = &orchard_core::yieldmap::ClusterTrack> {
    b.front.tracks.iter().chain(&b.back.tracks)
}

/// Builds a session over the manifest's frames, replays the clicks and
/// finalizes. The HTTP service reaches the same model through the same calls.
pub fn train_from_clicks(
    manifest: &DatasetManifest,
    clicks: &[orchard_core::detect::ClickRecord],
    cfg: &PipelineConfig,
    provenance: Provenance,
) -> Result<orchard_core::detect::ColorModel> {
    let frames = manifest
        .frames
        .iter()
        .map(|f| Ok((f.id.clone(), load_lab(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut session = SupervisionSession::new(manifest.dataset.clone(), frames, &cfg.detect)?;
    session.apply_clicks(clicks)?;
    Ok(session.finalize_model(provenance)?)
}

fn train_color_model(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    log_config("train-color-model", &cfg);
    let manifest = load_manifest(&a.manifest)?;
    let clicks = load_clicks(&a.clicks)?;
    let model = train_from_clicks(&manifest, &clicks, &cfg, a.provenance.into())?;
    save_color_model(&a.out, &model)?;
    info!(
        frames = manifest.frames.len(),
        clicks = clicks.len(),
        apple_components = model.apple_components().count(),
        "wrote {}",
        a.out.display()
    );
    Ok(())
}

fn detect(a: &DetectArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    log_config("detect", &cfg);
    let manifest = load_manifest(&a.manifest)?;
    let model = load_color_model(&a.model)?;
    for f in &manifest.frames {
        check_id("frame", &f.id)?;
    }
    let mask_dir = a.out.join("masks");
    fs::create_dir_all(&mask_dir).with_context(|| format!("{}", mask_dir.display()))?;
    let mut detections: Vec<Detection> = Vec::new();
    for chunk in manifest.frames.chunks(DETECT_CHUNK) {
        let frames = chunk
            .iter()
            .map(|f| Ok((f.id.clone(), load_lab(f)?)))
            .collect::<Result<Vec<_>>>()?;
        let masks = classify_all(&frames, &model, &cfg.detect)?;
        for (id, _) in &frames {
            let mask = &masks[id];
            mask.save_png(mask_dir.join(format!("{id}.png")))?;
            detections.extend(orchard_core::detect::detections_from_mask(id, mask, cfg.detect.min_area));
        }
    }
    let path = a.out.join("detections.jsonl");
    write_detections(&path, &detections)?;
    info!(frames = manifest.frames.len(), detections = detections.len(), "wrote {}", a.out.display());
    Ok(())
}

/// One frame through the same path the HTTP detect endpoint uses.
pub fn detect_one(entry: &FrameEntry, model: &orchard_core::detect::ColorModel, cfg: &PipelineConfig) -> Result<orchard_core::pipeline::FrameResult> {
    Ok(detect_frame(&entry.id, &load_lab(entry)?, model, &cfg.detect)?)
}

fn patch_frames(side: &SideModel) -> impl Iterator<Item = &str> {
    side.tracks.iter().flat_map(|t| {
        t.observations.iter().filter_map(|o| match o.source {
            orchard_core::yieldmap::ObservationSource::Patch(_) => Some(o.frame.as_str()),
            orchard_core::yieldmap::ObservationSource::Count(_) => None,
        })
    })
}

fn count(a: &CountArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    log_config("count", &cfg);
    let mut bundle = load_side_model(&a.scene)?;
    if let Some(dir) = &a.masks {
        let frames: HashSet<&str> = patch_frames(&bundle.front).chain(patch_frames(&bundle.back)).collect();
        let mut masks = HashMap::new();
        for frame in frames {
            check_id("frame", frame)?;
            let path = dir.join(format!("{frame}.png"));
            let mask = BinaryMask::load_png(&path).with_context(|| format!("mask for frame {frame:?}"))?;
            masks.insert(frame.to_string(), mask);
        }
        attach_masks(&mut bundle.front, &masks);
        attach_masks(&mut bundle.back, &masks);
    }
    for side in [&mut bundle.front, &mut bundle.back] {
        if a.only_unresolved {
            for t in side.tracks.iter_mut().filter(|t| t.count.is_none()) {
                t.count = Some(aggregate_track_count(t, |o| match &o.source {
                    orchard_core::yieldmap::ObservationSource::Patch(p) => {
                        orchard_core::count::count_cluster(p, &cfg.count).count
                    }
                    orchard_core::yieldmap::ObservationSource::Count(c) => *c,
                }));
            }
        } else {
            resolve_side(side, &cfg.count);
        }
    }
    write_side_model(&a.out, &bundle)?;
    info!(
        front = bundle.front.total()?,
        back = bundle.back.total()?,
        "wrote {}",
        a.out.display()
    );
    Ok(())
}

fn file_stem_for(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    info!(runs = a.runs.len(), "evaluate");
    let mut curves = Vec::new();
    for run in &a.runs {
        let detections = load_detections(&run.detections)?;
        let truth = load_bbox_annotations(&run.ground_truth)?;
        let mut by_frame: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for d in &detections {
            by_frame.entry(d.frame.as_str()).or_default().push(d.bbox);
        }
        let frames: Vec<FrameBoxes> = truth
            .iter()
            .map(|t| FrameBoxes {
                frame: t.frame.clone(),
                detections: by_frame.remove(t.frame.as_str()).unwrap_or_default(),
                ground_truth: t.boxes.clone(),
            })
            .collect();
        if !by_frame.is_empty() {
            warn!(
                dataset = %run.dataset,
                frames = by_frame.len(),
                "detections on frames without ground truth are ignored"
            );
        }
        let curve = metrics_over_iou_grid(&run.dataset, &run.method, &frames)
            .with_context(|| format!("run {},{}", run.dataset, run.method))?;
        let csv = a
            .out
            .join("curves")
            .join(format!("{}__{}.csv", file_stem_for(&run.dataset), file_stem_for(&run.method)));
        write_text(&csv, &curve_csv(&curve))?;
        curves.push(curve);
    }
    save_curves(a.out.join("metrics.json"), &curves)?;
    for (metric, name) in [(Metric::Precision, "precision"), (Metric::Recall, "recall"), (Metric::F1, "f1")] {
        write_text(a.out.join(format!("{name}.svg")), &render_metric_svg(&curves, metric))?;
    }
    if let Some(path) = &a.count_pairs {
        let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
            let [p, t] = nums[..] else {
                bail!("{}:{}: expected `predicted true`", path.display(), i + 1);
            };
            pred.push(p);
            truth.push(t);
        }
        let confusion = counting_confusion(&pred, &truth)?;
        write_text(a.out.join("confusion.csv"), &confusion.to_csv())?;
        info!(accuracy = confusion.accuracy(), "count confusion over {} clusters", confusion.total());
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

fn yield_table(a: &YieldArgs) -> Result<()> {
    ensure!(
        a.harvested.is_none() || a.scenes.len() == 1,
        "--harvested applies to a single scene"
    );
    info!(scenes = a.scenes.len(), method = %a.method, "yield");
    let mut reports = Vec::new();
    for path in &a.scenes {
        let b = load_side_model(path)?;
        let harvested = a.harvested.or(b.harvested);
        let report = orchard_core::pipeline::yield_report(&b.dataset, &a.method, &b.front, &b.back, &b.overlaps, harvested)
            .with_context(|| format!("{}", path.display()))?;
        reports.push(report);
    }
    let (json, _) = write_report(&a.out, &reports)?;
    print!("{}", render_yield_table(&reports));
    info!("wrote {}", json.display());
    Ok(())
}

#[derive(Serialize)]
struct SimulationRecord<'a> {
    seed: u64,
    params: &'a SceneParams,
    truth: usize,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let d = SceneParams::default();
    let params = SceneParams {
        trees: a.trees.unwrap_or(d.trees),
        fruits_per_tree: a.fruits_per_tree.unwrap_or(d.fruits_per_tree),
        both_side_fraction: a.both_side_fraction.unwrap_or(d.both_side_fraction),
        occlusion_rate: a.occlusion_rate.unwrap_or(d.occlusion_rate),
        ground_tracks_per_tree: a.ground_tracks_per_tree.unwrap_or(d.ground_tracks_per_tree),
        views_per_track: a.views_per_track.unwrap_or(d.views_per_track),
        frame_size: a.frame_size.unwrap_or(d.frame_size),
    };
    check_id("dataset", &a.dataset)?;
    info!(seed = a.seed, params = %serde_json::to_string(&params)?, "simulate");
    let scene = simulate_scene(a.seed, &params)?;
    let cfg = PipelineConfig {
        detect: small_frame_detect_config(params.frame_size, params.frame_size),
        ..PipelineConfig::default()
    }
    .with_seed(a.seed);

    let out = &a.out;
    for dir in [out.join("frames"), out.join("truth")] {
        fs::create_dir_all(&dir).with_context(|| format!("{}", dir.display()))?;
    }
    let mut entries = Vec::new();
    let mut truth_boxes = Vec::new();
    for f in &scene.frames {
        let rel = PathBuf::from("frames").join(format!("{}.png", f.id));
        f.image.save_png(out.join(&rel))?;
        f.apple_mask.save_png(out.join("truth").join(format!("{}.png", f.id)))?;
        let set = connected_components(&f.apple_mask, Connectivity::Eight);
        truth_boxes.push(BoxAnnotation {
            frame: f.id.clone(),
            width: f.image.width(),
            height: f.image.height(),
            boxes: set.components.iter().map(|c| c.bbox).collect(),
        });
        entries.push(FrameEntry { id: f.id.clone(), path: rel });
    }
    let manifest = DatasetManifest {
        dataset: a.dataset.clone(),
        side: ManifestSide::Single,
        frames: entries.clone(),
        annotations: None,
        harvested: Some(scene.truth),
    };
    save_manifest(out.join("manifest.json"), &manifest)?;

    let picked = spread_indices(scene.frames.len(), a.session_frames);
    let train = DatasetManifest {
        frames: picked.iter().map(|&i| entries[i].clone()).collect(),
        harvested: None,
        ..manifest
    };
    save_manifest(out.join("train_manifest.json"), &train)?;
    let session_frames = picked
        .iter()
        .map(|&i| (scene.frames[i].id.clone(), rgb_to_lab(&scene.frames[i].image)))
        .collect();
    let mut session = SupervisionSession::new(a.dataset.clone(), session_frames, &cfg.detect)?;
    let truth: Vec<_> = picked
        .iter()
        .map(|&i| (scene.frames[i].id.clone(), scene.frames[i].apple_mask.clone()))
        .collect();
    let clicks = simulated_user_clicks(&mut session, &truth, a.clicks, a.click_stride)?;
    save_clicks(out.join("clicks.jsonl"), &clicks)?;

    save_bbox_annotations(out.join("ground_truth.json"), &truth_boxes)?;
    save_pipeline_config(out.join("config.json"), &cfg)?;
    write_side_model(
        out.join("scene.json"),
        &SceneBundle {
            dataset: a.dataset.clone(),
            harvested: Some(scene.truth),
            front: scene.front,
            back: scene.back,
            overlaps: scene.overlaps,
        },
    )?;
    save_document(
        out.join("simulation.json"),
        &SimulationRecord {
            seed: a.seed,
            params: &params,
            truth: scene.truth,
        },
    )?;
    info!(
        frames = scene.frames.len(),
        clicks = clicks.len(),
        truth = scene.truth,
        "wrote {}",
        out.display()
    );
    Ok(())
}
