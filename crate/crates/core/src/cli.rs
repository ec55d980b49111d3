//! Command-line pipeline: simulate | train | track | baseline | eval | plot.
//!
//! Every subcommand resolves its settings as defaults < JSON config file <
//! flags, writes the resolved settings as `<subcommand>.config.json` next
//! to its outputs, and can be rerun exactly from that snapshot via
//! `--config`. Exit codes: 0 success, 1 validation error, 2 I/O error.
//! `MCMOT_THREADS` sets the default worker count; `--threads` overrides.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    detections_from_gt, kf_track_sequence, read_detection_frames, write_detection_frames,
    Association, DetectionModel, KalmanConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, match_frames, write_report_csv, write_report_json, FrameMatching, MetricConfig,
};
use crate::records::{read_records, write_gt_records, write_track_records, TrackRecord};
use crate::sim::render::render_all;
use crate::sim::{build_scenario, count_multi_camera_events, gt_records, ScenarioConfig};
use crate::tensor::checkpoint;
use crate::tracker::train::{
    check_compatible, init_params, prepare_scenario, run_training_staged, scenario_family,
    stage_scenario, StepTrace, TrainConfig,
};
use crate::tracker::{run_inference, TrackerConfig};

#[derive(Parser)]
#[command(
    name = "mcmot",
    version,
    about = "Multi-camera 3D multi-object tracking: simulate, train, track, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: ground truth, detections, config.
    Simulate(SimulateArgs),
    /// Train the track-query decoder and write a checkpoint.
    Train(TrainArgs),
    /// Run the trained tracker over a scenario.
    Track(TrackArgs),
    /// Run a Kalman-filter baseline over a detection file.
    Baseline(BaselineArgs),
    /// Score predictions against ground truth with a recall sweep.
    Eval(EvalArgs),
    /// Draw BEV trajectories as SVG plus per-frame curves.
    Plot(PlotArgs),
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Track(args) => cmd_track(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn default_threads() -> usize {
    std::env::var("MCMOT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Sizes the global rayon pool used for per-clip frame rendering. If the
/// pool was already initialized in this process, the existing pool is kept.
fn init_global_pool(threads: usize) -> Result<()> {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global();
    Ok(())
}

/// Settings load order: struct defaults, then the whole JSON file if given.
fn load_settings<T: DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    match config {
        None => Ok(T::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::InvalidConfig(format!("config file {}: {e}", path.display()))
            })
        }
    }
}

/// Writes `<out>/<name>.config.json` capturing the fully resolved settings.
fn write_snapshot<T: Serialize>(out: &Path, name: &str, settings: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("{name}.config.json"));
    let json = serde_json::to_string_pretty(settings)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ScenarioConfig = serde_json::from_str(&text).map_err(|e| {
        Error::InvalidConfig(format!("scenario file {}: {e}", path.display()))
    })?;
    config.validate()?;
    Ok(config)
}

fn expand_scenario_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let entries = glob::glob(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad glob {pattern:?}: {e}")))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::InvalidArgument(format!("glob {pattern:?}: {e}")))?;
        paths.push(path);
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scenario files match {pattern:?}"
        )));
    }
    Ok(paths)
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of spawned objects.
    #[arg(long)]
    objects: Option<usize>,
    /// Forward ego speed in m/s (straight-line motion).
    #[arg(long)]
    ego_speed: Option<f64>,
    /// Gaussian center noise for the detection file, meters.
    #[arg(long)]
    det_pos_noise: Option<f64>,
    /// Gaussian yaw noise for the detection file, radians.
    #[arg(long)]
    det_yaw_noise: Option<f64>,
    /// Detection drop probability.
    #[arg(long)]
    det_drop_prob: Option<f64>,
    /// Score detections by range instead of constant 1.0.
    #[arg(long)]
    det_range_scored: bool,
    /// Also render and store the feature pyramids in checkpoint format.
    #[arg(long)]
    cache: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSettings {
    pub out: PathBuf,
    pub threads: usize,
    pub scenario: ScenarioConfig,
    pub detections: DetectionModel,
    pub cache: bool,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            out: PathBuf::from("out/simulate"),
            threads: default_threads(),
            scenario: ScenarioConfig::default(),
            detections: DetectionModel::noiseless(),
            cache: false,
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut s: SimulateSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(seed) = args.seed {
        s.scenario.seed = seed;
    }
    if let Some(frames) = args.frames {
        s.scenario.num_frames = frames;
    }
    if let Some(objects) = args.objects {
        s.scenario.spawn.count = objects;
    }
    if let Some(speed) = args.ego_speed {
        s.scenario.ego = crate::sim::EgoMotion::Straight { speed };
    }
    if let Some(v) = args.det_pos_noise {
        s.detections.pos_std = v;
    }
    if let Some(v) = args.det_yaw_noise {
        s.detections.yaw_std = v;
    }
    if let Some(v) = args.det_drop_prob {
        s.detections.drop_prob = v;
    }
    if args.det_range_scored {
        s.detections.range_scored = true;
    }
    if args.cache {
        s.cache = true;
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }
    s.scenario.validate()?;
    write_snapshot(&s.out, "simulate", &s)?;

    let (tracklets, mut frames) = build_scenario(&s.scenario)?;
    let records = gt_records(&tracklets);
    write_gt_records(&s.out.join("gt.jsonl"), &records)?;

    let detections = detections_from_gt(&tracklets, &frames, &s.detections);
    write_detection_frames(&s.out.join("detections.jsonl"), &detections)?;

    let scenario_path = s.out.join("scenario.json");
    let json = serde_json::to_string_pretty(&s.scenario)?;
    std::fs::write(&scenario_path, json + "\n").map_err(|e| Error::io(&scenario_path, e))?;

    if s.cache {
        render_all(&s.scenario, &tracklets, &mut frames)?;
        let mut entries = std::collections::BTreeMap::new();
        for frame in &frames {
            let pyramid = frame.features.as_ref().expect("rendered above");
            for (level, cams) in pyramid.levels.iter().enumerate() {
                for (cam, map) in cams.iter().enumerate() {
                    entries.insert(
                        format!("frame_{:03}/cam_{}/level_{}", frame.frame_index, cam, level),
                        map.to_tensor(),
                    );
                }
            }
        }
        checkpoint::write_checkpoint(&s.out.join("features"), &entries)?;
    }

    let last = s.scenario.num_frames - 1;
    let late_births = tracklets.iter().filter(|t| t.birth_frame > 0).count();
    let early_deaths = tracklets.iter().filter(|t| t.death_frame < last).count();
    let multi_cam = count_multi_camera_events(&tracklets, &frames);
    println!(
        "scenario seed {}: {} objects over {} frames ({} ground-truth records)",
        s.scenario.seed,
        tracklets.len(),
        s.scenario.num_frames,
        records.len()
    );
    println!(
        "births after frame 0: {late_births}, deaths before frame {last}: {early_deaths}"
    );
    println!("multi-camera observations: {multi_cam} object-frames seen by 2+ cameras");
    println!(
        "wrote gt.jsonl, detections.jsonl ({} frames), scenario.json{}",
        detections.len(),
        if s.cache { ", features.bin" } else { "" }
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON file or glob; omit to train on the built-in family.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimizer steps; 0 writes the untrained initialization.
    #[arg(long)]
    steps: Option<usize>,
    /// Frames per training clip.
    #[arg(long)]
    clip_len: Option<usize>,
    /// Seed for parameter init and clip sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Family size when training from a single base scenario.
    #[arg(long)]
    num_scenarios: Option<usize>,
    /// Disable ego-motion compensation of carried references.
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub out: PathBuf,
    pub threads: usize,
    /// Scenario file or glob; None trains on the default family.
    pub scenario: Option<String>,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            out: PathBuf::from("out/train"),
            threads: default_threads(),
            scenario: None,
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

/// The scenario configs a train run covers: a single file expands into a
/// seed family, several files are used as they are.
fn resolve_training_scenarios(settings: &TrainSettings) -> Result<Vec<ScenarioConfig>> {
    match &settings.scenario {
        None => Ok(scenario_family(
            &ScenarioConfig::default(),
            settings.train.num_scenarios,
            0,
        )),
        Some(pattern) => {
            let paths = expand_scenario_glob(pattern)?;
            let configs: Vec<ScenarioConfig> =
                paths.iter().map(|p| read_scenario(p)).collect::<Result<_>>()?;
            if configs.len() == 1 {
                Ok(scenario_family(&configs[0], settings.train.num_scenarios, 0))
            } else {
                Ok(configs)
            }
        }
    }
}

fn write_loss_csv(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(
        w,
        "step,lr,scenario_seed,clip_start,total,frame_index,frame_total,cls,l1,queries,matched"
    )
    .map_err(io_err)?;
    for t in trace {
        for f in &t.frames {
            writeln!(
                w,
                "{},{:.8},{},{},{:.8},{},{:.8},{:.8},{:.8},{},{}",
                t.step,
                t.lr,
                t.scenario_seed,
                t.clip_start,
                t.total,
                f.frame_index,
                f.total,
                f.cls,
                f.l1,
                f.queries,
                f.matched,
            )
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut s: TrainSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(scenario) = args.scenario {
        s.scenario = Some(scenario);
    }
    if let Some(steps) = args.steps {
        s.train.steps = steps;
    }
    if let Some(clip_len) = args.clip_len {
        s.train.clip_len = clip_len;
    }
    if let Some(seed) = args.seed {
        s.train.seed = seed;
    }
    if let Some(lr) = args.lr {
        s.train.lr = lr;
    }
    if let Some(n) = args.num_scenarios {
        s.train.num_scenarios = n;
    }
    if args.no_motion {
        s.tracker.motion_compensation = false;
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }

    let configs = resolve_training_scenarios(&s)?;
    write_snapshot(&s.out, "train", &s)?;
    let stem = s.out.join("checkpoint");

    if s.train.steps == 0 {
        for cfg in &configs {
            cfg.validate()?;
        }
        let params = init_params(&s.tracker, s.train.seed)?;
        checkpoint::write_checkpoint(&stem, &params.named())?;
        write_loss_csv(&s.out.join("loss.csv"), &[])?;
        println!("steps 0: wrote untrained initialization to {}", stem.display());
        return Ok(());
    }

    for cfg in &configs {
        check_compatible(cfg, &s.tracker, &s.train)?;
    }
    let started = Instant::now();
    // Trajectories and poses are staged up front; feature maps render
    // lazily per training clip, so large families stay cheap in memory.
    let staged = configs
        .iter()
        .map(stage_scenario)
        .collect::<Result<Vec<_>>>()?;
    let prep_secs = started.elapsed().as_secs_f64();

    let train_started = Instant::now();
    let steps = s.train.steps;
    init_global_pool(s.threads)?;
    let (params, trace) = run_training_staged(&staged, &s.tracker, &s.train, |t| {
        if t.step % 100 == 0 || t.step + 1 == steps {
            println!("step {}/{}: loss {:.4} (lr {:.5})", t.step + 1, steps, t.total, t.lr);
        }
    })?;
    let train_secs = train_started.elapsed().as_secs_f64();

    checkpoint::write_checkpoint(&stem, &params.named())?;
    write_loss_csv(&s.out.join("loss.csv"), &trace)?;

    let window = (steps / 10).clamp(1, 50);
    let (head, tail) = crate::tracker::train::loss_endpoints(&trace, window);
    println!(
        "trained {} scenarios x {} steps in {:.1}s (+{:.1}s preparation)",
        staged.len(),
        steps,
        train_secs,
        prep_secs
    );
    println!(
        "smoothed loss: first {window} steps {head:.4} -> last {window} steps {tail:.4} ({:.1}% of initial)",
        100.0 * tail / head
    );
    println!("wrote {}.bin, loss.csv", stem.display());
    Ok(())
}

// ------------------------------------------------------------------- track

#[derive(Args)]
struct TrackArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint stem (expects <stem>.bin and <stem>.manifest.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scenario JSON file; omit for the built-in default scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Newborn acceptance threshold.
    #[arg(long)]
    tau_new: Option<f64>,
    /// Old-query keep threshold.
    #[arg(long)]
    tau_old: Option<f64>,
    /// Consecutive misses before a track retires.
    #[arg(long)]
    miss_tolerance: Option<usize>,
    /// Disable ego-motion compensation of carried references.
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackSettings {
    pub out: PathBuf,
    pub threads: usize,
    pub checkpoint: PathBuf,
    /// Scenario file; None uses the built-in default scenario.
    pub scenario: Option<PathBuf>,
    pub tracker: TrackerConfig,
}

impl Default for TrackSettings {
    fn default() -> Self {
        TrackSettings {
            out: PathBuf::from("out/track"),
            threads: default_threads(),
            checkpoint: PathBuf::from("out/train/checkpoint"),
            scenario: None,
            tracker: TrackerConfig::default(),
        }
    }
}

fn cmd_track(args: TrackArgs) -> Result<()> {
    let mut s: TrackSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(ckpt) = args.checkpoint {
        s.checkpoint = ckpt;
    }
    if let Some(scenario) = args.scenario {
        s.scenario = Some(scenario);
    }
    if let Some(v) = args.tau_new {
        s.tracker.tau_new = v;
    }
    if let Some(v) = args.tau_old {
        s.tracker.tau_old = v;
    }
    if let Some(v) = args.miss_tolerance {
        s.tracker.miss_tolerance = v;
    }
    if args.no_motion {
        s.tracker.motion_compensation = false;
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }

    let scenario = match &s.scenario {
        Some(path) => read_scenario(path)?,
        None => ScenarioConfig::default(),
    };
    write_snapshot(&s.out, "track", &s)?;

    let params = init_params(&s.tracker, 0)?;
    checkpoint::load_into(&s.checkpoint, &params.named())?;

    let prepared = prepare_scenario(&scenario)?;
    let started = Instant::now();
    let records = run_inference(
        &params,
        &s.tracker,
        scenario.frame_dt,
        &prepared.frames,
        &prepared.contexts,
    )?;
    let elapsed = started.elapsed();
    write_track_records(&s.out.join("tracks.jsonl"), &records)?;

    let per_frame = elapsed.as_secs_f64() * 1000.0 / prepared.frames.len() as f64;
    println!(
        "tracked {} frames in {:.1} ms ({:.2} ms/frame), {} records, {} distinct tracks",
        prepared.frames.len(),
        elapsed.as_secs_f64() * 1000.0,
        per_frame,
        records.len(),
        records
            .iter()
            .map(|r| r.track_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    );
    println!("wrote {}", s.out.join("tracks.jsonl").display());
    Ok(())
}

// ---------------------------------------------------------------- baseline

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineVariant {
    Basic,
    TwoStage,
}

#[derive(Args)]
struct BaselineArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Association scheme.
    #[arg(long, value_enum)]
    variant: Option<BaselineVariant>,
    /// Detection JSON-lines file (one frame per line).
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub out: PathBuf,
    pub threads: usize,
    pub detections: PathBuf,
    pub kalman: KalmanConfig,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            out: PathBuf::from("out/baseline"),
            threads: default_threads(),
            detections: PathBuf::from("out/simulate/detections.jsonl"),
            kalman: KalmanConfig::default(),
        }
    }
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let mut s: BaselineSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(detections) = args.detections {
        s.detections = detections;
    }
    if let Some(variant) = args.variant {
        s.kalman.association = match variant {
            BaselineVariant::Basic => Association::Basic,
            BaselineVariant::TwoStage => Association::TwoStage,
        };
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }
    s.kalman.validate()?;
    write_snapshot(&s.out, "baseline", &s)?;

    let frames = read_detection_frames(&s.detections)?;
    let started = Instant::now();
    let records = kf_track_sequence(&frames, &s.kalman)?;
    let elapsed = started.elapsed();
    write_track_records(&s.out.join("tracks.jsonl"), &records)?;

    let per_frame = if frames.is_empty() {
        0.0
    } else {
        elapsed.as_secs_f64() * 1000.0 / frames.len() as f64
    };
    println!(
        "{:?} baseline tracked {} frames in {:.1} ms ({:.3} ms/frame), {} records",
        s.kalman.association,
        frames.len(),
        elapsed.as_secs_f64() * 1000.0,
        per_frame,
        records.len()
    );
    println!("wrote {}", s.out.join("tracks.jsonl").display());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth JSON-lines file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Prediction JSON-lines file.
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of recall levels in the sweep.
    #[arg(long)]
    recalls: Option<usize>,
    /// Match radius in meters.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub out: PathBuf,
    pub threads: usize,
    pub gt: PathBuf,
    pub preds: PathBuf,
    pub metric: MetricConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            out: PathBuf::from("out/eval"),
            threads: default_threads(),
            gt: PathBuf::from("out/simulate/gt.jsonl"),
            preds: PathBuf::from("out/track/tracks.jsonl"),
            metric: MetricConfig::default(),
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut s: EvalSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(gt) = args.gt {
        s.gt = gt;
    }
    if let Some(preds) = args.preds {
        s.preds = preds;
    }
    if let Some(recalls) = args.recalls {
        s.metric.num_recalls = recalls;
    }
    if let Some(radius) = args.radius {
        s.metric.match_radius = radius;
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }
    s.metric.validate()?;
    write_snapshot(&s.out, "eval", &s)?;

    let gt = read_records(&s.gt)?;
    let preds = read_records(&s.preds)?;
    let report = evaluate(&gt, &preds, &s.metric)?;
    write_report_json(&s.out.join("metrics.json"), &report)?;
    write_report_csv(&s.out.join("metrics.csv"), &report)?;

    println!(
        "AMOTA {:.4}  AMOTP {:.4} m  ATVE {:.4} m/s  IDS {}",
        report.amota, report.amotp, report.atve, report.id_switches
    );
    println!(
        "at best accuracy: MOTA {:.4}  MOTP {:.4} m  TVE {:.4} m/s  RECALL {:.4}",
        report.mota, report.motp, report.tve, report.recall
    );
    for class in &report.classes {
        println!(
            "class {}: {} gt boxes, AMOTA {:.4}, MOTA {:.4}, RECALL {:.4}, IDS {}",
            class.class_id,
            class.gt_count,
            class.amota,
            class.mota,
            class.recall,
            class.id_switches
        );
    }
    println!("wrote metrics.json, metrics.csv");
    Ok(())
}

// -------------------------------------------------------------------- plot

#[derive(Args)]
struct PlotArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth JSON-lines file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Prediction JSON-lines file.
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Match radius in meters (drives which arrows are drawn).
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSettings {
    pub out: PathBuf,
    pub threads: usize,
    pub gt: PathBuf,
    pub preds: PathBuf,
    pub metric: MetricConfig,
}

impl Default for PlotSettings {
    fn default() -> Self {
        PlotSettings {
            out: PathBuf::from("out/plot"),
            threads: default_threads(),
            gt: PathBuf::from("out/simulate/gt.jsonl"),
            preds: PathBuf::from("out/track/tracks.jsonl"),
            metric: MetricConfig::default(),
        }
    }
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let mut s: PlotSettings = load_settings(args.config.as_deref())?;
    if let Some(out) = args.out {
        s.out = out;
    }
    if let Some(gt) = args.gt {
        s.gt = gt;
    }
    if let Some(preds) = args.preds {
        s.preds = preds;
    }
    if let Some(radius) = args.radius {
        s.metric.match_radius = radius;
    }
    if let Some(t) = args.threads {
        s.threads = t;
    }
    s.metric.validate()?;
    write_snapshot(&s.out, "plot", &s)?;

    let gt = read_records(&s.gt)?;
    let preds = read_records(&s.preds)?;
    let matching = match_frames(&gt, &preds, 0.0, &s.metric)?;

    let svg = render_bev_svg(&gt, &preds, &matching);
    let svg_path = s.out.join("trajectories.svg");
    std::fs::write(&svg_path, &svg).map_err(|e| Error::io(&svg_path, e))?;
    write_curves_csv(&s.out.join("curves.csv"), &matching)?;

    let gt_tracks = gt.iter().map(|r| r.track_id).collect::<std::collections::BTreeSet<_>>();
    let pred_tracks =
        preds.iter().map(|r| r.track_id).collect::<std::collections::BTreeSet<_>>();
    let arrows = matching.true_positives();
    println!(
        "plotted {} ground-truth and {} predicted tracks, {} velocity arrows (one per matched frame)",
        gt_tracks.len(),
        pred_tracks.len(),
        arrows
    );
    println!("wrote trajectories.svg, curves.csv");
    Ok(())
}

/// Per-frame match/error counts plus cumulative identity switches, one row
/// per frame that appears in either input.
fn write_curves_csv(path: &Path, matching: &FrameMatching) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "frame,matched,false_positives,false_negatives,cumulative_id_switches")
        .map_err(io_err)?;
    let mut last: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    let mut cumulative = 0usize;
    for frame in &matching.frames {
        for pair in &frame.pairs {
            if let Some(&prev) = last.get(&pair.gt_track) {
                if prev != pair.pred_track {
                    cumulative += 1;
                }
            }
            last.insert(pair.gt_track, pair.pred_track);
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            frame.frame, frame.pairs.len(), frame.false_positives, frame.false_negatives, cumulative
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

const PALETTE: [&str; 10] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf", "#17becf",
    "#bcbd22", "#8c564b",
];

/// BEV trajectory drawing: thin gray ground-truth polylines, thick
/// id-colored prediction polylines (one polyline per track id), and one
/// velocity arrow per matched prediction, length proportional to speed.
fn render_bev_svg(gt: &[TrackRecord], preds: &[TrackRecord], matching: &FrameMatching) -> String {
    use std::collections::{BTreeMap, HashSet};
    use std::fmt::Write as FmtWrite;

    let size = 800.0f64;
    let margin = 30.0f64;
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for r in gt.iter().chain(preds) {
        min_x = min_x.min(r.center[0]);
        max_x = max_x.max(r.center[0]);
        min_y = min_y.min(r.center[1]);
        max_y = max_y.max(r.center[1]);
    }
    if !min_x.is_finite() {
        (min_x, max_x, min_y, max_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = 2.0;
    min_x -= pad;
    max_x += pad;
    min_y -= pad;
    max_y += pad;
    let extent = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let scale = (size - 2.0 * margin) / extent;
    // World (x right, y up) to screen (x right, y down), centered.
    let sx = |x: f64| margin + (x - min_x) * scale;
    let sy = |y: f64| size - margin - (y - min_y) * scale;

    let group = |rows: &[TrackRecord]| -> BTreeMap<u64, Vec<TrackRecord>> {
        let mut by_id: BTreeMap<u64, Vec<TrackRecord>> = BTreeMap::new();
        for r in rows {
            by_id.entry(r.track_id).or_default().push(r.clone());
        }
        for v in by_id.values_mut() {
            v.sort_by_key(|r| r.frame);
        }
        by_id
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    );
    let _ = writeln!(
        svg,
        "  <defs><marker id=\"tip\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 z\" fill=\"#222\"/></marker></defs>"
    );
    let _ = writeln!(svg, "  <rect width=\"{size}\" height=\"{size}\" fill=\"#fdfdfd\"/>");

    for (id, rows) in group(gt) {
        let points: Vec<String> =
            rows.iter().map(|r| format!("{:.2},{:.2}", sx(r.center[0]), sy(r.center[1]))).collect();
        let _ = writeln!(
            svg,
            "  <polyline class=\"gt\" data-track=\"{id}\" points=\"{}\" fill=\"none\" stroke=\"#999\" stroke-width=\"1\"/>",
            points.join(" ")
        );
    }
    for (i, (id, rows)) in group(preds).into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            rows.iter().map(|r| format!("{:.2},{:.2}", sx(r.center[0]), sy(r.center[1]))).collect();
        let _ = writeln!(
            svg,
            "  <polyline class=\"pred\" data-track=\"{id}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2.5\" stroke-opacity=\"0.85\"/>",
            points.join(" ")
        );
    }

    // One arrow per matched prediction; screen length scales with speed.
    let matched: HashSet<(usize, u64)> = matching
        .frames
        .iter()
        .flat_map(|f| f.pairs.iter().map(move |p| (f.frame, p.pred_track)))
        .collect();
    let arrow_scale = 0.8 * scale;
    for r in preds {
        if !matched.contains(&(r.frame, r.track_id)) {
            continue;
        }
        let (x1, y1) = (sx(r.center[0]), sy(r.center[1]));
        let x2 = x1 + r.velocity[0] * arrow_scale;
        let y2 = y1 - r.velocity[1] * arrow_scale;
        let _ = writeln!(
            svg,
            "  <line class=\"vel\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"#222\" stroke-width=\"1\" marker-end=\"url(#tip)\"/>"
        );
    }
    svg.push_str("</svg>\n");
    svg
}
