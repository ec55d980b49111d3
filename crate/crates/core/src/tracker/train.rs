//! Training loop: clips sampled from a family of scenarios, SGD with
//! momentum, cosine learning-rate decay and global-norm gradient clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderParams, FrameContext};
use crate::error::{Error, Result};
use crate::sim::{
    build_scenario,
    render::{render_all, render_features},
    FrameObservation, GtTracklet, ScenarioConfig,
};
use crate::tensor::optim::SgdOptimizer;
use crate::tracker::{train_clip, FrameLoss, TrackerConfig};

/// Stream id for clip-start sampling, distinct from simulator streams.
const CLIP_STREAM: u64 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub clip_len: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Scenario variants trained on, seeded `base_seed + k`.
    pub num_scenarios: usize,
    /// Seeds parameter init and clip sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            clip_len: 3,
            lr: 1e-2,
            momentum: 0.9,
            clip_norm: 35.0,
            num_scenarios: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.clip_len == 0 || self.num_scenarios == 0 {
            return Err(Error::InvalidConfig(
                "steps, clip_len and num_scenarios must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.clip_norm <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bad optimizer settings: lr {} momentum {} clip {}",
                self.lr, self.momentum, self.clip_norm
            )));
        }
        Ok(())
    }
}

/// A scenario with everything rendered and wrapped for the decoder.
pub struct PreparedScenario {
    pub config: ScenarioConfig,
    pub tracklets: Vec<GtTracklet>,
    pub frames: Vec<FrameObservation>,
    pub contexts: Vec<FrameContext>,
}

pub fn prepare_scenario(config: &ScenarioConfig) -> Result<PreparedScenario> {
    let (tracklets, mut frames) = build_scenario(config)?;
    render_all(config, &tracklets, &mut frames)?;
    let contexts = frames
        .iter()
        .map(|f| FrameContext::new(f, &config.scene_bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedScenario { config: config.clone(), tracklets, frames, contexts })
}

/// A scenario built once (trajectories and poses) with feature rendering
/// deferred. Training renders just the frames of each sampled clip, so
/// memory stays flat however large the scenario family grows.
pub struct StagedScenario {
    pub config: ScenarioConfig,
    pub tracklets: Vec<GtTracklet>,
    pub frames: Vec<FrameObservation>,
}

pub fn stage_scenario(config: &ScenarioConfig) -> Result<StagedScenario> {
    let (tracklets, frames) = build_scenario(config)?;
    Ok(StagedScenario { config: config.clone(), tracklets, frames })
}

/// Renders decoder contexts for `len` frames starting at `start`. Feature
/// rendering is a pure function of the scenario and the frame, so per-clip
/// rendering reproduces whole-scenario rendering exactly. Pyramids render
/// in parallel (plain data); the tensor wrappers are built sequentially.
pub fn render_clip(sc: &StagedScenario, start: usize, len: usize) -> Result<Vec<FrameContext>> {
    use rayon::prelude::*;
    let pyramids = (start..start + len)
        .into_par_iter()
        .map(|f| render_features(&sc.config, &sc.tracklets, &sc.frames[f]))
        .collect::<Result<Vec<_>>>()?;
    pyramids
        .into_iter()
        .zip(start..)
        .map(|(pyr, f)| {
            let mut frame = sc.frames[f].clone();
            frame.features = Some(pyr);
            FrameContext::new(&frame, &sc.config.scene_bounds)
        })
        .collect()
}

/// Clones of the base config with seeds `base.seed + offset + k`. Object
/// count cycles through base.count, base.count-1, ... (floored at 1) so the
/// family never teaches a fixed number of objects per scene; a model that
/// fires a constant set of confident slots pays for it on the sparse
/// members.
pub fn scenario_family(base: &ScenarioConfig, count: usize, offset: u64) -> Vec<ScenarioConfig> {
    (0..count as u64)
        .map(|k| {
            let drop = (k as usize) % 4;
            let spawn = crate::sim::SpawnConfig {
                count: base.spawn.count.saturating_sub(drop).max(1),
                ..base.spawn.clone()
            };
            ScenarioConfig { seed: base.seed + offset + k, spawn, ..base.clone() }
        })
        .collect()
}

/// Fresh decoder parameters exactly as training initializes them.
pub fn init_params(tracker: &TrackerConfig, seed: u64) -> Result<DecoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DecoderParams::new(&tracker.decoder, &mut rng)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub lr: f64,
    pub scenario_seed: u64,
    pub clip_start: usize,
    pub total: f64,
    pub frames: Vec<FrameLoss>,
}

/// Mean loss over the first and last `window` steps of a trace.
pub fn loss_endpoints(trace: &[StepTrace], window: usize) -> (f64, f64) {
    let w = window.clamp(1, trace.len());
    let head: f64 = trace[..w].iter().map(|t| t.total).sum::<f64>() / w as f64;
    let tail: f64 =
        trace[trace.len() - w..].iter().map(|t| t.total).sum::<f64>() / w as f64;
    (head, tail)
}

/// Trains a fresh decoder on a scenario family. Scenarios rotate round
/// robin; one clip per step, one backward pass, one optimizer step. The
/// callback observes every step for logging.
pub fn run_training(
    base: &ScenarioConfig,
    tracker: &TrackerConfig,
    train: &TrainConfig,
    progress: impl FnMut(&StepTrace),
) -> Result<(DecoderParams, Vec<StepTrace>)> {
    let scenarios: Vec<StagedScenario> = scenario_family(base, train.num_scenarios, 0)
        .iter()
        .map(|cfg| {
            check_compatible(cfg, tracker, train)?;
            stage_scenario(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    run_training_staged(&scenarios, tracker, train, progress)
}

/// Rejects scenario/model/clip combinations that cannot train together.
pub fn check_compatible(
    scenario: &ScenarioConfig,
    tracker: &TrackerConfig,
    train: &TrainConfig,
) -> Result<()> {
    scenario.validate()?;
    train.validate()?;
    if tracker.decoder.channels != scenario.features.channels {
        return Err(Error::InvalidConfig(format!(
            "decoder channels {} must match feature channels {}",
            tracker.decoder.channels, scenario.features.channels
        )));
    }
    if tracker.decoder.num_cameras != scenario.rig.num_cameras() {
        return Err(Error::InvalidConfig(format!(
            "decoder expects {} cameras, rig has {}",
            tracker.decoder.num_cameras,
            scenario.rig.num_cameras()
        )));
    }
    if train.clip_len > scenario.num_frames {
        return Err(Error::InvalidConfig(format!(
            "clip_len {} exceeds scenario length {}",
            train.clip_len, scenario.num_frames
        )));
    }
    Ok(())
}

/// Training over staged scenarios, rotating round robin in the given
/// order. Each step renders only the frames of its sampled clip.
pub fn run_training_staged(
    scenarios: &[StagedScenario],
    tracker: &TrackerConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(&StepTrace),
) -> Result<(DecoderParams, Vec<StepTrace>)> {
    train.validate()?;
    if scenarios.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one scenario".into()));
    }
    for sc in scenarios {
        check_compatible(&sc.config, tracker, train)?;
    }
    let params = init_params(tracker, train.seed)?;
    let mut optimizer = SgdOptimizer::new(
        params.params(),
        train.lr,
        train.momentum,
        Some(train.clip_norm),
        train.steps,
    );

    let mut clip_rng = ChaCha8Rng::seed_from_u64(train.seed);
    clip_rng.set_stream(CLIP_STREAM);
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let sc = &scenarios[step % scenarios.len()];
        let max_start = sc.frames.len() - train.clip_len;
        let start = if max_start > 0 { clip_rng.random_range(0..=max_start) } else { 0 };
        let contexts = render_clip(sc, start, train.clip_len)?;
        let (loss, frames) = train_clip(
            &params,
            tracker,
            sc.config.frame_dt,
            &sc.tracklets,
            &sc.frames,
            &contexts,
            start,
            train.clip_len,
        )?;
        let total = loss.item();
        loss.backward()?;
        let lr = optimizer.current_lr();
        optimizer.step();
        let entry = StepTrace {
            step,
            lr,
            scenario_seed: sc.config.seed,
            clip_start: start,
            total,
            frames,
        };
        progress(&entry);
        trace.push(entry);
    }
    Ok((params, trace))
}
