//! End-to-end tracker built on the query decoder.
//!
//! Every frame injects the learned newborn queries next to the surviving
//! track queries, runs the decoder, and decodes one box candidate per
//! query. Training matches newborn queries to newly appeared ground truth
//! with a Hungarian assignment while old queries keep their fixed targets;
//! the loss is focal classification plus a scaled L1 box term, averaged
//! over queries and summed over the frames of a clip, with one backward
//! pass per clip. Inference promotes newborn queries above the birth
//! threshold to tracks, coasts briefly occluded tracks, and retires tracks
//! after too many consecutive low-score frames. Between frames each
//! surviving query pushes its embedding into a FIFO memory bank, attends
//! over it, and carries its reference point through the ego motion.

pub mod hungarian;
pub mod train;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::decoder::{
    compensate_ref_logit, decode_candidates, memory_attend, newborn_queries, run_decoder,
    Candidate, DecoderConfig, DecoderParams, FrameContext, BOX_DIM,
};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::records::TrackRecord;
use crate::sim::{FrameObservation, GtTracklet};
use crate::tensor::{focal_loss, Tensor};
use hungarian::hungarian as solve_assignment;

/// Per-dimension denominators normalizing box parameters for the L1 loss:
/// centers, sizes, velocities, yaw pair.
pub const PARAM_SCALES: [f64; BOX_DIM] =
    [10.0, 10.0, 10.0, 4.0, 4.0, 4.0, 5.0, 5.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub decoder: DecoderConfig,
    /// Newborn queries become tracks strictly above this score.
    pub tau_new: f64,
    /// Old queries below this score coast; at or above it they reset.
    pub tau_old: f64,
    /// Consecutive sub-threshold frames before a track is retired.
    pub miss_tolerance: usize,
    /// Carry references through ego motion between frames.
    pub motion_compensation: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of the L1 box term.
    pub lambda_l1: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            decoder: DecoderConfig::default(),
            tau_new: 0.4,
            tau_old: 0.35,
            miss_tolerance: 5,
            motion_compensation: true,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda_l1: 0.25,
        }
    }
}

/// Lifecycle outcome for an old query on one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep { coasted: bool },
    Remove,
}

pub fn newborn_survives(score: f64, tau_new: f64) -> bool {
    score > tau_new
}

/// Updates the consecutive-miss counter and decides the query's fate: a
/// score at or above `tau_old` resets the counter, below it the query
/// coasts until `tolerance` consecutive misses retire it.
pub fn old_query_step(miss_count: &mut usize, score: f64, tau_old: f64, tolerance: usize) -> Decision {
    if score >= tau_old {
        *miss_count = 0;
        Decision::Keep { coasted: false }
    } else {
        *miss_count += 1;
        if *miss_count >= tolerance {
            Decision::Remove
        } else {
            Decision::Keep { coasted: true }
        }
    }
}

/// One live query carried between frames.
pub struct TrackQuery {
    pub embedding: Tensor,
    pub pe: Tensor,
    pub ref_logit: Tensor,
    /// Assigned on first survival (inference only).
    pub track_id: Option<u64>,
    /// Fixed ground-truth assignment (training only).
    pub gt_id: Option<u64>,
    pub miss_count: usize,
    pub bank: VecDeque<Tensor>,
    pub born_frame: usize,
    /// Set when motion compensation pushed the reference outside the scene.
    pub out_of_bounds: bool,
}

#[derive(Default)]
pub struct TrackerState {
    pub queries: Vec<TrackQuery>,
    next_track_id: u64,
}

impl TrackerState {
    pub fn new() -> Self {
        TrackerState { queries: Vec::new(), next_track_id: 1 }
    }

    fn live_gt_ids(&self) -> BTreeSet<u64> {
        self.queries.iter().filter_map(|q| q.gt_id).collect()
    }

    fn fresh_track_id(&mut self) -> u64 {
        let id = self.next_track_id;
        self.next_track_id += 1;
        id
    }
}

/// Decoder outputs for one frame over the concatenated batch of old queries
/// (first `n_old` rows) and newborn queries.
pub struct FrameOutputs {
    pub n_old: usize,
    pub q: Tensor,
    pub ref_logits: Tensor,
    pub candidates: Vec<Candidate>,
}

/// Stacks old and newborn queries, runs the decoder and decodes candidates.
pub fn forward_frame(
    params: &DecoderParams,
    ctx: &FrameContext,
    state: &TrackerState,
) -> FrameOutputs {
    let n_old = state.queries.len();
    let (nb_embed, nb_pe, nb_ref) = newborn_queries(params);
    let n_new = params.config.num_newborn;
    let mut q_rows = Vec::with_capacity(n_old + n_new);
    let mut pe_rows = Vec::with_capacity(n_old + n_new);
    let mut ref_rows = Vec::with_capacity(n_old + n_new);
    for query in &state.queries {
        q_rows.push(query.embedding.clone());
        pe_rows.push(query.pe.clone());
        ref_rows.push(query.ref_logit.clone());
    }
    for i in 0..n_new {
        q_rows.push(nb_embed.row(i));
        pe_rows.push(nb_pe.row(i));
        ref_rows.push(nb_ref.row(i));
    }
    let q = Tensor::stack_rows(&q_rows);
    let pe = Tensor::stack_rows(&pe_rows);
    let ref_logits = Tensor::stack_rows(&ref_rows);
    let (q, ref_logits) = run_decoder(params, ctx, &q, &pe, &ref_logits);
    let candidates = decode_candidates(params, &ctx.bounds, &q, &ref_logits);
    FrameOutputs { n_old, q, ref_logits, candidates }
}

/// Ground-truth box as the 10 raw parameters in head layout.
pub fn box_parameters(b: &Box3D) -> [f64; BOX_DIM] {
    [
        b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.velocity.x,
        b.velocity.y, b.yaw_sin, b.yaw_cos,
    ]
}

/// Differentiable candidate parameters, already divided by [`PARAM_SCALES`].
fn scaled_prediction(cand: &Candidate) -> Tensor {
    let parts = [
        cand.center.reshape(&[1, 3]),
        cand.size.reshape(&[1, 3]),
        cand.velocity.reshape(&[1, 2]),
        cand.yaw.reshape(&[1, 2]),
    ];
    let stacked = Tensor::concat_cols(&parts).reshape(&[BOX_DIM]);
    let inv = Tensor::constant(&[BOX_DIM], PARAM_SCALES.iter().map(|s| 1.0 / s).collect());
    stacked.mul(&inv)
}

fn scaled_target(b: &Box3D) -> Tensor {
    let p = box_parameters(b);
    Tensor::constant(
        &[BOX_DIM],
        p.iter().zip(&PARAM_SCALES).map(|(v, s)| v / s).collect(),
    )
}

/// Plain-value focal loss mirroring [`focal_loss`], for assignment costs.
pub fn focal_value(logits: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (j, &l) in logits.iter().enumerate() {
        let p = (1.0 / (1.0 + (-l).exp())).clamp(1e-12, 1.0 - 1e-12);
        if target == Some(j) {
            total += -alpha * (1.0 - p).powf(gamma) * p.ln();
        } else {
            total += -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        }
    }
    total
}

fn l1_value(cand: &Candidate, gt: &Box3D) -> f64 {
    let pred = scaled_prediction(cand).to_vec();
    let tgt = scaled_target(gt).to_vec();
    pred.iter().zip(&tgt).map(|(a, b)| (a - b).abs()).sum::<f64>() / BOX_DIM as f64
}

/// Differentiable per-query loss and its plain-value parts (cls, l1).
fn query_loss(
    cfg: &TrackerConfig,
    cand: &Candidate,
    target: Option<&Box3D>,
) -> (Tensor, f64, f64) {
    let logits = cand.cls_logits.to_vec();
    match target {
        Some(gt) => {
            let cls = focal_loss(&cand.cls_logits, Some(gt.class_id), cfg.focal_gamma, cfg.focal_alpha);
            let l1 = scaled_prediction(cand).l1_loss(&scaled_target(gt)).scale(cfg.lambda_l1);
            let cls_v = focal_value(&logits, Some(gt.class_id), cfg.focal_gamma, cfg.focal_alpha);
            let l1_v = cfg.lambda_l1 * l1_value(cand, gt);
            (cls.add(&l1), cls_v, l1_v)
        }
        None => {
            let cls = focal_loss(&cand.cls_logits, None, cfg.focal_gamma, cfg.focal_alpha);
            let cls_v = focal_value(&logits, None, cfg.focal_gamma, cfg.focal_alpha);
            (cls, cls_v, 0.0)
        }
    }
}

/// Ground-truth targets for one training frame: old queries keep their
/// fixed assignment while it stays alive; newborn queries compete for
/// ground truth that is alive and not already held by a live old query.
/// Returns per-batch-row targets (`None` = background).
pub fn assign_targets(
    state: &TrackerState,
    outputs: &FrameOutputs,
    tracklets: &[GtTracklet],
    frame_index: usize,
    cfg: &TrackerConfig,
) -> Result<Vec<Option<u64>>> {
    let held = state.live_gt_ids();
    let mut targets: Vec<Option<u64>> = Vec::with_capacity(outputs.candidates.len());
    for query in &state.queries {
        let gt = query.gt_id.expect("training queries carry targets");
        let alive = tracklets.iter().any(|t| t.track_id == gt && t.alive_at(frame_index));
        targets.push(alive.then_some(gt));
    }

    let fresh: Vec<&GtTracklet> = tracklets
        .iter()
        .filter(|t| t.alive_at(frame_index) && !held.contains(&t.track_id))
        .collect();
    let n_new = outputs.candidates.len() - outputs.n_old;
    let side = n_new.max(fresh.len());
    let mut cost = vec![vec![0.0; side]; side];
    for i in 0..side {
        for (g, t) in fresh.iter().enumerate() {
            cost[i][g] = if i < n_new {
                let cand = &outputs.candidates[outputs.n_old + i];
                let gt_box = t.box_at(frame_index).expect("alive tracklet has a box");
                focal_value(
                    &cand.cls_logits.to_vec(),
                    Some(gt_box.class_id),
                    cfg.focal_gamma,
                    cfg.focal_alpha,
                ) + cfg.lambda_l1 * l1_value(cand, gt_box)
            } else {
                0.0
            };
        }
        for g in fresh.len()..side {
            cost[i][g] = if i < n_new {
                let cand = &outputs.candidates[outputs.n_old + i];
                focal_value(&cand.cls_logits.to_vec(), None, cfg.focal_gamma, cfg.focal_alpha)
            } else {
                0.0
            };
        }
    }
    let mut newborn_targets = vec![None; n_new];
    if side > 0 {
        let perm = solve_assignment(&cost)?;
        for i in 0..n_new.min(side) {
            let g = perm[i];
            if g < fresh.len() {
                newborn_targets[i] = Some(fresh[g].track_id);
            }
        }
    }
    targets.extend(newborn_targets);
    Ok(targets)
}

/// Survivor of one frame, before the between-frame motion update.
struct Survivor {
    query: TrackQuery,
    batch_index: usize,
}

/// Pushes the new embedding into the memory bank, attends over the bank,
/// and carries the reference through ego motion using the predicted
/// velocity.
///
/// The carried embedding is norm-clamped: every frame adds unnormalized
/// residual updates, so over horizons longer than the training clips the
/// state would otherwise grow without bound and saturate every head. The
/// limit is generous for in-distribution states (an RMS of three per
/// channel) and the rescale stays differentiable when training does touch
/// it.
#[allow(clippy::too_many_arguments)]
fn motion_update(
    params: &DecoderParams,
    cfg: &TrackerConfig,
    survivors: &mut [Survivor],
    outputs: &FrameOutputs,
    frame: &FrameObservation,
    next: &FrameObservation,
    ctx: &FrameContext,
    dt: f64,
) {
    let norm_limit = 3.0 * (params.config.channels as f64).sqrt();
    for s in survivors.iter_mut() {
        let i = s.batch_index;
        let embed = outputs.q.row(i);
        s.query.bank.push_back(embed.clone());
        while s.query.bank.len() > params.config.memory_size {
            s.query.bank.pop_front();
        }
        let bank: Vec<Tensor> = s.query.bank.iter().cloned().collect();
        s.query.embedding = memory_attend(params, &embed, &bank).clamp_norm(norm_limit);
        let new_ref = outputs.ref_logits.row(i);
        if cfg.motion_compensation {
            let (compensated, inside) = compensate_ref_logit(
                &ctx.bounds,
                &new_ref,
                &outputs.candidates[i].velocity,
                dt,
                &frame.ego_pose,
                &next.ego_pose,
            );
            s.query.ref_logit = compensated;
            s.query.out_of_bounds = !inside;
        } else {
            s.query.ref_logit = new_ref;
        }
    }
}

/// Per-frame loss pieces of a training clip.
#[derive(Debug, Clone, Serialize)]
pub struct FrameLoss {
    pub frame_index: usize,
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub queries: usize,
    pub matched: usize,
}

/// One training clip: runs `len` consecutive frames starting at `start`,
/// accumulating the per-frame mean query loss into a single scalar. The
/// caller owns backward and the optimizer step. `contexts` holds the clip's
/// frames only (index 0 = frame `start`); `frames` stays whole-scenario so
/// ego poses for motion compensation line up with absolute frame indices.
pub fn train_clip(
    params: &DecoderParams,
    cfg: &TrackerConfig,
    scenario_dt: f64,
    tracklets: &[GtTracklet],
    frames: &[FrameObservation],
    contexts: &[FrameContext],
    start: usize,
    len: usize,
) -> Result<(Tensor, Vec<FrameLoss>)> {
    assert!(len >= 1 && start + len <= frames.len(), "clip [{start}, {start}+{len}) out of range");
    assert!(contexts.len() >= len, "clip contexts missing frames: {} < {len}", contexts.len());
    let mut state = TrackerState::new();
    let mut total = Tensor::zeros(&[1]);
    let mut breakdown = Vec::with_capacity(len);
    for (offset, f) in (start..start + len).enumerate() {
        let ctx = &contexts[offset];
        let outputs = forward_frame(params, ctx, &state);
        let targets = assign_targets(&state, &outputs, tracklets, f, cfg)?;

        let mut frame_loss = Tensor::zeros(&[1]);
        let mut cls_sum = 0.0;
        let mut l1_sum = 0.0;
        let mut matched = 0;
        for (i, target) in targets.iter().enumerate() {
            let gt_box = target.and_then(|g| {
                tracklets.iter().find(|t| t.track_id == g).and_then(|t| t.box_at(f))
            });
            if gt_box.is_some() {
                matched += 1;
            }
            let (loss_i, cls_v, l1_v) = query_loss(cfg, &outputs.candidates[i], gt_box);
            frame_loss = frame_loss.add(&loss_i);
            cls_sum += cls_v;
            l1_sum += l1_v;
        }
        let n = targets.len() as f64;
        frame_loss = frame_loss.scale(1.0 / n);
        breakdown.push(FrameLoss {
            frame_index: f,
            total: (cls_sum + l1_sum) / n,
            cls: cls_sum / n,
            l1: l1_sum / n,
            queries: targets.len(),
            matched,
        });
        total = total.add(&frame_loss);

        // Training lifecycle: old queries persist while their target lives;
        // newborn queries persist when matched.
        let mut survivors: Vec<Survivor> = Vec::new();
        for (i, query) in state.queries.drain(..).enumerate() {
            if targets[i].is_some() {
                survivors.push(Survivor { query, batch_index: i });
            }
        }
        for i in outputs.n_old..targets.len() {
            if let Some(gt) = targets[i] {
                survivors.push(Survivor {
                    query: TrackQuery {
                        embedding: Tensor::zeros(&[1]),
                        pe: params.newborn_pe.row(i - outputs.n_old),
                        ref_logit: Tensor::zeros(&[1]),
                        track_id: None,
                        gt_id: Some(gt),
                        miss_count: 0,
                        bank: VecDeque::new(),
                        born_frame: f,
                        out_of_bounds: false,
                    },
                    batch_index: i,
                });
            }
        }
        if offset + 1 < len {
            motion_update(
                params,
                cfg,
                &mut survivors,
                &outputs,
                &frames[f],
                &frames[f + 1],
                ctx,
                scenario_dt,
            );
        }
        state.queries = survivors.into_iter().map(|s| s.query).collect();
    }
    Ok((total, breakdown))
}

/// Runs inference over rendered frames, returning track records. Coasting
/// tracks are recorded with the `coasted` flag; retired tracks stop
/// emitting records. Two guards keep long-horizon output well formed: a
/// query whose compensated reference left the scene is retired (its object
/// cannot be re-acquired, and feature sampling there is all zeros), and a
/// candidate that decodes to an invalid box counts as a miss instead of
/// producing a record.
pub fn run_inference(
    params: &DecoderParams,
    cfg: &TrackerConfig,
    scenario_dt: f64,
    frames: &[FrameObservation],
    contexts: &[FrameContext],
) -> Result<Vec<TrackRecord>> {
    let mut state = TrackerState::new();
    let mut records = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let ctx = &contexts[f];
        state.queries.retain(|q| !q.out_of_bounds);
        if std::env::var_os("MCMOT_TRACE_NORMS").is_some() {
            let norms: Vec<f64> = state
                .queries
                .iter()
                .map(|q| q.embedding.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            eprintln!(
                "frame {f}: {} old queries, max |q| {:.2}",
                norms.len(),
                norms.iter().cloned().fold(0.0, f64::max)
            );
        }
        let outputs = forward_frame(params, ctx, &state);
        let mut survivors: Vec<Survivor> = Vec::new();
        for (i, mut query) in state.queries.drain(..).enumerate() {
            let cand = &outputs.candidates[i];
            let record = TrackRecord::from_box(
                f,
                query.track_id.expect("old queries have track ids"),
                &cand.to_box(),
                false,
            );
            let valid = record.is_well_formed();
            let score = if valid { cand.score } else { 0.0 };
            match old_query_step(&mut query.miss_count, score, cfg.tau_old, cfg.miss_tolerance) {
                Decision::Keep { coasted } => {
                    if valid {
                        records.push(TrackRecord { coasted, ..record });
                    }
                    survivors.push(Survivor { query, batch_index: i });
                }
                Decision::Remove => {}
            }
        }
        for i in outputs.n_old..outputs.candidates.len() {
            let cand = &outputs.candidates[i];
            if newborn_survives(cand.score, cfg.tau_new) {
                let id = state.fresh_track_id();
                let record = TrackRecord::from_box(f, id, &cand.to_box(), false);
                if !record.is_well_formed() {
                    continue;
                }
                records.push(record);
                survivors.push(Survivor {
                    query: TrackQuery {
                        embedding: Tensor::zeros(&[1]),
                        pe: params.newborn_pe.row(i - outputs.n_old),
                        ref_logit: Tensor::zeros(&[1]),
                        track_id: Some(id),
                        gt_id: None,
                        miss_count: 0,
                        bank: VecDeque::new(),
                        born_frame: f,
                        out_of_bounds: false,
                    },
                    batch_index: i,
                });
            }
        }
        if f + 1 < frames.len() {
            motion_update(
                params,
                cfg,
                &mut survivors,
                &outputs,
                frame,
                &frames[f + 1],
                ctx,
                scenario_dt,
            );
        }
        state.queries = survivors.into_iter().map(|s| s.query).collect();
    }
    Ok(records)
}
