//! Deterministic synthetic multi-camera world: ground-truth tracklets with
//! births, deaths and constant-velocity motion, a pinhole camera rig, an ego
//! trajectory, and (in [`render`]) pyramidal feature maps.
//!
//! Everything is a pure function of the scenario config; per-object RNG
//! streams make trajectories independent of spawn order.

pub mod render;

pub use render::{render_features, FeatureMap, FeaturePyramid};

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::{project_point, Box3D, CameraProjection, Pose};
use crate::records::TrackRecord;

/// Object classes are fixed: (name, (w, l, h) meters).
pub const CLASSES: [(&str, [f64; 3]); 3] = [
    ("car", [1.9, 4.5, 1.6]),
    ("truck", [2.5, 7.0, 2.8]),
    ("pedestrian", [0.7, 0.7, 1.7]),
];

pub const NUM_CLASSES: usize = CLASSES.len();

/// RNG stream ids: objects get `OBJECT_STREAM + index`, pixel noise gets a
/// stream derived from (frame, camera, level).
const OBJECT_STREAM: u64 = 1_000;
const NOISE_STREAM: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds { min: [-20.0, -20.0, 0.0], max: [20.0, 20.0, 4.0] }
    }
}

impl SceneBounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    /// Meters -> [0,1]^3.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.min[0]) / self.extent(0),
            (p.y - self.min[1]) / self.extent(1),
            (p.z - self.min[2]) / self.extent(2),
        )
    }

    /// [0,1]^3 -> meters.
    pub fn denormalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.min[0] + p.x * self.extent(0),
            self.min[1] + p.y * self.extent(1),
            self.min[2] + p.z * self.extent(2),
        )
    }
}

/// Pinhole rig: co-located cameras at distinct yaws on the ego, all sharing
/// one intrinsic matrix derived from the horizontal field of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub yaws_deg: Vec<f64>,
    pub hfov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub mount_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            yaws_deg: vec![0.0, 55.0, -55.0, 110.0, -110.0, 180.0],
            hfov_deg: 60.0,
            image_width: 64,
            image_height: 36,
            mount_height: 1.6,
        }
    }
}

impl RigConfig {
    pub fn num_cameras(&self) -> usize {
        self.yaws_deg.len()
    }

    /// Ego-frame 3x4 projection per camera: optical axis along the camera
    /// yaw, image x to the right, image y down.
    pub fn projections(&self) -> Vec<CameraProjection> {
        let w = self.image_width as f64;
        let h = self.image_height as f64;
        let f = (w / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        let k = Matrix3::new(f, 0.0, w / 2.0, 0.0, f, h / 2.0, 0.0, 0.0, 1.0);
        self.yaws_deg
            .iter()
            .enumerate()
            .map(|(i, yaw_deg)| {
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let r = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
                let center = Vector3::new(0.0, 0.0, self.mount_height);
                let t = -(r * center);
                let mut m = Matrix3x4::zeros();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(k * r));
                m.set_column(3, &(k * t));
                CameraProjection {
                    matrix: m,
                    image_width: w,
                    image_height: h,
                    camera_id: i,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnConfig {
    pub count: usize,
    /// Sampling weight per class, indexed like [`CLASSES`].
    pub class_mix: Vec<f64>,
    pub speed_range: (f64, f64),
    pub yaw_rate_range: (f64, f64),
    pub birth_frame_range: (usize, usize),
    pub death_frame_range: (usize, usize),
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            count: 5,
            class_mix: vec![0.6, 0.2, 0.2],
            speed_range: (0.0, 2.0),
            yaw_rate_range: (0.0, 0.0),
            birth_frame_range: (0, 0),
            death_frame_range: (19, 19),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// (width, height) per pyramid level, finest first.
    pub level_dims: Vec<(usize, usize)>,
    pub channels: usize,
    /// Gaussian blob std in level-local pixels; support is truncated at 3
    /// sigma exactly.
    pub blob_sigma: f64,
    pub noise_std: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            level_dims: vec![(64, 36), (32, 18), (16, 9), (8, 5)],
            channels: 32,
            blob_sigma: 2.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EgoMotion {
    Straight { speed: f64 },
    Arc { speed: f64, yaw_rate: f64 },
}

impl Default for EgoMotion {
    fn default() -> Self {
        EgoMotion::Straight { speed: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_frames: usize,
    pub frame_dt: f64,
    pub rig: RigConfig,
    pub scene_bounds: SceneBounds,
    pub spawn: SpawnConfig,
    pub features: FeatureConfig,
    pub ego: EgoMotion,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            num_frames: 20,
            frame_dt: 0.5,
            rig: RigConfig::default(),
            scene_bounds: SceneBounds::default(),
            spawn: SpawnConfig::default(),
            features: FeatureConfig::default(),
            ego: EgoMotion::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_frames == 0 {
            return fail("num_frames must be positive".into());
        }
        if self.frame_dt <= 0.0 {
            return fail(format!("frame_dt {} must be positive", self.frame_dt));
        }
        if self.rig.num_cameras() == 0 {
            return fail("camera rig has no cameras".into());
        }
        if self.features.level_dims.len() != 4 {
            return fail(format!(
                "feature pyramid must have 4 levels, got {}",
                self.features.level_dims.len()
            ));
        }
        if self.features.level_dims.iter().any(|&(w, h)| w < 2 || h < 2) {
            return fail(format!("all level dims must be >= 2, got {:?}", self.features.level_dims));
        }
        if self.features.level_dims[0]
            != (self.rig.image_width, self.rig.image_height)
        {
            return fail(format!(
                "finest level dims {:?} must match camera image size {}x{}",
                self.features.level_dims[0], self.rig.image_width, self.rig.image_height
            ));
        }
        if self.features.channels % 2 != 0 || self.features.channels / 2 < NUM_CLASSES {
            return fail(format!(
                "feature channels must be even and at least {}, got {}",
                2 * NUM_CLASSES,
                self.features.channels
            ));
        }
        if self.features.blob_sigma <= 0.0 {
            return fail("blob_sigma must be positive".into());
        }
        if self.spawn.class_mix.len() != NUM_CLASSES
            || self.spawn.class_mix.iter().any(|&w| w < 0.0)
            || self.spawn.class_mix.iter().sum::<f64>() <= 0.0
        {
            return fail(format!("class_mix must be {NUM_CLASSES} nonnegative weights"));
        }
        if self.spawn.speed_range.0 < 0.0 || self.spawn.speed_range.1 < self.spawn.speed_range.0 {
            return fail(format!("bad speed range {:?}", self.spawn.speed_range));
        }
        let speed = match self.ego {
            EgoMotion::Straight { speed } => speed,
            EgoMotion::Arc { speed, .. } => speed,
        };
        if speed < 0.0 {
            return fail(format!("ego speed {speed} must be nonnegative"));
        }
        Ok(())
    }

    /// World-from-ego pose at a frame; arcs integrate piecewise per frame,
    /// matching the object motion model.
    pub fn ego_pose(&self, frame: usize) -> Pose {
        match self.ego {
            EgoMotion::Straight { speed } => Pose::from_yaw_translation(
                0.0,
                Vector3::new(speed * self.frame_dt * frame as f64, 0.0, 0.0),
            ),
            EgoMotion::Arc { speed, yaw_rate } => {
                let mut pos = Vector2::new(0.0, 0.0);
                let mut yaw = 0.0f64;
                for _ in 0..frame {
                    pos += speed * self.frame_dt * Vector2::new(yaw.cos(), yaw.sin());
                    yaw += yaw_rate * self.frame_dt;
                }
                Pose::from_yaw_translation(yaw, Vector3::new(pos.x, pos.y, 0.0))
            }
        }
    }
}

/// One ground-truth object: per-frame ego-frame boxes plus its lifespan.
#[derive(Debug, Clone)]
pub struct GtTracklet {
    pub track_id: u64,
    pub class_id: usize,
    pub birth_frame: usize,
    /// Inclusive.
    pub death_frame: usize,
    /// Indexed by frame; `Some` exactly on [birth_frame, death_frame].
    pub boxes: Vec<Option<Box3D>>,
}

impl GtTracklet {
    pub fn alive_at(&self, frame: usize) -> bool {
        frame >= self.birth_frame && frame <= self.death_frame
    }

    pub fn box_at(&self, frame: usize) -> Option<&Box3D> {
        self.boxes.get(frame).and_then(|b| b.as_ref())
    }
}

/// Per-frame observation bundle; features are filled by
/// [`render::render_features`].
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub timestamp: f64,
    pub ego_pose: Pose,
    pub cameras: Vec<CameraProjection>,
    pub features: Option<FeaturePyramid>,
}

/// Builds the ground truth and featureless frame observations for a config.
pub fn build_scenario(config: &ScenarioConfig) -> Result<(Vec<GtTracklet>, Vec<FrameObservation>)> {
    config.validate()?;
    let cameras = config.rig.projections();
    for cam in &cameras {
        cam.validate()?;
    }
    let poses: Vec<Pose> = (0..config.num_frames).map(|f| config.ego_pose(f)).collect();

    let frames: Vec<FrameObservation> = (0..config.num_frames)
        .map(|f| FrameObservation {
            frame_index: f,
            timestamp: f as f64 * config.frame_dt,
            ego_pose: poses[f].clone(),
            cameras: cameras.clone(),
            features: None,
        })
        .collect();

    let mut tracklets: Vec<GtTracklet> = Vec::new();
    for i in 0..config.spawn.count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(OBJECT_STREAM + i as u64);
        if let Some(t) = spawn_object(config, &poses, &tracklets, i as u64 + 1, &mut rng)? {
            tracklets.push(t);
        }
    }
    Ok((tracklets, frames))
}

fn weighted_class(mix: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    mix.len() - 1
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn spawn_object(
    config: &ScenarioConfig,
    poses: &[Pose],
    existing: &[GtTracklet],
    track_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<GtTracklet>> {
    let class_id = weighted_class(&config.spawn.class_mix, rng);
    let size = Vector3::from(CLASSES[class_id].1);
    let (blo, bhi) = config.spawn.birth_frame_range;
    let birth = if bhi > blo { rng.random_range(blo..=bhi) } else { blo };
    if birth >= config.num_frames {
        return Ok(None);
    }
    let (dlo, dhi) = config.spawn.death_frame_range;
    let dlo = dlo.max(birth);
    let dhi = dhi.max(dlo);
    let death_target = if dhi > dlo { rng.random_range(dlo..=dhi) } else { dlo };
    let death_target = death_target.min(config.num_frames - 1);
    let speed = range_sample(rng, config.spawn.speed_range);
    let yaw_rate = range_sample(rng, config.spawn.yaw_rate_range);
    let heading0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);

    let b = &config.scene_bounds;
    // Keep the whole footprint inside the bounds at spawn time.
    let margin = 0.5 * size.x.hypot(size.y);
    let birth_pose = &poses[birth];
    let mut world_pos = None;
    for _try in 0..100 {
        let ego_xy = Vector3::new(
            rng.random_range(b.min[0] + margin..b.max[0] - margin),
            rng.random_range(b.min[1] + margin..b.max[1] - margin),
            size.z * 0.5,
        );
        let candidate = Box3D::new(ego_xy, size, Vector2::zeros(), heading0, class_id, 1.0);
        let overlaps = existing.iter().any(|other| {
            other.box_at(birth).is_some_and(|ob| {
                crate::geometry::iou_3d(&candidate, ob, 1.0).map(|v| v > 0.1).unwrap_or(false)
            })
        });
        if !overlaps {
            world_pos = Some(birth_pose.transform_point(&ego_xy));
            break;
        }
    }
    let Some(mut world) = world_pos else {
        return Err(Error::InvalidConfig(format!(
            "could not place object {track_id} without initial overlap after 100 tries"
        )));
    };

    let mut boxes: Vec<Option<Box3D>> = vec![None; config.num_frames];
    let mut heading = heading0 + poses[birth].yaw();
    let mut death = birth;
    for f in birth..=death_target {
        let pose = &poses[f];
        let ego_center = pose.inverse().transform_point(&world);
        if f > birth && !b.contains(&ego_center) {
            break;
        }
        let world_vel = speed * Vector2::new(heading.cos(), heading.sin());
        let ego_yaw = pose.yaw();
        let (s, c) = (-ego_yaw).sin_cos();
        let ego_vel = Vector2::new(
            c * world_vel.x - s * world_vel.y,
            s * world_vel.x + c * world_vel.y,
        );
        boxes[f] = Some(Box3D::new(
            ego_center,
            size,
            ego_vel,
            heading - ego_yaw,
            class_id,
            1.0,
        ));
        death = f;
        world += Vector3::new(world_vel.x, world_vel.y, 0.0) * config.frame_dt;
        heading += yaw_rate * config.frame_dt;
    }
    Ok(Some(GtTracklet { track_id, class_id, birth_frame: birth, death_frame: death, boxes }))
}

/// Track ids of ground-truth objects born exactly at `frame_index`.
pub fn newly_appeared(tracklets: &[GtTracklet], frame_index: usize) -> BTreeSet<u64> {
    tracklets
        .iter()
        .filter(|t| t.birth_frame == frame_index && t.alive_at(frame_index))
        .map(|t| t.track_id)
        .collect()
}

/// Flattens ground truth into the JSON-lines record schema.
pub fn gt_records(tracklets: &[GtTracklet]) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    let frames = tracklets.iter().map(|t| t.boxes.len()).max().unwrap_or(0);
    for f in 0..frames {
        for t in tracklets {
            if let Some(b) = t.box_at(f) {
                let mut rec = TrackRecord::from_box(f, t.track_id, b, false);
                rec.score = 1.0;
                out.push(rec);
            }
        }
    }
    out
}

/// Counts (frame, object) pairs whose center projects inside two or more
/// cameras; the default rig overlaps adjacent frusta by a few degrees.
pub fn count_multi_camera_events(tracklets: &[GtTracklet], frames: &[FrameObservation]) -> usize {
    let mut events = 0;
    for frame in frames {
        for t in tracklets {
            let Some(b) = t.box_at(frame.frame_index) else { continue };
            let visible = frame
                .cameras
                .iter()
                .filter(|cam| {
                    project_point(cam, &b.center)
                        .map(|(u, v, _)| cam.contains(u, v))
                        .unwrap_or(false)
                })
                .count();
            if visible >= 2 {
                events += 1;
            }
        }
    }
    events
}

/// RNG for additive pixel noise, independent per (frame, camera, level).
pub(crate) fn noise_rng(seed: u64, frame: usize, camera: usize, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM + ((frame as u64) << 16) + ((camera as u64) << 8) + level as u64);
    rng
}
