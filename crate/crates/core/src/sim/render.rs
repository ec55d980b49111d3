//! Rasterizes ground-truth objects into multi-camera feature pyramids.
//!
//! Each visible object center becomes a truncated Gaussian blob carrying its
//! class code, inverse depth, and sub-pixel offset encodings. Blobs are
//! scaled so that bilinear interpolation at the exact projected coordinate
//! recovers the class code with unit weight, which makes read-out exact
//! rather than approximate; overlapping blobs sum.

use rand::Rng;

use crate::error::Result;
use crate::geometry::project_point;
use crate::sim::{noise_rng, FrameObservation, GtTracklet, ScenarioConfig};
use crate::tensor::Tensor;

/// Dense H x W x C grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y, 0);
        &self.data[i..i + self.channels]
    }

    /// Non-differentiable constant tensor of shape [H, W, C].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(&[self.height, self.width, self.channels], self.data.clone())
    }
}

/// `levels[k][m]` is pyramid level k of camera m; level 0 is finest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Vec<FeatureMap>>,
}

impl FeaturePyramid {
    /// (sx, sy) mapping finest-level pixel coordinates onto level k.
    pub fn level_scale(&self, level: usize) -> (f64, f64) {
        let f = &self.levels[0][0];
        let l = &self.levels[level][0];
        (l.width as f64 / f.width as f64, l.height as f64 / f.height as f64)
    }
}

/// Class code: one-hot in the first half of the channel block.
pub fn class_code(class_id: usize, channels: usize) -> Vec<f64> {
    let mut code = vec![0.0; channels / 2];
    code[class_id] = 1.0;
    code
}

/// Renders feature maps for one frame of a scenario.
///
/// An object contributes to a camera when its center projects in front of
/// the camera and inside the finest-level image bounds; it then stamps a
/// blob at the corresponding coordinate of every level. Support is cut
/// exactly at 3 sigma. With `noise_std > 0`, IID Gaussian pixel noise is
/// added from a stream keyed by (frame, camera, level).
pub fn render_features(
    config: &ScenarioConfig,
    tracklets: &[GtTracklet],
    frame: &FrameObservation,
) -> Result<FeaturePyramid> {
    let fc = &config.features;
    let sigma = fc.blob_sigma;
    let mut levels: Vec<Vec<FeatureMap>> = fc
        .level_dims
        .iter()
        .map(|&(w, h)| vec![FeatureMap::zeros(w, h, fc.channels); frame.cameras.len()])
        .collect();
    let (w0, h0) = fc.level_dims[0];

    for t in tracklets {
        let Some(b) = t.box_at(frame.frame_index) else { continue };
        for (m, cam) in frame.cameras.iter().enumerate() {
            let Some((u, v, depth)) = project_point(cam, &b.center) else { continue };
            if !cam.contains(u, v) {
                continue;
            }
            let code = class_code(t.class_id, fc.channels);
            for level in levels.iter_mut() {
                let map = &mut level[m];
                let su = u * (map.width as f64 / w0 as f64);
                let sv = v * (map.height as f64 / h0 as f64);
                stamp_blob(map, su, sv, sigma, &code, depth);
            }
        }
    }

    if fc.noise_std > 0.0 {
        for (k, level) in levels.iter_mut().enumerate() {
            for (m, map) in level.iter_mut().enumerate() {
                let mut rng = noise_rng(config.seed, frame.frame_index, m, k);
                for value in &mut map.data {
                    *value += fc.noise_std * standard_normal(&mut rng);
                }
            }
        }
    }

    Ok(FeaturePyramid { levels })
}

/// Renders every frame, storing pyramids in the observations.
pub fn render_all(
    config: &ScenarioConfig,
    tracklets: &[GtTracklet],
    frames: &mut [FrameObservation],
) -> Result<()> {
    for frame in frames.iter_mut() {
        frame.features = Some(render_features(config, tracklets, frame)?);
    }
    Ok(())
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; the first uniform is kept away from zero for the log.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn stamp_blob(map: &mut FeatureMap, su: f64, sv: f64, sigma: f64, code: &[f64], depth: f64) {
    let radius = 3.0 * sigma;
    let x_lo = ((su - radius).ceil().max(0.0)) as usize;
    let x_hi = ((su + radius).floor().min(map.width as f64 - 1.0)) as isize;
    let y_lo = ((sv - radius).ceil().max(0.0)) as usize;
    let y_hi = ((sv + radius).floor().min(map.height as f64 - 1.0)) as isize;
    if x_hi < x_lo as isize || y_hi < y_lo as isize {
        return;
    }

    // Normalize so bilinear interpolation of the blob mass at (su, sv)
    // evaluates to exactly 1 when the coordinate is in sampling range.
    let mut norm = 1.0;
    if su >= 0.0 && su <= map.width as f64 - 1.0 && sv >= 0.0 && sv <= map.height as f64 - 1.0 {
        let x0 = (su.floor() as usize).min(map.width - 2);
        let y0 = (sv.floor() as usize).min(map.height - 2);
        let fx = su - x0 as f64;
        let fy = sv - y0 as f64;
        let g = |x: usize, y: usize| {
            let dx = x as f64 - su;
            let dy = y as f64 - sv;
            let r2 = dx * dx + dy * dy;
            if r2 <= radius * radius {
                (-(r2) / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            }
        };
        let interp = (1.0 - fx) * (1.0 - fy) * g(x0, y0)
            + fx * (1.0 - fy) * g(x0 + 1, y0)
            + (1.0 - fx) * fy * g(x0, y0 + 1)
            + fx * fy * g(x0 + 1, y0 + 1);
        if interp > 1e-12 {
            norm = 1.0 / interp;
        }
    }

    let half = map.channels / 2;
    let inv_depth = 1.0 / (1.0 + depth);
    for y in y_lo..=y_hi as usize {
        for x in x_lo..=x_hi as usize {
            let dx = x as f64 - su;
            let dy = y as f64 - sv;
            let r2 = dx * dx + dy * dy;
            if r2 > radius * radius {
                continue;
            }
            let g = norm * (-(r2) / (2.0 * sigma * sigma)).exp();
            let base = map.idx(x, y, 0);
            for (c, &v) in code.iter().enumerate() {
                map.data[base + c] += g * v;
            }
            map.data[base + half] += g * inv_depth;
            map.data[base + half + 1] += g * dx / radius;
            map.data[base + half + 2] += g * dy / radius;
            map.data[base + half + 3] += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use crate::sim::{build_scenario, ScenarioConfig, SpawnConfig, CLASSES};
    use approx::assert_relative_eq;
    use nalgebra::{Vector2, Vector3};

    fn lone_tracklet(center: Vector3<f64>, class_id: usize, frames: usize) -> GtTracklet {
        let b = Box3D::new(
            center,
            Vector3::from(CLASSES[class_id].1),
            Vector2::zeros(),
            0.0,
            class_id,
            1.0,
        );
        GtTracklet {
            track_id: 1,
            class_id,
            birth_frame: 0,
            death_frame: frames - 1,
            boxes: vec![Some(b); frames],
        }
    }

    fn base_frames(cfg: &ScenarioConfig) -> Vec<super::super::FrameObservation> {
        let empty = ScenarioConfig { spawn: SpawnConfig { count: 0, ..cfg.spawn.clone() }, ..cfg.clone() };
        build_scenario(&empty).unwrap().1
    }

    #[test]
    fn empty_scene_renders_zeros() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        let pyr = render_features(&cfg, &[], &frames[0]).unwrap();
        assert_eq!(pyr.levels.len(), 4);
        assert_eq!(pyr.levels[0].len(), 6);
        for level in &pyr.levels {
            for map in level {
                assert!(map.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn axis_object_peaks_at_principal_point() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        // Height 1.6 puts the center exactly on the forward optical axis.
        let t = lone_tracklet(Vector3::new(8.0, 0.0, 1.6), 0, cfg.num_frames);
        let pyr = render_features(&cfg, &[t], &frames[0]).unwrap();
        let map = &pyr.levels[0][0];
        assert_relative_eq!(map.pixel(32, 18)[0], 1.0, epsilon = 1e-12);
        // Class code channel matches the class exactly at the peak.
        assert_eq!(map.pixel(32, 18)[1], 0.0);
        assert_eq!(map.pixel(32, 18)[2], 0.0);
    }

    #[test]
    fn blob_peak_lies_within_half_pixel_of_projection() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        let center = Vector3::new(9.3, 1.7, 0.8);
        let t = lone_tracklet(center, 1, cfg.num_frames);
        let pyr = render_features(&cfg, &[t], &frames[0]).unwrap();
        let cams = &frames[0].cameras;
        let (u, v, _) = project_point(&cams[0], &center).unwrap();
        assert!(cams[0].contains(u, v));
        let map = &pyr.levels[0][0];
        let mut best = (0usize, 0usize, f64::MIN);
        for y in 0..map.height {
            for x in 0..map.width {
                let val = map.pixel(x, y)[1];
                if val > best.2 {
                    best = (x, y, val);
                }
            }
        }
        assert!((best.0 as f64 - u).abs() <= 0.5 + 1e-9, "peak x {} vs u {u}", best.0);
        assert!((best.1 as f64 - v).abs() <= 0.5 + 1e-9, "peak y {} vs v {v}", best.1);
    }

    #[test]
    fn bilinear_readout_recovers_class_code_on_every_level() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        let center = Vector3::new(7.9, -2.3, 1.1);
        let t = lone_tracklet(center, 2, cfg.num_frames);
        let pyr = render_features(&cfg, &[t], &frames[0]).unwrap();
        let (u, v, _) = project_point(&frames[0].cameras[0], &center).unwrap();
        for k in 0..4 {
            let map = &pyr.levels[k][0];
            let (sx, sy) = pyr.level_scale(k);
            let su = u * sx;
            let sv = v * sy;
            if su > map.width as f64 - 1.0 || sv > map.height as f64 - 1.0 {
                continue;
            }
            let mt = map.to_tensor();
            let uv = Tensor::constant(&[2], vec![su, sv]);
            let sampled = Tensor::bilinear_sample(&mt, &uv).to_vec();
            for c in 0..cfg.features.channels / 2 {
                let expect = if c == 2 { 1.0 } else { 0.0 };
                assert_relative_eq!(sampled[c], expect, epsilon = 1e-6);
            }
            // Presence channel integrates to one as well.
            assert_relative_eq!(sampled[cfg.features.channels / 2 + 3], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn support_is_exactly_zero_past_three_sigma() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        let center = Vector3::new(8.0, 0.0, 1.6);
        let t = lone_tracklet(center, 0, cfg.num_frames);
        let pyr = render_features(&cfg, &[t], &frames[0]).unwrap();
        let map = &pyr.levels[0][0];
        // Peak at (32, 18); 3 sigma = 6 px.
        assert_eq!(map.pixel(32 + 7, 18).iter().sum::<f64>(), 0.0);
        assert_eq!(map.pixel(32, 18 + 7).iter().sum::<f64>(), 0.0);
        assert_ne!(map.pixel(32 + 5, 18)[0], 0.0);
    }

    #[test]
    fn overlapping_blobs_sum() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        let a = lone_tracklet(Vector3::new(8.0, 0.0, 1.6), 0, cfg.num_frames);
        let mut b = lone_tracklet(Vector3::new(8.0, 0.0, 1.6), 1, cfg.num_frames);
        b.track_id = 2;
        let pyr = render_features(&cfg, &[a, b], &frames[0]).unwrap();
        let px = pyr.levels[0][0].pixel(32, 18);
        assert_relative_eq!(px[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(px[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rendering_is_deterministic_with_noise() {
        let mut cfg = ScenarioConfig::default();
        cfg.features.noise_std = 0.05;
        cfg.spawn.count = 4;
        let (tracklets, mut frames) = build_scenario(&cfg).unwrap();
        render_all(&cfg, &tracklets, &mut frames).unwrap();
        let again = render_features(&cfg, &tracklets, &frames[3]).unwrap();
        assert_eq!(frames[3].features.as_ref().unwrap(), &again);
        // Different frames get different noise.
        let other = render_features(&cfg, &tracklets, &frames[4]).unwrap();
        assert_ne!(&other, frames.get(3).unwrap().features.as_ref().unwrap());
    }

    #[test]
    fn default_rig_sees_objects_in_multiple_cameras() {
        let mut cfg = ScenarioConfig::default();
        cfg.spawn.count = 5;
        cfg.spawn.speed_range = (0.5, 2.0);
        cfg.seed = 3;
        let (tracklets, frames) = build_scenario(&cfg).unwrap();
        let events = super::super::count_multi_camera_events(&tracklets, &frames);
        assert!(events >= 1, "expected at least one cross-camera event, got {events}");
    }

    #[test]
    fn behind_camera_objects_leave_no_trace() {
        let cfg = ScenarioConfig::default();
        let frames = base_frames(&cfg);
        // Behind the forward camera but in front of the rear one.
        let t = lone_tracklet(Vector3::new(-8.0, 0.0, 1.6), 0, cfg.num_frames);
        let pyr = render_features(&cfg, &[t], &frames[0]).unwrap();
        assert!(pyr.levels[0][0].data.iter().all(|&v| v == 0.0));
        assert!(pyr.levels[0][5].data.iter().any(|&v| v != 0.0));
    }
}
