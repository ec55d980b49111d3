//! Query-based multi-camera decoder.
//!
//! A fixed set of learned newborn queries is injected per frame. Each query
//! carries an embedding, a positional encoding, and a 3D reference point
//! stored in logit space so it stays in the unit cube of normalized scene
//! coordinates. Decoder layers mix queries with self-attention, project each
//! reference into every camera, gather bilinear features over the pyramid
//! weighted by learned per-camera/per-level gates, and apply residual
//! embedding and reference updates. Shared heads decode boxes as residuals
//! around the reference plus class logits. A small FIFO memory bank per
//! track smooths embeddings across frames via dot-product attention.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraProjection, Pose, DEPTH_EPSILON};
use crate::sim::{FrameObservation, SceneBounds};
use crate::tensor::{mlp_forward, MlpParams, Tensor};

pub const NUM_LEVELS: usize = 4;
/// Box head output layout: [dx, dy, dz, log w, log l, log h, vx, vy, sin, cos].
pub const BOX_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Embedding width; must equal the feature-map channel count.
    pub channels: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Newborn queries injected per frame.
    pub num_newborn: usize,
    pub num_classes: usize,
    pub num_cameras: usize,
    /// Memory bank capacity per track.
    pub memory_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 32,
            num_layers: 2,
            num_heads: 4,
            num_newborn: 24,
            num_classes: 3,
            num_cameras: 6,
            memory_size: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return fail(format!(
                "channels {} must be a positive multiple of num_heads {}",
                self.channels, self.num_heads
            ));
        }
        if self.num_layers == 0
            || self.num_newborn == 0
            || self.num_classes == 0
            || self.num_cameras == 0
            || self.memory_size == 0
        {
            return fail("layer, query, class, camera and memory counts must be positive".into());
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one self-attention block, each a
/// single affine layer.
pub struct AttnParams {
    pub wq: MlpParams,
    pub wk: MlpParams,
    pub wv: MlpParams,
    pub wo: MlpParams,
}

impl AttnParams {
    fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        AttnParams {
            wq: MlpParams::new(&[c, c], rng),
            wk: MlpParams::new(&[c, c], rng),
            wv: MlpParams::new(&[c, c], rng),
            wo: MlpParams::new(&[c, c], rng),
        }
    }

    fn named(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        self.wq.named(&format!("{prefix}.wq"), out);
        self.wk.named(&format!("{prefix}.wk"), out);
        self.wv.named(&format!("{prefix}.wv"), out);
        self.wo.named(&format!("{prefix}.wo"), out);
    }
}

pub struct LayerParams {
    pub self_attn: AttnParams,
    /// Query -> per-(level, camera) gate logits.
    pub cam_weight: MlpParams,
    /// Residual embedding update from gathered features plus PE.
    pub q_update: MlpParams,
    /// Residual reference update in logit space.
    pub ref_update: MlpParams,
}

pub struct HeadParams {
    pub box_head: MlpParams,
    pub cls: MlpParams,
}

pub struct DecoderParams {
    pub config: DecoderConfig,
    pub newborn_embedding: Tensor,
    pub newborn_pe: Tensor,
    /// Maps a newborn embedding to its initial reference logits.
    pub ref_mlp: MlpParams,
    pub layers: Vec<LayerParams>,
    pub heads: HeadParams,
    pub memory_wq: Tensor,
    pub memory_wk: Tensor,
}

fn xavier<R: Rng>(shape: [usize; 2], rng: &mut R) -> Tensor {
    let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::param(&shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(-s..s)).collect())
}

/// Initial reference logits for slot `i` of `n`: a Fibonacci lattice over
/// the horizontal plane (margin away from the walls) at a height typical of
/// object centers. Low-discrepancy spacing keeps every scene position within
/// a short refinement distance of some slot's starting anchor.
fn lattice_logit(i: usize, n: usize) -> [f64; 3] {
    const GOLDEN_FRAC: f64 = 0.618_033_988_749_895;
    let frac = |x: f64| x - x.floor();
    let stretch = |t: f64| 0.06 + 0.88 * t;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let u = stretch((i as f64 + 0.5) / n as f64);
    let v = stretch(frac((i as f64 + 1.0) * GOLDEN_FRAC));
    [logit(u), logit(v), logit(0.24)]
}

impl DecoderParams {
    pub fn new<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        if c < 8 {
            return Err(Error::InvalidConfig(format!(
                "decoder needs at least 8 channels to carry reference seeds, got {c}"
            )));
        }
        let gates = NUM_LEVELS * config.num_cameras;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                self_attn: AttnParams::new(c, rng),
                cam_weight: MlpParams::new(&[c, c, gates], rng),
                q_update: MlpParams::new(&[c, c, c], rng),
                ref_update: MlpParams::new(&[c, c, 3], rng),
            })
            .collect();
        let mut box_bias = vec![0.0; BOX_DIM];
        box_bias[BOX_DIM - 1] = 1.0;
        let heads = HeadParams {
            box_head: MlpParams::new(&[c, c, BOX_DIM], rng).zero_final().with_final_bias(&box_bias),
            cls: MlpParams::new(&[c, c, config.num_classes], rng)
                .zero_final()
                .with_final_bias(&vec![-2.0; config.num_classes]),
        };

        // The first three embedding dims seed each slot's reference logits;
        // the reference MLP starts as an exact pass-through of those dims
        // (relu(x) - relu(-x) = x) plus damped random texture, so initial
        // anchors sit exactly on the lattice while the map stays trainable.
        let n = config.num_newborn;
        let embedding = xavier([n, c], rng);
        {
            let mut e = embedding.to_vec();
            for i in 0..n {
                let l = lattice_logit(i, n);
                e[i * c..i * c + 3].copy_from_slice(&l);
            }
            embedding.set_value(&e);
        }
        let ref_mlp = MlpParams::new(&[c, c, 3], rng);
        {
            let (hidden, _) = &ref_mlp.layers[0];
            let mut w = hidden.weight.to_vec().iter().map(|v| v * 0.05).collect::<Vec<f64>>();
            for d in 0..3 {
                w[d * c + d] = 1.0;
                w[d * c + 3 + d] = -1.0;
            }
            hidden.weight.set_value(&w);
            let (out, _) = &ref_mlp.layers[1];
            let mut w2 = out.weight.to_vec().iter().map(|v| v * 0.05).collect::<Vec<f64>>();
            for d in 0..3 {
                w2[d * 3 + d] = 1.0;
                w2[(3 + d) * 3 + d] = -1.0;
            }
            out.weight.set_value(&w2);
        }

        Ok(DecoderParams {
            config: config.clone(),
            newborn_embedding: embedding,
            newborn_pe: xavier([n, c], rng),
            ref_mlp,
            layers,
            heads,
            memory_wq: xavier([c, c], rng),
            memory_wk: xavier([c, c], rng),
        })
    }

    /// Stable checkpoint naming for every parameter tensor.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("newborn.embedding".into(), self.newborn_embedding.clone());
        out.insert("newborn.pe".into(), self.newborn_pe.clone());
        self.ref_mlp.named("ref_mlp", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.self_attn.named(&format!("layer{i}.self_attn"), &mut out);
            layer.cam_weight.named(&format!("layer{i}.cam_weight"), &mut out);
            layer.q_update.named(&format!("layer{i}.q_update"), &mut out);
            layer.ref_update.named(&format!("layer{i}.ref_update"), &mut out);
        }
        self.heads.box_head.named("heads.box", &mut out);
        self.heads.cls.named("heads.cls", &mut out);
        out.insert("memory.wq".into(), self.memory_wq.clone());
        out.insert("memory.wk".into(), self.memory_wk.clone());
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named().into_values().collect()
    }
}

/// Immutable per-frame inputs for the decoder: cameras, feature tensors and
/// scene bounds for reference (de)normalization.
pub struct FrameContext {
    pub cameras: Vec<CameraProjection>,
    /// `maps[level][camera]`, constant tensors of shape [H, W, C].
    pub maps: Vec<Vec<Tensor>>,
    /// Finest-level pixel coordinates scale to level k by these factors.
    pub scales: Vec<(f64, f64)>,
    pub bounds: SceneBounds,
}

impl FrameContext {
    pub fn new(frame: &FrameObservation, bounds: &SceneBounds) -> Result<FrameContext> {
        let pyramid = frame.features.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("frame {} has no rendered features", frame.frame_index))
        })?;
        if pyramid.levels.len() != NUM_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_LEVELS} pyramid levels, got {}",
                pyramid.levels.len()
            )));
        }
        let maps = pyramid
            .levels
            .iter()
            .map(|level| level.iter().map(|m| m.to_tensor()).collect())
            .collect();
        let scales = (0..NUM_LEVELS).map(|k| pyramid.level_scale(k)).collect();
        Ok(FrameContext { cameras: frame.cameras.clone(), maps, scales, bounds: bounds.clone() })
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }
}

/// Fresh newborn queries: learned embeddings and positional encodings, with
/// reference logits derived from the embeddings so references start inside
/// the scene volume.
pub fn newborn_queries(params: &DecoderParams) -> (Tensor, Tensor, Tensor) {
    let ref_logits = mlp_forward(&params.ref_mlp, &params.newborn_embedding);
    (params.newborn_embedding.clone(), params.newborn_pe.clone(), ref_logits)
}

/// Normalized [0,1]^3 reference -> meters.
pub fn denormalize_point(bounds: &SceneBounds, p: &Tensor) -> Tensor {
    let (ex, ey, ez) = (bounds.extent(0), bounds.extent(1), bounds.extent(2));
    p.linear_map(&[ex, 0.0, 0.0, 0.0, ey, 0.0, 0.0, 0.0, ez], 3, &bounds.min)
}

/// Meters -> normalized scene coordinates.
pub fn normalize_point(bounds: &SceneBounds, p: &Tensor) -> Tensor {
    let (ex, ey, ez) = (bounds.extent(0), bounds.extent(1), bounds.extent(2));
    p.linear_map(
        &[1.0 / ex, 0.0, 0.0, 0.0, 1.0 / ey, 0.0, 0.0, 0.0, 1.0 / ez],
        3,
        &[-bounds.min[0] / ex, -bounds.min[1] / ey, -bounds.min[2] / ez],
    )
}

/// Projects a metric point into a camera. Returns `None` when the point sits
/// at or behind the image plane; such cameras contribute nothing.
pub fn camera_uv(cam: &CameraProjection, meters: &Tensor) -> Option<Tensor> {
    let m = &cam.matrix;
    let mat = [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ];
    let homog = meters.linear_map(&mat, 3, &[m[(0, 3)], m[(1, 3)], m[(2, 3)]]);
    if homog.to_vec()[2] <= DEPTH_EPSILON {
        return None;
    }
    Some(homog.perspective_div())
}

/// Gathers the gated multi-camera multi-level feature for one reference
/// point. `gates` holds already-squashed weights laid out level-major:
/// index `k * M + m`. Off-image or behind-camera samples are exact zeros.
pub fn sample_multicam(ctx: &FrameContext, ref_logit: &Tensor, gates: &Tensor) -> Tensor {
    let channels = ctx.maps[0][0].shape()[2];
    let meters = denormalize_point(&ctx.bounds, &ref_logit.sigmoid());
    let uvs: Vec<Option<Tensor>> =
        ctx.cameras.iter().map(|cam| camera_uv(cam, &meters)).collect();
    let mut rows = Vec::with_capacity(NUM_LEVELS * ctx.num_cameras());
    for k in 0..NUM_LEVELS {
        let (sx, sy) = ctx.scales[k];
        for (m, uv) in uvs.iter().enumerate() {
            rows.push(match uv {
                Some(uv) => Tensor::bilinear_sample_scaled(&ctx.maps[k][m], uv, sx, sy),
                None => Tensor::zeros(&[channels]),
            });
        }
    }
    Tensor::scale_rows_sum(&Tensor::stack_rows(&rows), gates)
}

/// Multi-head self-attention over the query set. Keys and queries see the
/// positional encodings; values do not.
pub fn self_attention(attn: &AttnParams, num_heads: usize, q: &Tensor, pe: &Tensor) -> Tensor {
    let c = q.shape()[1];
    let d = c / num_heads;
    let qpe = q.add(pe);
    let qp = mlp_forward(&attn.wq, &qpe);
    let kp = mlp_forward(&attn.wk, &qpe);
    let vp = mlp_forward(&attn.wv, q);
    let scale = 1.0 / (d as f64).sqrt();
    let heads: Vec<Tensor> = (0..num_heads)
        .map(|h| {
            let (a, b) = (h * d, (h + 1) * d);
            let scores = qp.slice_cols(a, b).matmul_nt(&kp.slice_cols(a, b)).scale(scale);
            scores.softmax().matmul(&vp.slice_cols(a, b))
        })
        .collect();
    mlp_forward(&attn.wo, &Tensor::concat_cols(&heads))
}

/// One decoder layer: self-attention, gated multi-camera feature gathering,
/// residual embedding update (features + PE) and residual reference update
/// in logit space.
pub fn decoder_layer(
    layer: &LayerParams,
    num_heads: usize,
    ctx: &FrameContext,
    q: &Tensor,
    pe: &Tensor,
    ref_logits: &Tensor,
) -> (Tensor, Tensor) {
    let n = q.shape()[0];
    let q = q.add(&self_attention(&layer.self_attn, num_heads, q, pe));
    let gates = mlp_forward(&layer.cam_weight, &q).sigmoid();
    let feats: Vec<Tensor> = (0..n)
        .map(|i| sample_multicam(ctx, &ref_logits.row(i), &gates.row(i)))
        .collect();
    let f = Tensor::stack_rows(&feats);
    let q = q.add(&mlp_forward(&layer.q_update, &f.add(pe)));
    let ref_logits = ref_logits.add(&mlp_forward(&layer.ref_update, &f));
    (q, ref_logits)
}

/// Runs all decoder layers.
pub fn run_decoder(
    params: &DecoderParams,
    ctx: &FrameContext,
    q: &Tensor,
    pe: &Tensor,
    ref_logits: &Tensor,
) -> (Tensor, Tensor) {
    let mut q = q.clone();
    let mut ref_logits = ref_logits.clone();
    for layer in &params.layers {
        (q, ref_logits) = decoder_layer(layer, params.config.num_heads, ctx, &q, pe, &ref_logits);
    }
    (q, ref_logits)
}

/// One decoded query: differentiable box parts plus plain score/class reads.
pub struct Candidate {
    /// Meters; reference point plus residual.
    pub center: Tensor,
    /// Meters; exponential of the head output.
    pub size: Tensor,
    /// Meters per second, ego frame.
    pub velocity: Tensor,
    /// Unit (sin, cos).
    pub yaw: Tensor,
    pub cls_logits: Tensor,
    pub score: f64,
    pub class_id: usize,
}

impl Candidate {
    pub fn to_box(&self) -> Box3D {
        let c = self.center.to_vec();
        let s = self.size.to_vec();
        let v = self.velocity.to_vec();
        let y = self.yaw.to_vec();
        Box3D {
            center: Vector3::new(c[0], c[1], c[2]),
            size: Vector3::new(s[0], s[1], s[2]),
            velocity: nalgebra::Vector2::new(v[0], v[1]),
            yaw_sin: y[0],
            yaw_cos: y[1],
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Decodes every query into box parameters: the center is the denormalized
/// reference plus a metric residual, sizes are exponentiated, the yaw pair
/// is normalized to the unit circle, and the score is the best per-class
/// sigmoid.
pub fn decode_candidates(
    params: &DecoderParams,
    bounds: &SceneBounds,
    q: &Tensor,
    ref_logits: &Tensor,
) -> Vec<Candidate> {
    let n = q.shape()[0];
    let box_out = mlp_forward(&params.heads.box_head, q);
    let cls_out = mlp_forward(&params.heads.cls, q);
    (0..n)
        .map(|i| {
            let raw = box_out.row(i);
            let anchor = denormalize_point(bounds, &ref_logits.row(i).sigmoid());
            let cls_logits = cls_out.row(i);
            let (class_id, score) = cls_logits
                .to_vec()
                .iter()
                .map(|&l| 1.0 / (1.0 + (-l).exp()))
                .enumerate()
                .fold((0, f64::MIN), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
            Candidate {
                center: anchor.add(&raw.slice(0, 3)),
                size: raw.slice(3, 6).exp(),
                velocity: raw.slice(6, 8),
                yaw: raw.slice(8, 10).l2_normalize(),
                cls_logits,
                score,
                class_id,
            }
        })
        .collect()
}

/// Attends a query embedding over its memory bank: projected query and keys,
/// raw bank entries as values. A bank of identical entries therefore returns
/// that entry exactly; an empty bank is the identity.
pub fn memory_attend(params: &DecoderParams, q: &Tensor, bank: &[Tensor]) -> Tensor {
    if bank.is_empty() {
        return q.clone();
    }
    let c = q.numel();
    let values = Tensor::stack_rows(bank);
    let qp = q.reshape(&[1, c]).matmul(&params.memory_wq);
    let kp = values.matmul(&params.memory_wk);
    let w = qp.matmul_nt(&kp).scale(1.0 / (c as f64).sqrt()).softmax().reshape(&[bank.len()]);
    Tensor::scale_rows_sum(&values, &w)
}

/// Carries a reference across an ego-motion step: denormalize, advance by
/// the predicted velocity for `dt`, re-express in the next ego frame, then
/// renormalize back to logit space. The flag reports whether the compensated
/// point stayed inside the scene bounds before clamping.
pub fn compensate_ref_logit(
    bounds: &SceneBounds,
    ref_logit: &Tensor,
    velocity: &Tensor,
    dt: f64,
    pose_t: &Pose,
    pose_next: &Pose,
) -> (Tensor, bool) {
    let meters = denormalize_point(bounds, &ref_logit.sigmoid());
    let shift = velocity.linear_map(&[dt, 0.0, 0.0, dt, 0.0, 0.0], 3, &[0.0; 3]);
    let moved = meters.add(&shift);
    let m: Matrix3<f64> = pose_next.rotation.transpose() * pose_t.rotation;
    let o: Vector3<f64> =
        pose_next.rotation.transpose() * (pose_t.translation - pose_next.translation);
    let mat: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    let compensated = moved.linear_map(&mat, 3, &[o.x, o.y, o.z]);
    let normalized = normalize_point(bounds, &compensated);
    let inside = normalized.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v));
    (normalized.clamp_unit(1e-6).logit(), inside)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compensate_reference;
    use crate::sim::render::{FeatureMap, FeaturePyramid};
    use crate::sim::RigConfig;
    use crate::tensor::checkpoint::{load_into, write_checkpoint};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> DecoderConfig {
        DecoderConfig {
            channels: 8,
            num_layers: 2,
            num_heads: 2,
            num_newborn: 2,
            num_classes: 2,
            num_cameras: 2,
            memory_size: 4,
        }
    }

    /// Two cameras (forward and rear), 8x6 images, random feature values,
    /// bounds placed so default references land in front of camera 0.
    fn tiny_context(seed: u64, channels: usize) -> FrameContext {
        let rig = RigConfig {
            yaws_deg: vec![0.0, 180.0],
            image_width: 8,
            image_height: 6,
            ..RigConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(8usize, 6usize), (4, 3), (2, 2), (2, 2)];
        let levels = dims
            .iter()
            .map(|&(w, h)| {
                (0..2)
                    .map(|_| FeatureMap {
                        width: w,
                        height: h,
                        channels,
                        data: (0..w * h * channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let pyramid = FeaturePyramid { levels };
        let scales = (0..NUM_LEVELS).map(|k| pyramid.level_scale(k)).collect();
        FrameContext {
            cameras: rig.projections(),
            maps: pyramid
                .levels
                .iter()
                .map(|level| level.iter().map(|m| m.to_tensor()).collect())
                .collect(),
            scales,
            bounds: SceneBounds { min: [2.0, -3.0, 0.0], max: [10.0, 3.0, 3.0] },
        }
    }

    #[test]
    fn newborn_references_live_inside_the_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DecoderParams::new(&DecoderConfig::default(), &mut rng).unwrap();
        let (_, _, ref_logits) = newborn_queries(&params);
        assert_eq!(ref_logits.shape(), &[24, 3]);
        for v in ref_logits.sigmoid().to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zeroed_box_head_decodes_reference_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config();
        let params = DecoderParams::new(&cfg, &mut rng).unwrap();
        let bounds = SceneBounds::default();
        let (q, _, ref_logits) = newborn_queries(&params);
        let cands = decode_candidates(&params, &bounds, &q, &ref_logits);
        assert_eq!(cands.len(), 2);
        for (i, cand) in cands.iter().enumerate() {
            let anchor = denormalize_point(&bounds, &ref_logits.row(i).sigmoid()).to_vec();
            let center = cand.center.to_vec();
            for a in 0..3 {
                assert_relative_eq!(center[a], anchor[a], epsilon = 1e-12);
            }
            for s in cand.size.to_vec() {
                assert_relative_eq!(s, 1.0, epsilon = 1e-12);
            }
            let yaw = cand.yaw.to_vec();
            assert_relative_eq!(yaw[0], 0.0, epsilon = 1e-12);
            assert_relative_eq!(yaw[1], 1.0, epsilon = 1e-12);
            assert_eq!(cand.velocity.to_vec(), vec![0.0, 0.0]);
            // Class bias of -2 puts every score at sigmoid(-2).
            assert_relative_eq!(cand.score, 1.0 / (1.0 + 2f64.exp()), epsilon = 1e-12);
        }
    }

    #[test]
    fn decoder_layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config();
        let params = DecoderParams::new(&cfg, &mut rng).unwrap();
        let ctx = tiny_context(7, cfg.channels);
        let n = 3;
        let q = Tensor::constant(
            &[n, cfg.channels],
            (0..n * cfg.channels).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect(),
        );
        let pe = Tensor::constant(
            &[n, cfg.channels],
            (0..n * cfg.channels).map(|i| ((i * 13) % 7) as f64 * 0.1).collect(),
        );
        let r = Tensor::constant(&[n, 3], vec![0.6, 0.5, 0.5, 0.4, 0.45, 0.6, 0.55, 0.6, 0.4]);

        let permute = |t: &Tensor, perm: &[usize]| {
            Tensor::stack_rows(&perm.iter().map(|&i| t.row(i)).collect::<Vec<_>>())
        };
        let perm = [2usize, 0, 1];
        let (q1, r1) = decoder_layer(&params.layers[0], cfg.num_heads, &ctx, &q, &pe, &r);
        let (q2, r2) = decoder_layer(
            &params.layers[0],
            cfg.num_heads,
            &ctx,
            &permute(&q, &perm),
            &permute(&pe, &perm),
            &permute(&r, &perm),
        );
        let q1p = permute(&q1, &perm).to_vec();
        for (a, b) in q1p.iter().zip(q2.to_vec()) {
            assert_relative_eq!(*a, b, epsilon = 1e-9);
        }
        let r1p = permute(&r1, &perm).to_vec();
        for (a, b) in r1p.iter().zip(r2.to_vec()) {
            assert_relative_eq!(*a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_query_attention_reduces_to_value_output_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config();
        let params = DecoderParams::new(&cfg, &mut rng).unwrap();
        let q = Tensor::constant(&[1, cfg.channels], (0..cfg.channels).map(|i| i as f64 * 0.1).collect());
        let pe = Tensor::constant(&[1, cfg.channels], vec![0.2; cfg.channels]);
        let attn = &params.layers[0].self_attn;
        let out = self_attention(attn, cfg.num_heads, &q, &pe);
        let direct = mlp_forward(&attn.wo, &mlp_forward(&attn.wv, &q));
        for (a, b) in out.to_vec().iter().zip(direct.to_vec()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn off_image_references_gather_exact_zeros() {
        let ctx = tiny_context(11, 8);
        // The near scene corner (2, 3, 1.5) projects far left of the forward
        // image and behind the rear camera.
        let ref_logit = Tensor::constant(&[3], vec![-30.0, 30.0, 0.0]);
        let corner = denormalize_point(&ctx.bounds, &ref_logit.sigmoid());
        let uv = camera_uv(&ctx.cameras[0], &corner).unwrap().to_vec();
        assert!(uv[0] < 0.0, "corner still projects inside: {uv:?}");
        assert!(camera_uv(&ctx.cameras[1], &corner).is_none());
        let gates = Tensor::constant(&[NUM_LEVELS * 2], vec![0.7; NUM_LEVELS * 2]);
        let f = sample_multicam(&ctx, &ref_logit, &gates);
        assert!(f.to_vec().iter().all(|&v| v == 0.0), "expected exact zeros");
    }

    #[test]
    fn gated_sampling_matches_hand_computed_sum() {
        // Constant-valued maps make bilinear reads equal the map constant,
        // so the gathered feature is sum over visible (level, camera) pairs
        // of gate * constant.
        let mut ctx = tiny_context(13, 2);
        let ref_logit = Tensor::constant(&[3], vec![0.0, 0.0, 0.0]);
        let center = denormalize_point(&ctx.bounds, &ref_logit.sigmoid());
        let uv = camera_uv(&ctx.cameras[0], &center).unwrap().to_vec();
        assert!(camera_uv(&ctx.cameras[1], &center).is_none());

        let mut expected = vec![0.0; 2];
        let mut gates = Vec::new();
        for k in 0..NUM_LEVELS {
            for m in 0..2 {
                let c0 = (k as f64) + 1.0 + (m as f64) * 0.5;
                let shape = ctx.maps[k][m].shape().to_vec();
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|i| if i % 2 == 0 { c0 } else { -c0 }).collect();
                ctx.maps[k][m] = Tensor::constant(&shape, data);
                let g = 0.1 + 0.1 * (k * 2 + m) as f64;
                gates.push(g);
                let (sx, sy) = ctx.scales[k];
                let visible = m == 0
                    && uv[0] * sx <= (shape[1] - 1) as f64
                    && uv[1] * sy <= (shape[0] - 1) as f64;
                if visible {
                    expected[0] += g * c0;
                    expected[1] += g * (-c0);
                }
            }
        }
        let f = sample_multicam(&ctx, &ref_logit, &Tensor::constant(&[gates.len()], gates));
        let fv = f.to_vec();
        assert!(expected[0] != 0.0);
        assert_relative_eq!(fv[0], expected[0], epsilon = 1e-9);
        assert_relative_eq!(fv[1], expected[1], epsilon = 1e-9);
    }

    #[test]
    fn uniform_memory_bank_returns_its_entry_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DecoderParams::new(&tiny_config(), &mut rng).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let q = Tensor::constant(&[8], vec![0.5; 8]);
        let bank: Vec<Tensor> = (0..4).map(|_| Tensor::constant(&[8], u.clone())).collect();
        let out = memory_attend(&params, &q, &bank);
        for (a, b) in out.to_vec().iter().zip(&u) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        // Empty bank: identity.
        let id = memory_attend(&params, &q, &[]);
        assert_eq!(id.to_vec(), q.to_vec());
    }

    #[test]
    fn memory_attention_stays_in_the_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DecoderParams::new(&tiny_config(), &mut rng).unwrap();
        let a = Tensor::constant(&[8], vec![1.0; 8]);
        let b = Tensor::constant(&[8], vec![-1.0; 8]);
        let q = Tensor::constant(&[8], (0..8).map(|i| (i as f64 - 4.0) * 0.2).collect());
        let out = memory_attend(&params, &q, &[a, b]);
        for v in out.to_vec() {
            assert!((-1.0..=1.0).contains(&v), "value {v} outside hull");
        }
    }

    #[test]
    fn reference_compensation_agrees_with_geometry() {
        let bounds = SceneBounds::default();
        let pose_t = Pose::from_yaw_translation(0.3, Vector3::new(1.0, -2.0, 0.0));
        let pose_next = Pose::from_yaw_translation(0.45, Vector3::new(2.5, -1.0, 0.0));
        let ref_logit = Tensor::constant(&[3], vec![0.3, -0.2, 0.1]);
        let vel = Tensor::constant(&[2], vec![1.2, -0.4]);
        let (out, inside) =
            compensate_ref_logit(&bounds, &ref_logit, &vel, 0.5, &pose_t, &pose_next);
        assert!(inside);
        let p01 = ref_logit.sigmoid().to_vec();
        let meters = bounds.denormalize(&Vector3::new(p01[0], p01[1], p01[2]));
        let expect = compensate_reference(
            &meters,
            &nalgebra::Vector2::new(1.2, -0.4),
            0.5,
            &pose_t,
            &pose_next,
        );
        let back = out.sigmoid().to_vec();
        let got = bounds.denormalize(&Vector3::new(back[0], back[1], back[2]));
        assert_relative_eq!((got - expect).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn out_of_bounds_compensation_clamps_and_reports() {
        let bounds = SceneBounds::default();
        let pose = Pose::identity();
        let far = Pose::from_yaw_translation(0.0, Vector3::new(100.0, 0.0, 0.0));
        let ref_logit = Tensor::constant(&[3], vec![0.0, 0.0, 0.0]);
        let vel = Tensor::constant(&[2], vec![0.0, 0.0]);
        let (out, inside) = compensate_ref_logit(&bounds, &ref_logit, &vel, 0.5, &pose, &far);
        assert!(!inside);
        let v = out.sigmoid().to_vec();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_relative_eq!(v[0], 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn parameters_round_trip_through_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("dec");
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DecoderParams::new(&cfg, &mut rng).unwrap();
        write_checkpoint(&stem, &params.named()).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let fresh = DecoderParams::new(&cfg, &mut rng2).unwrap();
        load_into(&stem, &fresh.named()).unwrap();
        for (name, t) in params.named() {
            assert_eq!(t.to_vec(), fresh.named()[&name].to_vec(), "mismatch in {name}");
        }
    }

    #[test]
    fn full_decoder_stack_passes_finite_difference_checks() {
        for seed in [0u64, 1] {
            let cfg = tiny_config();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = DecoderParams::new(&cfg, &mut rng).unwrap();
            let ctx = tiny_context(seed + 50, cfg.channels);
            let pose_t = Pose::identity();
            let pose_next = Pose::from_yaw_translation(0.05, Vector3::new(0.4, 0.0, 0.0));
            let tensors = params.params();
            let build = || {
                let (q0, pe, r0) = newborn_queries(&params);
                let (q, r) = run_decoder(&params, &ctx, &q0, &pe, &r0);
                let cands = decode_candidates(&params, &ctx.bounds, &q, &r);
                let mut loss = Tensor::zeros(&[1]);
                for (i, cand) in cands.iter().enumerate() {
                    loss = loss
                        .add(&cand.center.sum().scale(0.01))
                        .add(&cand.size.sum().scale(0.1))
                        .add(&cand.velocity.sum().scale(0.1))
                        .add(&cand.yaw.sum().scale(0.1))
                        .add(&crate::tensor::focal_loss(&cand.cls_logits, Some(i % 2), 2.0, 0.25));
                }
                // Memory attention and reference compensation join the graph.
                let attended = memory_attend(&params, &q.row(0), &[q.row(0), q.row(1)]);
                let (next_ref, _) = compensate_ref_logit(
                    &ctx.bounds,
                    &r.row(0),
                    &cands[0].velocity,
                    0.5,
                    &pose_t,
                    &pose_next,
                );
                loss.add(&attended.sum().scale(0.05)).add(&next_ref.sum().scale(0.01))
            };
            let err = crate::tensor::gradcheck(build, &tensors, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel grad err {err}");
        }
    }
}
