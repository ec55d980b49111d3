//! Rigid-body poses, pinhole projection, 3D box parametrization and overlap
//! measures, plus the ego/motion compensation transform applied to reference
//! points between frames.
//!
//! All values are immutable after construction and all operations are pure.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the camera plane than this are treated as invisible.
pub const DEPTH_EPSILON: f64 = 1e-3;

/// Vertex dedup tolerance for polygon clipping.
const VERTEX_EPS: f64 = 1e-9;

/// World-from-ego rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Planar pose: rotation about z by `yaw`, then translate.
    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    /// Checks orthonormality and det = +1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).norm();
        if err > tol {
            return Err(Error::InvalidArgument(format!(
                "pose rotation not orthonormal (|R'R - I| = {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "pose rotation determinant {det} != 1"
            )));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` then `other`: the transform mapping x to self(other(x)).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Planar heading of the ego x axis.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// 3x4 pinhole projection in ego coordinates, together with the image bounds
/// used for visibility decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraProjection {
    pub matrix: Matrix3x4<f64>,
    pub image_width: f64,
    pub image_height: f64,
    pub camera_id: usize,
}

impl CameraProjection {
    pub fn validate(&self) -> Result<()> {
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "camera {}: non-positive image size {}x{}",
                self.camera_id, self.image_width, self.image_height
            )));
        }
        if self.matrix.rank(1e-12) != 3 {
            return Err(Error::InvalidArgument(format!(
                "camera {}: projection matrix rank < 3",
                self.camera_id
            )));
        }
        Ok(())
    }

    /// True when a projected pixel lies inside the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.image_width - 1.0 && v >= 0.0 && v <= self.image_height - 1.0
    }
}

/// Ten-dimensional 3D box: center, size, planar velocity and yaw as a
/// (sin, cos) pair, plus class label and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Center in the ego frame, meters.
    pub center: Vector3<f64>,
    /// (w, l, h), meters, strictly positive.
    pub size: Vector3<f64>,
    /// (vx, vy) in the ego frame, m/s.
    pub velocity: Vector2<f64>,
    pub yaw_sin: f64,
    pub yaw_cos: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(
        center: Vector3<f64>,
        size: Vector3<f64>,
        velocity: Vector2<f64>,
        yaw: f64,
        class_id: usize,
        score: f64,
    ) -> Self {
        Box3D {
            center,
            size,
            velocity,
            yaw_sin: yaw.sin(),
            yaw_cos: yaw.cos(),
            class_id,
            score,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw_sin.atan2(self.yaw_cos)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size.x > 0.0 && self.size.y > 0.0 && self.size.z > 0.0) {
            return Err(Error::DegenerateBox(format!(
                "non-positive size {:?}",
                self.size
            )));
        }
        let n = self.yaw_sin * self.yaw_sin + self.yaw_cos * self.yaw_cos;
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateBox(format!(
                "yaw pair ({}, {}) not unit norm",
                self.yaw_sin, self.yaw_cos
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::DegenerateBox(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    /// BEV footprint corners, counter-clockwise. `enlarge` scales w and l
    /// about the center, leaving h untouched.
    pub fn footprint(&self, enlarge: f64) -> [Vector2<f64>; 4] {
        let hw = 0.5 * self.size.x * enlarge;
        let hl = 0.5 * self.size.y * enlarge;
        let (s, c) = (self.yaw_sin, self.yaw_cos);
        // Box x axis (length direction) points along yaw.
        let fwd = Vector2::new(c, s);
        let left = Vector2::new(-s, c);
        let ctr = Vector2::new(self.center.x, self.center.y);
        [
            ctr + fwd * hl + left * hw,
            ctr - fwd * hl + left * hw,
            ctr - fwd * hl - left * hw,
            ctr + fwd * hl - left * hw,
        ]
    }

    fn z_interval(&self) -> (f64, f64) {
        (
            self.center.z - 0.5 * self.size.z,
            self.center.z + 0.5 * self.size.z,
        )
    }
}

/// Homogeneous pinhole projection with perspective division.
///
/// Returns `(u, v, depth)` in pixels/meters, or `None` when the point is on or
/// behind the camera plane (depth <= [`DEPTH_EPSILON`]). The returned pixel may
/// lie outside the image; visibility is the caller's decision.
pub fn project_point(
    proj: &CameraProjection,
    point: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let m = &proj.matrix;
    let h = m.fixed_view::<3, 3>(0, 0) * point + m.column(3);
    let depth = h.z;
    if depth <= DEPTH_EPSILON {
        return None;
    }
    Some((h.x / depth, h.y / depth, depth))
}

/// Moves a reference point one frame forward: apply the predicted planar
/// velocity for `dt` seconds in the ego frame of `pose_t`, then re-express the
/// result in the ego frame of `pose_t1`.
///
/// c' = R_{t+1}^T (R_t (c + v dt) + T_t - T_{t+1})
pub fn compensate_reference(
    point: &Vector3<f64>,
    velocity: &Vector2<f64>,
    dt: f64,
    pose_t: &Pose,
    pose_t1: &Pose,
) -> Vector3<f64> {
    let lifted = Vector3::new(velocity.x, velocity.y, 0.0);
    let world = pose_t.rotation * (point + lifted * dt) + pose_t.translation;
    pose_t1.rotation.transpose() * (world - pose_t1.translation)
}

/// Algebraic inverse of [`compensate_reference`]: recovers the frame-t point
/// from its frame-t+1 image.
pub fn compensate_reference_inv(
    point: &Vector3<f64>,
    velocity: &Vector2<f64>,
    dt: f64,
    pose_t: &Pose,
    pose_t1: &Pose,
) -> Vector3<f64> {
    let lifted = Vector3::new(velocity.x, velocity.y, 0.0);
    let world = pose_t1.rotation * point + pose_t1.translation;
    pose_t.rotation.transpose() * (world - pose_t.translation) - lifted * dt
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Euclidean distance between box centers in the BEV plane.
pub fn bev_center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    (dx * dx + dy * dy).sqrt()
}

/// 3D IoU as the product of BEV rotated-rectangle IoU and vertical-interval
/// IoU. `enlarge` scales the first argument's footprint only (prediction-side
/// enlargement); pass 1.0 for the symmetric measure.
pub fn iou_3d(a: &Box3D, b: &Box3D, enlarge: f64) -> Result<f64> {
    if enlarge < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "enlarge factor {enlarge} < 1"
        )));
    }
    a.validate()?;
    b.validate()?;
    let fa = a.footprint(enlarge);
    let fb = b.footprint(1.0);
    let area_a = a.size.x * a.size.y * enlarge * enlarge;
    let area_b = b.size.x * b.size.y;
    let inter = convex_clip_area(&fa, &fb);
    let bev = inter / (area_a + area_b - inter);

    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let inter_h = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let union_h = (ahi.max(bhi) - alo.min(blo)).max(inter_h);
    let vert = if union_h > 0.0 { inter_h / union_h } else { 0.0 };

    Ok((bev * vert).clamp(0.0, 1.0))
}

/// Volumetric generalized IoU: [`iou_3d`] (no enlargement) minus the convex
/// hull penalty (hull volume minus union volume over hull volume). Equals 1
/// for coincident boxes and goes negative for well-separated ones.
pub fn giou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let iou = iou_3d(a, b, 1.0)?;
    let fa = a.footprint(1.0);
    let fb = b.footprint(1.0);
    let inter_area = convex_clip_area(&fa, &fb);
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let inter_h = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let vol_a = a.size.x * a.size.y * a.size.z;
    let vol_b = b.size.x * b.size.y * b.size.z;
    let union_vol = vol_a + vol_b - inter_area * inter_h;

    let mut pts: Vec<Vector2<f64>> = Vec::with_capacity(8);
    pts.extend_from_slice(&fa);
    pts.extend_from_slice(&fb);
    let hull_area = polygon_area(&convex_hull(&mut pts));
    let hull_h = ahi.max(bhi) - alo.min(blo);
    let hull_vol = hull_area * hull_h;
    if hull_vol <= 0.0 {
        return Err(Error::DegenerateBox("zero-volume hull".into()));
    }
    Ok(iou - (hull_vol - union_vol).max(0.0) / hull_vol)
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc.abs()
}

/// Intersection area of two convex polygons via Sutherland-Hodgman clipping.
fn convex_clip_area(subject: &[Vector2<f64>; 4], clip: &[Vector2<f64>; 4]) -> f64 {
    let mut poly: Vec<Vector2<f64>> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        poly = clip_by_edge(&poly, a, b);
    }
    dedup_vertices(&mut poly);
    polygon_area(&poly)
}

/// Keeps the part of `poly` on the left of the directed edge a->b.
/// Assumes the clip polygon is counter-clockwise.
fn clip_by_edge(poly: &[Vector2<f64>], a: Vector2<f64>, b: Vector2<f64>) -> Vec<Vector2<f64>> {
    let side = |p: Vector2<f64>| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let sc = side(cur);
        let sn = side(next);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push(cur + (next - cur) * t);
        }
    }
    out
}

fn dedup_vertices(poly: &mut Vec<Vector2<f64>>) {
    poly.dedup_by(|p, q| (p.x - q.x).abs() <= VERTEX_EPS && (p.y - q.y).abs() <= VERTEX_EPS);
    if poly.len() > 1 {
        let first = poly[0];
        let last = *poly.last().unwrap();
        if (first.x - last.x).abs() <= VERTEX_EPS && (first.y - last.y).abs() <= VERTEX_EPS {
            poly.pop();
        }
    }
}

/// Andrew's monotone chain; returns hull vertices counter-clockwise.
fn convex_hull(points: &mut Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    points.sort_by(|p, q| (p.x, p.y).partial_cmp(&(q.x, q.y)).unwrap());
    points.dedup_by(|p, q| (p.x - q.x).abs() <= VERTEX_EPS && (p.y - q.y).abs() <= VERTEX_EPS);
    let n = points.len();
    if n < 3 {
        return points.clone();
    }
    let cross = |o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * n);
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn simple_box(x: f64, y: f64, w: f64, l: f64, h: f64, yaw: f64) -> Box3D {
        Box3D::new(
            Vector3::new(x, y, 1.0),
            Vector3::new(w, l, h),
            Vector2::zeros(),
            yaw,
            0,
            1.0,
        )
    }

    fn normalized_pinhole() -> CameraProjection {
        CameraProjection {
            matrix: Matrix3x4::new(
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ),
            image_width: 100.0,
            image_height: 100.0,
            camera_id: 0,
        }
    }

    #[test]
    fn project_optical_axis_hits_principal_point() {
        let p = normalized_pinhole();
        let (u, v, d) = project_point(&p, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((u, v, d), (0.0, 0.0, 5.0));
    }

    #[test]
    fn project_divides_homogeneous_coordinates() {
        let p = normalized_pinhole();
        let (u, v, d) = project_point(&p, &Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert_relative_eq!(u, 0.5);
        assert_relative_eq!(v, 1.0);
        assert_relative_eq!(d, 2.0);
    }

    #[test]
    fn project_rejects_behind_camera() {
        let p = normalized_pinhole();
        assert!(project_point(&p, &Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(project_point(&p, &Vector3::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        use std::f64::consts::PI;
        assert_relative_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(2.0 * PI + 0.25), 0.25, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-0.25), -0.25);
        for k in -8..=8 {
            let a = 0.6 + k as f64 * 2.0 * PI;
            assert_relative_eq!(wrap_angle(a), 0.6, epsilon = 1e-9);
        }
    }

    #[test]
    fn compensate_identity_poses_zero_velocity() {
        let id = Pose::identity();
        let p = Vector3::new(1.0, -2.0, 0.5);
        let out = compensate_reference(&p, &Vector2::zeros(), 0.7, &id, &id);
        assert_relative_eq!((out - p).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn compensate_pure_velocity() {
        let id = Pose::identity();
        let out = compensate_reference(
            &Vector3::new(2.0, 3.0, 0.0),
            &Vector2::new(1.0, 0.0),
            0.5,
            &id,
            &id,
        );
        assert_relative_eq!((out - Vector3::new(2.5, 3.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn compensate_pure_ego_translation() {
        let id = Pose::identity();
        let moved = Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        let p = Vector3::new(4.0, 1.0, 0.0);
        let out = compensate_reference(&p, &Vector2::zeros(), 0.5, &id, &moved);
        assert_relative_eq!((out - Vector3::new(3.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn iou_identical_boxes_is_one() {
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.5, 0.3);
        assert_relative_eq!(iou_3d(&a, &a, 1.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_disjoint_boxes_is_zero() {
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.5, 0.0);
        let b = simple_box(100.0, 0.0, 2.0, 2.0, 1.5, 0.0);
        assert_eq!(iou_3d(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn iou_offset_squares_matches_polygon_oracle() {
        // 2x2 footprints offset by (1, 0): intersection 2, union 6.
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = simple_box(1.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_relative_eq!(iou_3d(&a, &b, 1.0).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let mut bad = a.clone();
        bad.size.x = 0.0;
        assert!(iou_3d(&a, &bad, 1.0).is_err());
        assert!(iou_3d(&a, &a, 0.5).is_err());
    }

    #[test]
    fn enlargement_applies_to_first_argument_only() {
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = simple_box(1.5, 0.0, 2.0, 2.0, 1.0, 0.0);
        let plain = iou_3d(&a, &b, 1.0).unwrap();
        let grown = iou_3d(&a, &b, 1.2).unwrap();
        assert!(grown > plain);
        // Second argument is never enlarged: swapping changes the result.
        let swapped = iou_3d(&b, &a, 1.2).unwrap();
        assert_relative_eq!(grown, swapped, epsilon = 1e-12); // same pair, same sizes
    }

    #[test]
    fn giou_identical_is_one_and_offset_matches_hand_value() {
        let a = simple_box(0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_relative_eq!(giou_3d(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        // Hull of the two offset squares equals their union, so no penalty.
        let b = simple_box(1.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_relative_eq!(giou_3d(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_far_apart_is_negative() {
        let a = simple_box(0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = simple_box(10.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let g = giou_3d(&a, &b).unwrap();
        assert!(g < 0.0, "giou {g} should be negative");
        assert!(g > -1.0);
    }

    #[test]
    fn center_distance_three_four_five() {
        let a = simple_box(0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = simple_box(3.0, 4.0, 1.0, 1.0, 1.0, 0.0);
        assert_relative_eq!(bev_center_distance(&a, &b), 5.0);
        assert_eq!(bev_center_distance(&a, &a), 0.0);
    }

    proptest! {
        #[test]
        fn pose_round_trip(yaw in -3.14f64..3.14, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
            let p = Pose::from_yaw_translation(yaw, Vector3::new(tx, ty, 0.0));
            p.validate(1e-9).unwrap();
            let round = p.compose(&p.inverse());
            prop_assert!((round.rotation - Matrix3::identity()).norm() < 1e-9);
            prop_assert!(round.translation.norm() < 1e-9);
        }

        #[test]
        fn compensation_round_trip(
            yaw0 in -3.0f64..3.0, yaw1 in -3.0f64..3.0,
            tx in -20.0f64..20.0, ty in -20.0f64..20.0,
            px in -20.0f64..20.0, py in -20.0f64..20.0,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0,
            dt in 0.0f64..2.0,
        ) {
            let p0 = Pose::from_yaw_translation(yaw0, Vector3::new(tx, ty, 0.0));
            let p1 = Pose::from_yaw_translation(yaw1, Vector3::new(-ty, tx, 0.5));
            let point = Vector3::new(px, py, 0.8);
            let vel = Vector2::new(vx, vy);
            let fwd = compensate_reference(&point, &vel, dt, &p0, &p1);
            let back = compensate_reference_inv(&fwd, &vel, dt, &p0, &p1);
            prop_assert!((back - point).norm() < 1e-9);
        }

        #[test]
        fn depth_positive_when_present(px in -10.0f64..10.0, py in -10.0f64..10.0, pz in -10.0f64..10.0) {
            let cam = normalized_pinhole();
            if let Some((_, _, d)) = project_point(&cam, &Vector3::new(px, py, pz)) {
                prop_assert!(d > DEPTH_EPSILON);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(
            ax in -5.0f64..5.0, ay in -5.0f64..5.0, ayaw in -3.14f64..3.14,
            bx in -5.0f64..5.0, by in -5.0f64..5.0, byaw in -3.14f64..3.14,
            aw in 0.5f64..4.0, al in 0.5f64..4.0, ah in 0.5f64..3.0,
            bw in 0.5f64..4.0, bl in 0.5f64..4.0, bh in 0.5f64..3.0,
        ) {
            let a = simple_box(ax, ay, aw, al, ah, ayaw);
            let b = simple_box(bx, by, bw, bl, bh, byaw);
            let ab = iou_3d(&a, &b, 1.0).unwrap();
            let ba = iou_3d(&b, &a, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            let g = giou_3d(&a, &b).unwrap();
            prop_assert!(g <= ab + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn iou_rotation_invariant(
            ax in -4.0f64..4.0, ay in -4.0f64..4.0,
            bx in -4.0f64..4.0, by in -4.0f64..4.0,
            ayaw in -1.5f64..1.5, byaw in -1.5f64..1.5,
            rot in -3.14f64..3.14,
        ) {
            let a = simple_box(ax, ay, 2.0, 3.0, 1.0, ayaw);
            let b = simple_box(bx, by, 1.5, 2.0, 1.0, byaw);
            let base = iou_3d(&a, &b, 1.0).unwrap();
            let (s, c) = rot.sin_cos();
            let spin = |bx3: &Box3D, yaw: f64| {
                let ctr = Vector3::new(
                    c * bx3.center.x - s * bx3.center.y,
                    s * bx3.center.x + c * bx3.center.y,
                    bx3.center.z,
                );
                Box3D::new(ctr, bx3.size, bx3.velocity, yaw + rot, 0, 1.0)
            };
            let spun = iou_3d(&spin(&a, ayaw), &spin(&b, byaw), 1.0).unwrap();
            prop_assert!((base - spun).abs() < 1e-6);
        }
    }
}
