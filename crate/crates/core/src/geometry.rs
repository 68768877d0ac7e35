//! Core 3D types, similarity transforms, point-in-box tests and axis-aligned IoU.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack applied to box faces so that surface points stay inside after
/// floating-point rotation.
pub const BOX_FACE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance_sq(&self, other: &Point3) -> f64 {
        let d = *self - *other;
        d.x * d.x + d.y * d.y + d.z * d.z
    }

    /// Rotate about the z axis through the origin.
    pub fn rotate_z(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// An ordered set of points: a whole scene or a single object crop.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(Point3::is_finite)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Axis-aligned (min, max) corners, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }
}

impl From<Vec<Point3>> for PointCloud {
    fn from(points: Vec<Point3>) -> Self {
        Self::new(points)
    }
}

/// Oriented 3D box. `size` holds the full extents along the box-frame
/// x, y and z axes; `heading` rotates the box frame about world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub heading: f64,
    pub class_id: u32,
}

impl BoundingBox3D {
    pub fn new(center: Point3, size: [f64; 3], heading: f64, class_id: u32) -> Self {
        Self {
            center,
            size,
            heading,
            class_id,
        }
    }

    pub fn axis_aligned(center: Point3, size: [f64; 3], class_id: u32) -> Self {
        Self::new(center, size, 0.0, class_id)
    }

    pub fn is_valid(&self) -> bool {
        self.center.is_finite()
            && self.size.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.heading.is_finite()
            && self.heading > -PI
            && self.heading <= PI
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Corners of the heading-free hull.
    pub fn aabb(&self) -> (Point3, Point3) {
        let h = Point3::new(self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        (self.center - h, self.center + h)
    }

    /// Express a world point in the box's heading-aligned frame.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        (*p - self.center).rotate_z(-self.heading)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.to_local(p);
        let inside = |v: f64, extent: f64| v.abs() <= extent / 2.0 + BOX_FACE_EPS * extent.max(1.0);
        inside(l.x, self.size[0]) && inside(l.y, self.size[1]) && inside(l.z, self.size[2])
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Object-level similarity transform: scale and rotate about the box
/// center, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation_z: f64,
    pub translation: Point3,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation_z: 0.0,
        translation: Point3::ORIGIN,
    };

    pub fn new(scale: f64, rotation_z: f64, translation: Point3) -> Result<Self> {
        let t = Self {
            scale,
            rotation_z,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidTransform(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.rotation_z.is_finite() || !self.translation.is_finite() {
            return Err(Error::InvalidTransform("non-finite component".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation_z == 0.0 && self.translation == Point3::ORIGIN
    }

    /// Transform that undoes `self` for crops whose box was moved by it.
    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            rotation_z: -self.rotation_z,
            translation: -self.translation,
        }
    }
}

/// Apply `t` to an object crop and its box. Scaling and rotation act about
/// the box center; the center then moves by `t.translation`.
pub fn apply_transform(
    pc: &PointCloud,
    bbox: &BoundingBox3D,
    t: &SimilarityTransform,
) -> Result<(PointCloud, BoundingBox3D)> {
    t.validate()?;
    if t.is_identity() {
        return Ok((pc.clone(), *bbox));
    }
    let center = bbox.center;
    let new_center = center + t.translation;
    let points = pc
        .points
        .iter()
        .map(|p| new_center + ((*p - center) * t.scale).rotate_z(t.rotation_z))
        .collect();
    let out = BoundingBox3D {
        center: new_center,
        size: bbox.size.map(|s| s * t.scale),
        heading: wrap_angle(bbox.heading + t.rotation_z),
        class_id: bbox.class_id,
    };
    Ok((PointCloud::new(points), out))
}

/// Indices of points inside `bbox`, faces inclusive.
pub fn points_in_box(pc: &PointCloud, bbox: &BoundingBox3D) -> Vec<usize> {
    pc.points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// IoU of the heading-free hulls of two boxes.
pub fn box_iou(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(alo.x, ahi.x, blo.x, bhi.x)
        * overlap(alo.y, ahi.y, blo.y, bhi.y)
        * overlap(alo.z, ahi.z, blo.z, bhi.z);
    if inter <= 0.0 {
        return 0.0;
    }
    let vol = |lo: Point3, hi: Point3| (hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z);
    let union = vol(alo, ahi) + vol(blo, bhi) - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance_sq(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    a.center.distance_sq(&b.center)
}

/// Scene-level augmentation about the world origin: optional mirror over
/// the x axis (x -> -x), then rotation about z, then uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneTransform {
    pub flip_x: bool,
    pub rotation_z: f64,
    pub scale: f64,
}

impl SceneTransform {
    pub const IDENTITY: SceneTransform = SceneTransform {
        flip_x: false,
        rotation_z: 0.0,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        !self.flip_x && self.rotation_z == 0.0 && self.scale == 1.0
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let q = if self.flip_x {
            Point3::new(-p.x, p.y, p.z)
        } else {
            *p
        };
        q.rotate_z(self.rotation_z) * self.scale
    }

    pub fn apply_cloud(&self, pc: &PointCloud) -> PointCloud {
        if self.is_identity() {
            return pc.clone();
        }
        PointCloud::new(pc.points.iter().map(|p| self.apply_point(p)).collect())
    }

    pub fn apply_box(&self, b: &BoundingBox3D) -> BoundingBox3D {
        if self.is_identity() {
            return *b;
        }
        let heading = if self.flip_x { PI - b.heading } else { b.heading };
        BoundingBox3D {
            center: self.apply_point(&b.center),
            size: b.size.map(|s| s * self.scale),
            heading: wrap_angle(heading + self.rotation_z),
            class_id: b.class_id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box(c: Point3) -> BoundingBox3D {
        BoundingBox3D::axis_aligned(c, [1.0, 1.0, 1.0], 0)
    }

    #[test]
    fn identity_transform_is_bit_exact() {
        let pc = PointCloud::new(vec![Point3::new(0.1234, -0.3, 0.25), Point3::new(0.3, 0.1, -0.2)]);
        let b = BoundingBox3D::new(Point3::new(0.1, 0.2, 0.3), [1.0, 1.0, 1.0], 0.4, 2);
        let (p2, b2) = apply_transform(&pc, &b, &SimilarityTransform::IDENTITY).unwrap();
        assert_eq!(p2, pc);
        assert_eq!(b2, b);
    }

    #[test]
    fn pure_scaling_about_center() {
        let pc = PointCloud::new(vec![Point3::new(0.4, 0.0, 0.0)]);
        let t = SimilarityTransform::new(2.0, 0.0, Point3::ORIGIN).unwrap();
        let (p2, b2) = apply_transform(&pc, &unit_box(Point3::ORIGIN), &t).unwrap();
        assert_eq!(b2.size, [2.0, 2.0, 2.0]);
        assert_eq!(p2.points[0], Point3::new(0.8, 0.0, 0.0));
    }

    #[test]
    fn quarter_turn() {
        let pc = PointCloud::new(vec![Point3::new(0.3, 0.0, 0.0)]);
        let t = SimilarityTransform::new(1.0, PI / 2.0, Point3::ORIGIN).unwrap();
        let (p2, b2) = apply_transform(&pc, &unit_box(Point3::ORIGIN), &t).unwrap();
        assert_abs_diff_eq!(p2.points[0].x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p2.points[0].y, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(b2.heading, PI / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let t = SimilarityTransform {
            scale: 0.0,
            ..SimilarityTransform::IDENTITY
        };
        let err = apply_transform(&PointCloud::default(), &unit_box(Point3::ORIGIN), &t);
        assert!(matches!(err, Err(Error::InvalidTransform(_))));
        assert!(SimilarityTransform::new(-1.0, 0.0, Point3::ORIGIN).is_err());
    }

    #[test]
    fn points_in_box_cases() {
        let pc = PointCloud::new(vec![Point3::ORIGIN, Point3::new(2.0, 0.0, 0.0)]);
        assert_eq!(points_in_box(&pc, &unit_box(Point3::ORIGIN)), vec![0]);

        // Heading pi/2 swaps the footprint: local x runs along world y.
        let b = BoundingBox3D::new(Point3::ORIGIN, [2.0, 0.2, 1.0], PI / 2.0, 0);
        let p = PointCloud::new(vec![Point3::new(0.0, 0.9, 0.0), Point3::new(0.9, 0.0, 0.0)]);
        assert_eq!(points_in_box(&p, &b), vec![0]);

        assert!(points_in_box(&PointCloud::default(), &b).is_empty());
    }

    #[test]
    fn faces_are_inclusive() {
        let pc = PointCloud::new(vec![Point3::new(0.5, -0.5, 0.5)]);
        assert_eq!(points_in_box(&pc, &unit_box(Point3::ORIGIN)), vec![0]);
    }

    #[test]
    fn iou_cases() {
        let a = unit_box(Point3::ORIGIN);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &unit_box(Point3::new(2.0, 0.0, 0.0))), 0.0);
        assert_abs_diff_eq!(
            box_iou(&a, &unit_box(Point3::new(0.5, 0.0, 0.0))),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        // Touching faces share no volume.
        assert_eq!(box_iou(&a, &unit_box(Point3::new(1.0, 0.0, 0.0))), 0.0);
    }

    /// Monte-Carlo volume ratio over the joint bounding region.
    fn monte_carlo_iou(a: &BoundingBox3D, b: &BoundingBox3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let (alo, ahi) = a.aabb();
        let (blo, bhi) = b.aabb();
        let lo = Point3::new(alo.x.min(blo.x), alo.y.min(blo.y), alo.z.min(blo.z));
        let hi = Point3::new(ahi.x.max(bhi.x), ahi.y.max(bhi.y), ahi.z.max(bhi.z));
        let inside = |p: &Point3, l: &Point3, h: &Point3| {
            p.x >= l.x && p.x <= h.x && p.y >= l.y && p.y <= h.y && p.z >= l.z && p.z <= h.z
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..n {
            let p = Point3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            );
            let (ia, ib) = (inside(&p, &alo, &ahi), inside(&p, &blo, &bhi));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_matches_monte_carlo_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = unit_box(Point3::ORIGIN);
        let b = unit_box(Point3::new(0.5, 0.0, 0.0));
        let mc = monte_carlo_iou(&a, &b, 1_000_000, &mut rng);
        assert!((mc - 1.0 / 3.0).abs() < 0.01, "mc {mc}");
        for _ in 0..20 {
            let a = BoundingBox3D::axis_aligned(
                Point3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0),
                [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                0,
            );
            let b = BoundingBox3D::axis_aligned(
                Point3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.1),
                [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                0,
            );
            let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((mc - box_iou(&a, &b)).abs() < 0.02);
        }
    }

    #[test]
    fn center_distance_cases() {
        let a = unit_box(Point3::ORIGIN);
        assert_eq!(center_distance_sq(&a, &a), 0.0);
        assert_eq!(center_distance_sq(&a, &unit_box(Point3::new(1.0, 2.0, 2.0))), 9.0);
        assert_abs_diff_eq!(
            center_distance_sq(&a, &unit_box(Point3::new(0.3, 0.4, 0.0))),
            0.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn scene_flip_negates_x() {
        let t = SceneTransform {
            flip_x: true,
            rotation_z: 0.0,
            scale: 1.0,
        };
        let b = BoundingBox3D::axis_aligned(Point3::new(1.5, 0.2, 0.3), [1.0, 2.0, 0.5], 1);
        let fb = t.apply_box(&b);
        assert_eq!(fb.center, Point3::new(-1.5, 0.2, 0.3));
        assert_eq!(fb.size, b.size);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox3D> {
        (
            -2.0..2.0f64,
            -2.0..2.0f64,
            -2.0..2.0f64,
            0.1..2.0f64,
            0.1..2.0f64,
            0.1..2.0f64,
            -3.1..3.1f64,
        )
            .prop_map(|(x, y, z, w, l, h, hd)| {
                BoundingBox3D::new(Point3::new(x, y, z), [w, l, h], hd, 0)
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b);
            prop_assert_eq!(ab, box_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(box_iou(&a, &a), 1.0);
        }

        #[test]
        fn transform_preserves_membership_and_inverts(
            b in arb_box(),
            fracs in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64), 0..40),
            scale in 0.5..2.0f64,
            rot in -3.0..3.0f64,
            tx in -3.0..3.0f64,
            ty in -3.0..3.0f64,
        ) {
            let pts: Vec<Point3> = fracs
                .iter()
                .map(|(u, v, w)| {
                    b.center + Point3::new(u * b.size[0], v * b.size[1], w * b.size[2]).rotate_z(b.heading)
                })
                .collect();
            let pc = PointCloud::new(pts);
            let t = SimilarityTransform::new(scale, rot, Point3::new(tx, ty, 0.0)).unwrap();
            let (p2, b2) = apply_transform(&pc, &b, &t).unwrap();
            prop_assert_eq!(p2.len(), pc.len());
            prop_assert_eq!(points_in_box(&p2, &b2).len(), pc.len());
            let (p3, b3) = apply_transform(&p2, &b2, &t.inverse()).unwrap();
            for (p, q) in pc.points.iter().zip(&p3.points) {
                prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9 && (p.z - q.z).abs() < 1e-9);
            }
            prop_assert!((b3.center.x - b.center.x).abs() < 1e-9);
            for d in 0..3 {
                prop_assert!((b3.size[d] - b.size[d]).abs() < 1e-9);
            }
        }
    }
}
