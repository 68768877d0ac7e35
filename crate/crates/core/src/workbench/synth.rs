//! Synthetic indoor-like domains.
//!
//! A scene is a flat floor, a few clutter blobs and 2 to 5 objects. Objects
//! are point samples on the surface of a box shell or a cylinder (bottom
//! face left out, as on a real scan). A domain shift is a per-class size
//! multiplier plus a multiplier on the floor and clutter point counts.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{DomainTag, Scene};
use crate::error::{Error, Result};
use crate::eval::ClassPartition;
use crate::geometry::{box_iou, BoundingBox3D, Point3, PointCloud};
use crate::par::{self, Execution};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Cuboid,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    /// Mean (x, y, z) extent in metres.
    pub mean_size: [f64; 3],
    /// Each dimension is scaled by a factor uniform in `[1 - spread, 1 + spread]`.
    pub spread: f64,
    /// Surface points per square metre.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: Vec<ClassSpec>,
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
    /// Classes that objects are drawn from in this domain.
    pub present: Vec<u32>,
    /// Per-class size multiplier (the geometric domain shift).
    pub size_multiplier: Vec<f64>,
    /// Full floor extent along x and y, centred on the origin.
    pub floor_extent: [f64; 2],
    pub floor_points: usize,
    pub clutter_points: usize,
    pub clutter_blobs: usize,
    /// Multiplies floor and clutter point counts.
    pub context_density: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Minimum empty gap between object footprints.
    pub min_gap: f64,
    /// Standard deviation of per-point jitter.
    pub noise: f64,
    pub max_attempts: usize,
    pub tag: DomainTag,
    pub id_prefix: String,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let n = self.classes.len() as u32;
        for c in &self.classes {
            if !(c.mean_size.iter().all(|s| *s > 0.0 && s.is_finite()) && c.density > 0.0 && (0.0..1.0).contains(&c.spread)) {
                return bad(format!("class {} needs positive sizes and density, spread in [0, 1)", c.name));
            }
        }
        if self.size_multiplier.len() != self.classes.len() || self.size_multiplier.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("size_multiplier needs one positive entry per class".into());
        }
        if self.base.iter().any(|c| self.novel.contains(c)) {
            return bad("base and novel classes overlap".into());
        }
        if self.base.iter().chain(&self.novel).chain(&self.present).any(|&c| c >= n) {
            return bad("class id out of range".into());
        }
        if self.present.is_empty() {
            return bad("no object classes present".into());
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max".into());
        }
        if !(self.floor_extent.iter().all(|e| *e > 0.0) && self.context_density >= 0.0 && self.noise >= 0.0 && self.min_gap >= 0.0) {
            return bad("floor extent must be positive; density, noise and gap nonnegative".into());
        }
        Ok(())
    }

    pub fn partition(&self) -> ClassPartition {
        ClassPartition {
            names: self.classes.iter().map(|c| c.name.clone()).collect(),
            base: self.base.clone(),
            novel: self.novel.clone(),
        }
    }

    /// Three base classes (table, chair, cabinet) and two novel ones (bin,
    /// sofa). Source scenes hold base objects only; target scenes hold all
    /// five with 1.1x larger objects, 1.5x denser context and more clutter
    /// blobs.
    pub fn desk_pair() -> (DomainSpec, DomainSpec) {
        let class = |name: &str, shape, mean_size, density| ClassSpec {
            name: name.into(),
            shape,
            mean_size,
            spread: 0.1,
            density,
        };
        let classes = vec![
            class("table", Shape::Cuboid, [1.2, 0.8, 0.75], 45.0),
            class("chair", Shape::Cuboid, [0.5, 0.5, 0.9], 70.0),
            class("cabinet", Shape::Cuboid, [0.9, 0.45, 1.3], 45.0),
            class("bin", Shape::Cylinder, [0.45, 0.45, 0.6], 110.0),
            class("sofa", Shape::Cuboid, [1.8, 0.9, 0.8], 35.0),
        ];
        let source = DomainSpec {
            classes,
            base: vec![0, 1, 2],
            novel: vec![3, 4],
            present: vec![0, 1, 2],
            size_multiplier: vec![1.0; 5],
            floor_extent: [6.0, 6.0],
            floor_points: 300,
            clutter_points: 80,
            clutter_blobs: 3,
            context_density: 1.0,
            objects_min: 2,
            objects_max: 5,
            min_gap: 0.2,
            noise: 0.005,
            max_attempts: 200,
            tag: DomainTag::Source,
            id_prefix: "source".into(),
        };
        let target = DomainSpec {
            present: vec![0, 1, 2, 3, 4],
            size_multiplier: vec![1.1; 5],
            context_density: 1.5,
            clutter_points: 200,
            clutter_blobs: 6,
            tag: DomainTag::Target,
            id_prefix: "target".into(),
            ..source.clone()
        };
        (source, target)
    }
}

fn sample_size<R: Rng + ?Sized>(c: &ClassSpec, mult: f64, rng: &mut R) -> [f64; 3] {
    c.mean_size.map(|m| {
        let f = if c.spread > 0.0 { rng.gen_range(1.0 - c.spread..=1.0 + c.spread) } else { 1.0 };
        m * mult * f
    })
}

/// Surface points of a primitive filling `size`, resting on z = 0 and
/// centred at the origin in xy.
fn surface_points<R: Rng + ?Sized>(shape: Shape, size: [f64; 3], density: f64, noise: &Normal<f64>, rng: &mut R) -> Vec<Point3> {
    let [sx, sy, sz] = size;
    let (hx, hy) = (sx / 2.0, sy / 2.0);
    let mut pts = Vec::new();
    match shape {
        Shape::Cuboid => {
            // top, then the four sides
            let faces = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
            let total: f64 = faces.iter().sum();
            let n = (total * density).round().max(8.0) as usize;
            for _ in 0..n {
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 0;
                while face < 4 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                let p = match face {
                    0 => Point3::new((u - 0.5) * sx, (v - 0.5) * sy, sz),
                    1 => Point3::new((u - 0.5) * sx, -hy, v * sz),
                    2 => Point3::new((u - 0.5) * sx, hy, v * sz),
                    3 => Point3::new(-hx, (u - 0.5) * sy, v * sz),
                    _ => Point3::new(hx, (u - 0.5) * sy, v * sz),
                };
                pts.push(p);
            }
        }
        Shape::Cylinder => {
            let top = PI * hx * hy;
            let side = PI * (hx + hy) * sz;
            let n = ((top + side) * density).round().max(8.0) as usize;
            for _ in 0..n {
                let t = rng.gen_range(0.0..2.0 * PI);
                if rng.gen::<f64>() * (top + side) < top {
                    let r = rng.gen::<f64>().sqrt();
                    pts.push(Point3::new(r * hx * t.cos(), r * hy * t.sin(), sz));
                } else {
                    pts.push(Point3::new(hx * t.cos(), hy * t.sin(), rng.gen::<f64>() * sz));
                }
            }
        }
    }
    pts.into_iter()
        .map(|p| {
            let q = Point3::new(p.x + noise.sample(rng), p.y + noise.sample(rng), p.z + noise.sample(rng));
            // keep jittered points inside the box
            Point3::new(q.x.clamp(-hx, hx), q.y.clamp(-hy, hy), q.z.clamp(0.0, sz))
        })
        .collect()
}

/// Generate scene `index` of a domain.
pub fn synth_scene(spec: &DomainSpec, seed: u64, index: usize) -> Result<Scene> {
    let mut r = rng::stream(seed, &format!("synth/{}", spec.id_prefix), index as u64);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let [ex, ey] = spec.floor_extent;
    let n_objects = r.gen_range(spec.objects_min..=spec.objects_max);

    let mut boxes: Vec<BoundingBox3D> = Vec::with_capacity(n_objects);
    let mut points: Vec<Point3> = Vec::new();
    for _ in 0..n_objects {
        let class_id = spec.present[r.gen_range(0..spec.present.len())];
        let c = &spec.classes[class_id as usize];
        let size = sample_size(c, spec.size_multiplier[class_id as usize], &mut r);
        let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
        if 2.0 * hx >= ex || 2.0 * hy >= ey {
            return Err(Error::Generation(format!("{} does not fit on the floor", c.name)));
        }
        let mut placed = None;
        for _ in 0..spec.max_attempts.max(1) {
            let x = r.gen_range(-ex / 2.0 + hx..ex / 2.0 - hx);
            let y = r.gen_range(-ey / 2.0 + hy..ey / 2.0 - hy);
            let padded = BoundingBox3D::axis_aligned(
                Point3::new(x, y, size[2] / 2.0),
                [size[0] + spec.min_gap, size[1] + spec.min_gap, size[2]],
                class_id,
            );
            if boxes.iter().all(|b| box_iou(b, &padded) == 0.0) {
                placed = Some(BoundingBox3D::axis_aligned(padded.center, size, class_id));
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {} of scene {} after {} attempts",
                boxes.len(),
                index,
                spec.max_attempts
            ))
        })?;
        let offset = Point3::new(bbox.center.x, bbox.center.y, 0.0);
        points.extend(surface_points(c.shape, size, c.density, &noise, &mut r).into_iter().map(|p| p + offset));
        boxes.push(bbox);
    }

    let inside_any = |p: &Point3| boxes.iter().any(|b| b.contains(p));
    let n_floor = (spec.floor_points as f64 * spec.context_density).round() as usize;
    for _ in 0..n_floor {
        let p = Point3::new(r.gen_range(-ex / 2.0..ex / 2.0), r.gen_range(-ey / 2.0..ey / 2.0), noise.sample(&mut r).abs());
        if !inside_any(&p) {
            points.push(p);
        }
    }
    let n_clutter = (spec.clutter_points as f64 * spec.context_density).round() as usize;
    if spec.clutter_blobs > 0 {
        let blob = Normal::new(0.0, 0.12).unwrap();
        let centers: Vec<Point3> = (0..spec.clutter_blobs)
            .map(|_| Point3::new(r.gen_range(-ex / 2.0..ex / 2.0), r.gen_range(-ey / 2.0..ey / 2.0), 0.0))
            .collect();
        for i in 0..n_clutter {
            let c = centers[i % centers.len()];
            let p = Point3::new(c.x + blob.sample(&mut r), c.y + blob.sample(&mut r), blob.sample(&mut r).abs());
            if !inside_any(&p) {
                points.push(p);
            }
        }
    }
    Ok(Scene {
        cloud: PointCloud::new(points),
        boxes,
        domain_tag: spec.tag,
        scene_id: format!("{}-{index:04}", spec.id_prefix),
    })
}

/// Generate scenes `first..first + n` of a domain.
pub fn synth_domain(spec: &DomainSpec, seed: u64, first: usize, n: usize, exec: Execution) -> Result<Vec<Scene>> {
    spec.validate()?;
    par::map_range(exec, n, |i| synth_scene(spec, seed, first + i)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_class_spec() -> DomainSpec {
        let (mut s, _) = DomainSpec::desk_pair();
        s.classes.truncate(1);
        s.classes[0].spread = 0.0;
        s.base = vec![0];
        s.novel = vec![];
        s.present = vec![0];
        s.size_multiplier = vec![1.0];
        s
    }

    #[test]
    fn fixed_sizes_are_exact() {
        let scenes = synth_domain(&one_class_spec(), 1, 0, 1, Execution::Sequential).unwrap();
        assert_eq!(scenes.len(), 1);
        assert!(!scenes[0].boxes.is_empty());
        for b in &scenes[0].boxes {
            assert_eq!(b.size, [1.2, 0.8, 0.75]);
        }
    }

    #[test]
    fn boxes_disjoint_and_contain_their_points() {
        let (src, tgt) = DomainSpec::desk_pair();
        for spec in [src, tgt] {
            for s in synth_domain(&spec, 3, 0, 30, Execution::Parallel).unwrap() {
                assert!((2..=5).contains(&s.boxes.len()));
                for (i, a) in s.boxes.iter().enumerate() {
                    for b in &s.boxes[i + 1..] {
                        assert_eq!(box_iou(a, b), 0.0);
                    }
                    let inside = crate::geometry::points_in_box(&s.cloud, a).len();
                    assert!(inside >= 20, "{} points in {:?}", inside, a);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let (src, _) = DomainSpec::desk_pair();
        let a = synth_domain(&src, 9, 0, 6, Execution::Parallel).unwrap();
        let b = synth_domain(&src, 9, 0, 6, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let c = synth_domain(&src, 10, 0, 6, Execution::Parallel).unwrap();
        assert_ne!(a, c);
    }

    fn mean_volume(spec: &DomainSpec, n: usize) -> f64 {
        let scenes = synth_domain(spec, 5, 0, n, Execution::Parallel).unwrap();
        let vols: Vec<f64> = scenes.iter().flat_map(|s| s.boxes.iter().map(|b| b.volume())).collect();
        vols.iter().sum::<f64>() / vols.len() as f64
    }

    #[test]
    fn size_multiplier_scales_volume() {
        let (src, _) = DomainSpec::desk_pair();
        let big = DomainSpec {
            size_multiplier: vec![1.3; 5],
            ..src.clone()
        };
        let ratio = mean_volume(&big, 200) / mean_volume(&src, 200);
        assert_abs_diff_eq!(ratio, 1.3f64.powi(3), epsilon = 0.1 * 1.3f64.powi(3));
        let mid = DomainSpec {
            size_multiplier: vec![1.15; 5],
            ..src.clone()
        };
        assert!(mean_volume(&src, 100) < mean_volume(&mid, 100));
        assert!(mean_volume(&mid, 100) < mean_volume(&big, 100));
    }

    #[test]
    fn infeasible_placement_is_a_generation_error() {
        let mut s = one_class_spec();
        s.objects_min = 40;
        s.objects_max = 40;
        s.max_attempts = 5;
        assert!(matches!(synth_scene(&s, 0, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = one_class_spec();
        s.size_multiplier = vec![];
        assert!(s.validate().is_err());
        let (mut s, _) = DomainSpec::desk_pair();
        s.novel = vec![0];
        assert!(s.validate().is_err());
    }
}
