//! Dual-domain copy-paste.
//!
//! Cross-domain paste puts source objects into target scenes; in-domain
//! paste puts a domain's own objects back into its scenes. Every paste is
//! described by a [`TransformRecord`] that replays to the identical scene.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, box_iou, BoundingBox3D, Point3, PointCloud, SimilarityTransform};
use crate::gtdb::{sample_objects, GtDatabase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DomainTag {
    Source = 0,
    Target = 1,
    Cross = 2,
    InSource = 3,
    InTarget = 4,
}

impl DomainTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Source,
            1 => Self::Target,
            2 => Self::Cross,
            3 => Self::InSource,
            4 => Self::InTarget,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<BoundingBox3D>,
    pub domain_tag: DomainTag,
    pub scene_id: String,
}

impl Scene {
    /// Copy of the scene keeping only boxes whose class passes `keep`.
    pub fn with_labels(&self, keep: impl Fn(u32) -> bool) -> Scene {
        Scene {
            boxes: self.boxes.iter().copied().filter(|b| keep(b.class_id)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub scale_range: (f64, f64),
    /// Maximum absolute rotation, radians.
    pub rot_range: f64,
    pub max_rejections: usize,
    pub remove_occluded: bool,
}

impl Default for PasteConfig {
    fn default() -> Self {
        Self {
            n_objects_min: 1,
            n_objects_max: 2,
            scale_range: (0.9, 1.1),
            rot_range: 10.0 * PI / 180.0,
            max_rejections: 20,
            remove_occluded: true,
        }
    }
}

impl PasteConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.n_objects_min > self.n_objects_max {
            return Err(Error::InvalidConfig("n_objects_min > n_objects_max".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("bad scale range ({lo}, {hi})")));
        }
        if !(self.rot_range >= 0.0 && self.rot_range.is_finite()) {
            return Err(Error::InvalidConfig("rot_range must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which side of the x = 0 plane a pasted object goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HalfSpace {
    Left,
    Right,
}

impl HalfSpace {
    /// Alternate halves: even slots left, odd slots right.
    pub fn for_slot(slot: usize) -> Self {
        if slot % 2 == 0 {
            HalfSpace::Left
        } else {
            HalfSpace::Right
        }
    }

    pub fn contains_x(self, x: f64) -> bool {
        match self {
            HalfSpace::Left => x < 0.0,
            HalfSpace::Right => x > 0.0,
        }
    }
}

/// One accepted paste.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteEntry {
    /// Index into the database's object list.
    pub object_index: usize,
    pub class_id: u32,
    pub half: HalfSpace,
    /// Applied about the object's (origin) box center; the translation is
    /// the placement position.
    pub transform: SimilarityTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scene_id: String,
    pub output_tag: DomainTag,
    pub requested: usize,
    pub entries: Vec<PasteEntry>,
    pub remove_occluded: bool,
    pub removed_points: usize,
}

/// Try to find a collision-free position for `bbox` (center at origin,
/// already scaled and rotated) in the given half of the scene.
///
/// Candidate centers are uniform over the half of the scene's xy extent that
/// keeps the box inside it; the box bottom rests on the lowest scene point.
/// A candidate is accepted when its IoU with every existing box is exactly 0.
pub fn place_object<R: Rng + ?Sized>(
    scene_boxes: &[BoundingBox3D],
    scene_cloud: &PointCloud,
    bbox: &BoundingBox3D,
    half: HalfSpace,
    rng: &mut R,
    cfg: &PasteConfig,
) -> Option<Point3> {
    let (lo, hi) = scene_extent(scene_boxes, scene_cloud)?;
    let (hw, hl) = (bbox.size[0] / 2.0, bbox.size[1] / 2.0);
    let (x_lo, x_hi) = match half {
        HalfSpace::Left => (lo.x + hw, (hi.x - hw).min(0.0)),
        HalfSpace::Right => ((lo.x + hw).max(0.0), hi.x - hw),
    };
    let (y_lo, y_hi) = (lo.y + hl, hi.y - hl);
    if x_lo >= x_hi || y_lo > y_hi {
        return None;
    }
    let z = lo.z + bbox.size[2] / 2.0;
    for _ in 0..cfg.max_rejections.max(1) {
        let u: f64 = rng.gen();
        let x = match half {
            HalfSpace::Left => x_lo + u * (x_hi - x_lo),
            HalfSpace::Right => x_hi - u * (x_hi - x_lo),
        };
        let y = y_lo + rng.gen::<f64>() * (y_hi - y_lo);
        let candidate = BoundingBox3D {
            center: Point3::new(x, y, z),
            ..*bbox
        };
        if half.contains_x(x) && scene_boxes.iter().all(|b| box_iou(b, &candidate) == 0.0) {
            return Some(candidate.center);
        }
    }
    None
}

fn scene_extent(boxes: &[BoundingBox3D], cloud: &PointCloud) -> Option<(Point3, Point3)> {
    cloud.bounds().or_else(|| {
        let first = boxes.first()?.aabb();
        Some(boxes.iter().skip(1).fold(first, |(lo, hi), b| {
            let (l, h) = b.aabb();
            (
                Point3::new(lo.x.min(l.x), lo.y.min(l.y), lo.z.min(l.z)),
                Point3::new(hi.x.max(h.x), hi.y.max(h.y), hi.z.max(h.z)),
            )
        }))
    })
}

fn copy_paste<R: Rng + ?Sized>(
    scene: &Scene,
    db: &GtDatabase,
    cfg: &PasteConfig,
    rng: &mut R,
    output_tag: DomainTag,
) -> Result<(Scene, TransformRecord)> {
    cfg.validate()?;
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let k = rng.gen_range(cfg.n_objects_min..=cfg.n_objects_max);
    let picks = if k == 0 { Vec::new() } else { sample_objects(db, k, rng)? };
    let mut boxes = scene.boxes.clone();
    let mut entries = Vec::with_capacity(k);
    for (slot, (object_index, obj)) in picks.into_iter().enumerate() {
        let half = HalfSpace::for_slot(slot);
        let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        let rotation = if cfg.rot_range > 0.0 {
            rng.gen_range(-cfg.rot_range..=cfg.rot_range)
        } else {
            0.0
        };
        let shaped = SimilarityTransform::new(scale, rotation, Point3::ORIGIN)?;
        let (_, shaped_box) = apply_transform(&PointCloud::default(), &obj.bbox, &shaped)?;
        if let Some(center) = place_object(&boxes, &scene.cloud, &shaped_box, half, rng, cfg) {
            let transform = SimilarityTransform {
                translation: center,
                ..shaped
            };
            boxes.push(BoundingBox3D { center, ..shaped_box });
            entries.push(PasteEntry {
                object_index,
                class_id: obj.class_id(),
                half,
                transform,
            });
        }
    }
    let record = TransformRecord {
        scene_id: scene.scene_id.clone(),
        output_tag,
        requested: k,
        entries,
        remove_occluded: cfg.remove_occluded,
        removed_points: 0,
    };
    replay(scene, db, record)
}

/// Rebuild an augmented scene from its record.
///
/// Original scene points inside any pasted box are dropped first when the
/// record asks for occlusion removal; pasted points and boxes are appended
/// in record order.
pub fn replay(scene: &Scene, db: &GtDatabase, mut record: TransformRecord) -> Result<(Scene, TransformRecord)> {
    let mut pasted = Vec::with_capacity(record.entries.len());
    for e in &record.entries {
        let obj = db
            .get(e.object_index)
            .ok_or_else(|| Error::InvalidConfig(format!("record references missing object {}", e.object_index)))?;
        pasted.push(apply_transform(&obj.points, &obj.bbox, &e.transform)?);
    }
    let kept: Vec<Point3> = if record.remove_occluded {
        scene
            .cloud
            .points
            .iter()
            .filter(|p| !pasted.iter().any(|(_, b)| b.contains(p)))
            .copied()
            .collect()
    } else {
        scene.cloud.points.clone()
    };
    record.removed_points = scene.cloud.len() - kept.len();
    let mut points = kept;
    let mut boxes = scene.boxes.clone();
    for (pc, b) in pasted {
        points.extend_from_slice(&pc.points);
        boxes.push(b);
    }
    let out = Scene {
        cloud: PointCloud::new(points),
        boxes,
        domain_tag: record.output_tag,
        scene_id: scene.scene_id.clone(),
    };
    Ok((out, record))
}

/// Paste source-domain objects into a target scene.
pub fn cross_domain_cp<R: Rng + ?Sized>(
    target_scene: &Scene,
    source_db: &GtDatabase,
    cfg: &PasteConfig,
    rng: &mut R,
) -> Result<(Scene, TransformRecord)> {
    copy_paste(target_scene, source_db, cfg, rng, DomainTag::Cross)
}

/// Paste a domain's own objects back into one of its scenes.
pub fn in_domain_cp<R: Rng + ?Sized>(
    scene: &Scene,
    db: &GtDatabase,
    cfg: &PasteConfig,
    rng: &mut R,
) -> Result<(Scene, TransformRecord)> {
    let tag = match scene.domain_tag {
        DomainTag::Source | DomainTag::InSource => DomainTag::InSource,
        _ => DomainTag::InTarget,
    };
    copy_paste(scene, db, cfg, rng, tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtdb::build_database;
    use crate::rng;
    use std::collections::BTreeSet;

    fn floor(n: usize, half: f64) -> Vec<Point3> {
        let side = (n as f64).sqrt().ceil() as usize;
        (0..n)
            .map(|i| {
                let (a, b) = ((i % side) as f64, (i / side) as f64);
                Point3::new(-half + 2.0 * half * a / (side - 1) as f64, -half + 2.0 * half * b / (side - 1) as f64, 0.0)
            })
            .collect()
    }

    fn cube_points(c: Point3, s: f64, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                c + Point3::new(s * (t - 0.5) * 0.9, s * ((t * 7.0).fract() - 0.5) * 0.9, s * ((t * 13.0).fract() - 0.5) * 0.9)
            })
            .collect()
    }

    fn scene_with_boxes(tag: DomainTag, classes: &[u32]) -> Scene {
        let mut points = floor(400, 2.5);
        let mut boxes = Vec::new();
        for (i, &c) in classes.iter().enumerate() {
            let center = Point3::new(-1.5 + 1.5 * i as f64, 1.5 - i as f64, 0.3);
            points.extend(cube_points(center, 0.6, 40));
            boxes.push(BoundingBox3D::axis_aligned(center, [0.6, 0.6, 0.6], c));
        }
        Scene {
            cloud: PointCloud::new(points),
            boxes,
            domain_tag: tag,
            scene_id: "s".into(),
        }
    }

    fn db_of(classes: &[u32]) -> GtDatabase {
        let s = scene_with_boxes(DomainTag::Source, classes);
        build_database(&[s], &classes.iter().copied().collect::<BTreeSet<_>>(), 5).unwrap()
    }

    #[test]
    fn empty_scene_accepts_first_candidate() {
        let cloud = PointCloud::new(floor(100, 2.0));
        let b = BoundingBox3D::axis_aligned(Point3::ORIGIN, [0.5, 0.5, 0.5], 0);
        let mut r = rng::stream(1, "t", 0);
        let cfg = PasteConfig {
            max_rejections: 1,
            ..Default::default()
        };
        let c = place_object(&[], &cloud, &b, HalfSpace::Left, &mut r, &cfg).unwrap();
        assert!(c.x < 0.0);
        assert_eq!(c.z, 0.25);
    }

    #[test]
    fn fully_covered_scene_rejects() {
        let cloud = PointCloud::new(floor(100, 2.0));
        let giant = BoundingBox3D::axis_aligned(Point3::ORIGIN, [10.0, 10.0, 10.0], 0);
        let b = BoundingBox3D::axis_aligned(Point3::ORIGIN, [0.5, 0.5, 0.5], 0);
        let mut r = rng::stream(1, "t", 0);
        assert!(place_object(&[giant], &cloud, &b, HalfSpace::Right, &mut r, &PasteConfig::default()).is_none());
    }

    #[test]
    fn seeded_placements_are_collision_free() {
        let scene = scene_with_boxes(DomainTag::Target, &[0, 1, 2]);
        let b = BoundingBox3D::axis_aligned(Point3::ORIGIN, [0.5, 0.4, 0.6], 0);
        let mut accepted = 0;
        for i in 0..100 {
            let mut r = rng::stream(3, "place", i);
            let half = HalfSpace::for_slot(i as usize);
            if let Some(c) = place_object(&scene.boxes, &scene.cloud, &b, half, &mut r, &PasteConfig::default()) {
                accepted += 1;
                let placed = BoundingBox3D { center: c, ..b };
                assert!(half.contains_x(c.x));
                for existing in &scene.boxes {
                    assert_eq!(box_iou(existing, &placed), 0.0);
                }
            }
        }
        assert!(accepted > 50);
    }

    #[test]
    fn bookkeeping_identity_without_occlusion() {
        let target = scene_with_boxes(DomainTag::Target, &[3]);
        let db = db_of(&[0]);
        let cfg = PasteConfig {
            n_objects_min: 1,
            n_objects_max: 1,
            remove_occluded: false,
            ..Default::default()
        };
        let mut r = rng::stream(5, "cp", 0);
        let (out, rec) = cross_domain_cp(&target, &db, &cfg, &mut r).unwrap();
        assert_eq!(out.domain_tag, DomainTag::Cross);
        assert_eq!(rec.entries.len(), 1);
        assert_eq!(out.cloud.len(), target.cloud.len() + db.objects()[0].points.len());
        assert_eq!(out.boxes.len(), target.boxes.len() + 1);
    }

    #[test]
    fn pasted_objects_are_contained_and_replayable() {
        let target = scene_with_boxes(DomainTag::Target, &[3]);
        let db = db_of(&[0, 1, 2]);
        for i in 0..20 {
            let mut r = rng::stream(9, "cp", i);
            let (out, rec) = cross_domain_cp(&target, &db, &PasteConfig::default(), &mut r).unwrap();
            let pasted_points: usize = rec.entries.iter().map(|e| db.objects()[e.object_index].points.len()).sum();
            assert_eq!(out.cloud.len(), target.cloud.len() - rec.removed_points + pasted_points);
            let mut offset = target.cloud.len() - rec.removed_points;
            for (e, b) in rec.entries.iter().zip(&out.boxes[target.boxes.len()..]) {
                assert!([0, 1, 2].contains(&b.class_id));
                let n = db.objects()[e.object_index].points.len();
                for p in &out.cloud.points[offset..offset + n] {
                    assert!(b.contains(p));
                }
                offset += n;
            }
            let (again, _) = replay(&target, &db, rec.clone()).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn in_domain_tags_follow_scene_domain() {
        let src = scene_with_boxes(DomainTag::Source, &[0]);
        let tgt = scene_with_boxes(DomainTag::Target, &[3]);
        let base_db = db_of(&[0, 1]);
        let novel_db = db_of(&[3, 4]);
        let mut r = rng::stream(2, "in", 0);
        let (a, ra) = in_domain_cp(&src, &base_db, &PasteConfig::default(), &mut r).unwrap();
        assert_eq!(a.domain_tag, DomainTag::InSource);
        assert!(ra.entries.iter().all(|e| e.class_id <= 1));
        let (b, rb) = in_domain_cp(&tgt, &novel_db, &PasteConfig::default(), &mut r).unwrap();
        assert_eq!(b.domain_tag, DomainTag::InTarget);
        assert!(rb.entries.iter().all(|e| e.class_id >= 3));
    }

    #[test]
    fn empty_database_is_an_error() {
        let tgt = scene_with_boxes(DomainTag::Target, &[3]);
        let mut r = rng::stream(2, "in", 0);
        assert!(matches!(
            cross_domain_cp(&tgt, &GtDatabase::default(), &PasteConfig::default(), &mut r),
            Err(Error::EmptyDatabase)
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PasteConfig {
            n_objects_min: 3,
            n_objects_max: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PasteConfig {
            scale_range: (0.0, 1.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
