//! Ground-truth object database: object crops harvested from labeled scenes
//! and sampled back out for copy-paste.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::augment::{DomainTag, Scene};
use crate::error::{Error, Result};
use crate::geometry::{points_in_box, BoundingBox3D, Point3, PointCloud};
use crate::workbench::io::{load_scene, save_scene};

pub const DEFAULT_MIN_POINTS: usize = 5;
pub const INDEX_FILE: &str = "index.txt";

/// One object crop. Points are translated so the box center is the origin;
/// the box keeps its size, heading and class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub points: PointCloud,
    pub bbox: BoundingBox3D,
    pub source_scene_id: String,
}

impl GtObject {
    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }

    fn to_scene(&self) -> Scene {
        Scene {
            cloud: self.points.clone(),
            boxes: vec![self.bbox],
            domain_tag: DomainTag::Source,
            scene_id: self.source_scene_id.clone(),
        }
    }
}

/// Immutable after construction; objects keep scene-then-box insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    objects: Vec<GtObject>,
    by_class: BTreeMap<u32, Vec<usize>>,
    classes: BTreeSet<u32>,
    min_points: usize,
}

impl GtDatabase {
    fn from_objects(objects: Vec<GtObject>, classes: BTreeSet<u32>, min_points: usize) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, o) in objects.iter().enumerate() {
            by_class.entry(o.class_id()).or_default().push(i);
        }
        Self {
            objects,
            by_class,
            classes,
            min_points,
        }
    }

    pub fn objects(&self) -> &[GtObject] {
        &self.objects
    }

    pub fn get(&self, index: usize) -> Option<&GtObject> {
        self.objects.get(index)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn classes(&self) -> &BTreeSet<u32> {
        &self.classes
    }

    pub fn min_points(&self) -> usize {
        self.min_points
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        self.by_class.iter().map(|(c, v)| (*c, v.len())).collect()
    }

    pub fn indices_of_class(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    /// Write one scene file per object plus an index of `class_id path` lines.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        index.push_str(&format!(
            "# classes={} min_points={}\n",
            join_ids(&self.classes),
            self.min_points
        ));
        for (i, obj) in self.objects.iter().enumerate() {
            let name = format!("object_{i:05}.dcs");
            save_scene(&dir.join(&name), &obj.to_scene())?;
            index.push_str(&format!("{} {}\n", obj.class_id(), name));
        }
        let path = dir.join(INDEX_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(index.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut classes = BTreeSet::new();
        let mut min_points = DEFAULT_MIN_POINTS;
        let mut objects = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("classes", v)) => classes = parse_ids(v).map_err(|r| Error::corrupt(&path, r))?,
                        Some(("min_points", v)) => {
                            min_points = v.parse().map_err(|_| Error::corrupt(&path, "bad min_points"))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (cls, file) = line
                .split_once(' ')
                .ok_or_else(|| Error::corrupt(&path, format!("bad index line `{line}`")))?;
            let cls: u32 = cls
                .parse()
                .map_err(|_| Error::corrupt(&path, format!("bad class id `{cls}`")))?;
            let scene = load_scene(&dir.join(file.trim()))?;
            let bbox = *scene
                .boxes
                .first()
                .ok_or_else(|| Error::corrupt(dir.join(file), "object file without box"))?;
            if bbox.class_id != cls {
                return Err(Error::corrupt(&path, format!("class mismatch for {file}")));
            }
            objects.push(GtObject {
                points: scene.cloud,
                bbox,
                source_scene_id: scene.scene_id,
            });
        }
        if classes.is_empty() {
            classes = objects.iter().map(GtObject::class_id).collect();
        }
        Ok(Self::from_objects(objects, classes, min_points))
    }
}

fn join_ids(ids: &BTreeSet<u32>) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_ids(s: &str) -> std::result::Result<BTreeSet<u32>, String> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad class id `{t}`")))
        .collect()
}

/// Harvest every box of a listed class with at least `min_points` points.
pub fn build_database(scenes: &[Scene], classes: &BTreeSet<u32>, min_points: usize) -> Result<GtDatabase> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("class set is empty".into()));
    }
    let mut objects = Vec::new();
    for scene in scenes {
        for b in &scene.boxes {
            if !classes.contains(&b.class_id) {
                continue;
            }
            let idx = points_in_box(&scene.cloud, b);
            if idx.len() < min_points {
                continue;
            }
            let points = idx.iter().map(|&i| scene.cloud.points[i] - b.center).collect();
            objects.push(GtObject {
                points: PointCloud::new(points),
                bbox: BoundingBox3D {
                    center: Point3::ORIGIN,
                    ..*b
                },
                source_scene_id: scene.scene_id.clone(),
            });
        }
    }
    Ok(GtDatabase::from_objects(objects, classes.clone(), min_points))
}

/// Draw `n` objects uniformly; distinct objects while `n` does not exceed
/// the database size, with replacement beyond that.
pub fn sample_objects<'a, R: Rng + ?Sized>(db: &'a GtDatabase, n: usize, rng: &mut R) -> Result<Vec<(usize, &'a GtObject)>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let total = db.len();
    let picks: Vec<usize> = if n <= total {
        index::sample(rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..total)).collect()
    };
    Ok(picks.into_iter().map(|i| (i, &db.objects[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scene_with(id: &str, objects: &[(u32, usize, Point3)]) -> Scene {
        let mut points = Vec::new();
        let mut boxes = Vec::new();
        for (cls, n, c) in objects {
            for i in 0..*n {
                let f = i as f64 / (*n as f64);
                points.push(*c + Point3::new(0.4 * f - 0.2, 0.1, -0.1));
            }
            boxes.push(BoundingBox3D::axis_aligned(*c, [0.5, 0.5, 0.5], *cls));
        }
        Scene {
            cloud: PointCloud::new(points),
            boxes,
            domain_tag: DomainTag::Source,
            scene_id: id.into(),
        }
    }

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn single_object_extracted_in_box_frame() {
        let c = Point3::new(1.0, 2.0, 0.25);
        let db = build_database(&[scene_with("s0", &[(0, 50, c)])], &set(&[0]), 5).unwrap();
        assert_eq!(db.len(), 1);
        let obj = &db.objects()[0];
        assert_eq!(obj.points.len(), 50);
        assert_eq!(obj.bbox.center, Point3::ORIGIN);
        assert_eq!(points_in_box(&obj.points, &obj.bbox).len(), 50);
        assert_eq!(obj.source_scene_id, "s0");
    }

    #[test]
    fn sparse_objects_skipped() {
        let db = build_database(&[scene_with("s0", &[(0, 3, Point3::ORIGIN)])], &set(&[0]), 5).unwrap();
        assert!(db.is_empty());
    }

    #[test]
    fn empty_class_set_rejected() {
        assert!(matches!(build_database(&[], &BTreeSet::new(), 5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn per_class_counts_match_enumeration() {
        let scenes = vec![
            scene_with(
                "a",
                &[(0, 10, Point3::new(-2.0, 0.0, 0.0)), (1, 4, Point3::new(0.0, 0.0, 0.0)), (1, 8, Point3::new(2.0, 0.0, 0.0))],
            ),
            scene_with("b", &[(0, 6, Point3::new(-2.0, 0.0, 0.0)), (2, 9, Point3::new(2.0, 0.0, 0.0))]),
        ];
        let classes = set(&[0, 1]);
        let db = build_database(&scenes, &classes, 5).unwrap();
        // brute-force count
        let mut expected: BTreeMap<u32, usize> = BTreeMap::new();
        for s in &scenes {
            for b in &s.boxes {
                let n = s.cloud.points.iter().filter(|p| b.contains(p)).count();
                if classes.contains(&b.class_id) && n >= 5 {
                    *expected.entry(b.class_id).or_default() += 1;
                }
            }
        }
        assert_eq!(db.class_counts(), expected);
        assert_eq!(db.indices_of_class(1).len(), 1);
    }

    #[test]
    fn permuting_scenes_permutes_objects_only() {
        let a = scene_with("a", &[(0, 10, Point3::new(-2.0, 0.0, 0.0))]);
        let b = scene_with("b", &[(1, 7, Point3::new(2.0, 0.0, 0.0))]);
        let classes = set(&[0, 1]);
        let d1 = build_database(&[a.clone(), b.clone()], &classes, 5).unwrap();
        let d2 = build_database(&[b, a], &classes, 5).unwrap();
        let key = |o: &GtObject| format!("{:?}", o);
        let mut k1: Vec<_> = d1.objects().iter().map(key).collect();
        let mut k2: Vec<_> = d2.objects().iter().map(key).collect();
        assert_ne!(k1, k2);
        k1.sort();
        k2.sort();
        assert_eq!(k1, k2);
    }

    #[test]
    fn sampling_contract() {
        let one = build_database(&[scene_with("s", &[(0, 10, Point3::ORIGIN)])], &set(&[0]), 5).unwrap();
        let mut r = rng::stream(0, "t", 0);
        assert_eq!(sample_objects(&one, 1, &mut r).unwrap()[0].0, 0);

        let empty = GtDatabase::default();
        assert!(matches!(sample_objects(&empty, 1, &mut r), Err(Error::EmptyDatabase)));

        let four = build_database(
            &[scene_with(
                "s",
                &[
                    (0, 10, Point3::new(-3.0, 0.0, 0.0)),
                    (0, 10, Point3::new(-1.0, 0.0, 0.0)),
                    (0, 10, Point3::new(1.0, 0.0, 0.0)),
                    (0, 10, Point3::new(3.0, 0.0, 0.0)),
                ],
            )],
            &set(&[0]),
            5,
        )
        .unwrap();
        let draw = |seed| {
            let mut r = rng::stream(seed, "t", 0);
            sample_objects(&four, 3, &mut r).unwrap().iter().map(|p| p.0).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let picks = draw(5);
        let distinct: BTreeSet<_> = picks.iter().collect();
        assert_eq!(distinct.len(), 3);

        let mut counts = [0usize; 4];
        let mut r = rng::stream(11, "t", 0);
        for _ in 0..10_000 {
            counts[sample_objects(&four, 1, &mut r).unwrap()[0].0] += 1;
        }
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 0.05 * 2500.0, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        // 3 dof, p = 0.001
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }

    #[test]
    fn save_load_round_trip() {
        let scenes = vec![scene_with("a", &[(0, 10, Point3::new(-2.0, 0.5, 0.0)), (1, 8, Point3::new(2.0, 0.0, 0.0))])];
        let db = build_database(&scenes, &set(&[0, 1]), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let back = GtDatabase::load(dir.path()).unwrap();
        assert_eq!(back, db);
    }
}
