//! Binary scene files and JSON transform-record sidecars.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     b"DCSN"
//! version   u32
//! id_len    u32, then id_len bytes of UTF-8 scene id
//! tag       u8  (DomainTag)
//! n_points  u64
//! n_boxes   u64
//! points    n_points * 3 * f64
//! boxes     n_boxes * (class_id u32, center 3*f64, size 3*f64, heading f64)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{DomainTag, Scene, TransformRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox3D, Point3, PointCloud};

pub const SCENE_MAGIC: &[u8; 4] = b"DCSN";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_EXT: &str = "dcs";
pub const RECORD_EXT: &str = "record.json";

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let id = scene.scene_id.as_bytes();
    let mut out = Vec::with_capacity(32 + id.len() + scene.cloud.len() * 24 + scene.boxes.len() * 60);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(scene.domain_tag as u8);
    out.extend_from_slice(&(scene.cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.boxes.len() as u64).to_le_bytes());
    for p in &scene.cloud.points {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in &scene.boxes {
        out.extend_from_slice(&b.class_id.to_le_bytes());
        for v in b.center.to_array().iter().chain(&b.size).chain(std::iter::once(&b.heading)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::corrupt(self.path, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn len(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_bytes as u64) > remaining {
            return Err(Error::corrupt(self.path, "truncated file"));
        }
        Ok(n as usize)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(self.path, "trailing bytes"));
        }
        Ok(())
    }

    pub(crate) fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::corrupt(self.path, reason)
    }
}

pub fn decode_scene(buf: &[u8], path: &Path) -> Result<Scene> {
    let mut r = Reader::new(buf, path);
    if r.take(4)? != SCENE_MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let id_len = r.u32()? as usize;
    let scene_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| r.corrupt("scene id is not UTF-8"))?;
    let tag = r.u8()?;
    let domain_tag = DomainTag::from_u8(tag).ok_or_else(|| r.corrupt(format!("unknown domain tag {tag}")))?;
    let n_points = r.u64()?;
    let n_boxes = r.u64()?;
    let remaining = (buf.len() - r.pos) as u64;
    if n_points.saturating_mul(24).saturating_add(n_boxes.saturating_mul(60)) != remaining {
        return Err(r.corrupt("truncated file"));
    }
    let mut points = Vec::with_capacity(n_points as usize);
    for _ in 0..n_points {
        points.push(Point3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let mut boxes = Vec::with_capacity(n_boxes as usize);
    for _ in 0..n_boxes {
        let class_id = r.u32()?;
        let center = Point3::new(r.f64()?, r.f64()?, r.f64()?);
        let size = [r.f64()?, r.f64()?, r.f64()?];
        let heading = r.f64()?;
        boxes.push(BoundingBox3D {
            center,
            size,
            heading,
            class_id,
        });
    }
    r.finish()?;
    Ok(Scene {
        cloud: PointCloud::new(points),
        boxes,
        domain_tag,
        scene_id,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&buf, path)
}

/// Save scenes as `<dir>/<index>_<scene_id>.dcs`, returning the paths.
pub fn save_scenes(dir: &Path, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("{i:05}_{}.{SCENE_EXT}", sanitize(&s.scene_id)));
            save_scene(&path, s).map(|_| path)
        })
        .collect()
}

/// Load every scene file in `dir`, sorted by file name.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SCENE_EXT))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

/// Save augmented scenes next to their transform records: scene `i` goes
/// to `<dir>/<i>_<id>.dcs` and its record to `<dir>/<i>_<id>.record.json`.
pub fn save_augmented(dir: &Path, items: &[(Scene, TransformRecord)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (scene, record)) in items.iter().enumerate() {
        let stem = format!("{i:05}_{}", sanitize(&scene.scene_id));
        save_scene(&dir.join(format!("{stem}.{SCENE_EXT}")), scene)?;
        save_record(&dir.join(format!("{stem}.{RECORD_EXT}")), record)?;
    }
    Ok(())
}

pub fn save_record(path: &Path, record: &TransformRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::corrupt(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_record(path: &Path) -> Result<TransformRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scene() -> Scene {
        Scene {
            cloud: PointCloud::new(vec![Point3::new(0.1, -2.5, 1e-300), Point3::new(f64::MIN_POSITIVE, 3.0, -0.0)]),
            boxes: vec![BoundingBox3D::new(Point3::new(1.0, 2.0, 0.5), [0.5, 0.7, 1.1], -0.3, 4)],
            domain_tag: DomainTag::InTarget,
            scene_id: "target-0007".into(),
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dcs");
        let s = sample_scene();
        save_scene(&path, &s).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(encode_scene(&back), encode_scene(&s));
        assert_eq!(back.cloud.points[1].z.to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = Scene {
            cloud: PointCloud::default(),
            boxes: vec![],
            domain_tag: DomainTag::Source,
            scene_id: String::new(),
        };
        let back = decode_scene(&encode_scene(&s), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_scene(&sample_scene());
        bytes[0] = b'X';
        assert!(matches!(decode_scene(&bytes, Path::new("m")), Err(Error::CorruptFile { .. })));

        let mut bytes = encode_scene(&sample_scene());
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_scene(&bytes, Path::new("m")), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_scene(&sample_scene());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode_scene(&bytes[..cut], Path::new("m")), Err(Error::CorruptFile { .. })));
        }
    }

    #[test]
    fn directory_round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample_scene();
        a.scene_id = "b/second".into();
        let scenes = vec![sample_scene(), a];
        save_scenes(dir.path(), &scenes).unwrap();
        assert_eq!(load_scenes(dir.path()).unwrap(), scenes);
    }

    #[test]
    fn record_sidecars_round_trip() {
        use crate::augment::{in_domain_cp, PasteConfig};
        use crate::gtdb::build_database;
        use crate::workbench::synth::{synth_domain, DomainSpec};
        let (src, _) = DomainSpec::desk_pair();
        let scenes = synth_domain(&src, 3, 0, 4, crate::par::Execution::Sequential).unwrap();
        let db = build_database(&scenes, &[0, 1, 2].into_iter().collect(), 5).unwrap();
        let items: Vec<(Scene, TransformRecord)> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| in_domain_cp(s, &db, &PasteConfig::default(), &mut crate::rng::stream(1, "t", i as u64)).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_augmented(dir.path(), &items).unwrap();
        let loaded = load_scenes(dir.path()).unwrap();
        for (i, (scene, record)) in items.iter().enumerate() {
            assert_eq!(encode_scene(&loaded[i]), encode_scene(scene));
            let path = dir.path().join(format!("{i:05}_{}.{RECORD_EXT}", scene.scene_id));
            assert_eq!(&load_record(&path).unwrap(), record);
        }
    }
}
