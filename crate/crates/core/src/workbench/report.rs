//! Aggregation of `eval_<method>.txt` files written by the `eval` command or
//! by experiment runs into a seed-averaged comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::parse_report_text;

/// mAP triple read back from one eval file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapTriple {
    pub base: f64,
    pub novel: f64,
    pub all: f64,
}

/// Eval files of `dir` and of its immediate subdirectories, sorted by path.
pub fn find_eval_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let visit = |d: &Path, recurse: bool, out: &mut Vec<PathBuf>| -> Result<Vec<PathBuf>> {
        let mut subdirs = Vec::new();
        for entry in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let path = entry.map_err(|e| Error::io(d, e))?.path();
            if path.is_dir() {
                if recurse {
                    subdirs.push(path);
                }
            } else if method_of(&path).is_some() {
                out.push(path);
            }
        }
        Ok(subdirs)
    };
    for sub in visit(dir, true, &mut out)? {
        visit(&sub, false, &mut out)?;
    }
    out.sort();
    Ok(out)
}

fn method_of(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let m = name.strip_prefix("eval_")?.strip_suffix(".txt")?;
    (!m.is_empty()).then(|| m.to_string())
}

pub fn read_map(path: &Path) -> Result<MapTriple> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = parse_report_text(&text);
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::corrupt(path, format!("missing or invalid {k}")))
    };
    Ok(MapTriple {
        base: get("map.base")?,
        novel: get("map.novel")?,
        all: get("map.all")?,
    })
}

/// Per-method list of mAP triples, one per eval file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub methods: BTreeMap<String, Vec<MapTriple>>,
}

impl Summary {
    pub fn collect(dir: &Path) -> Result<Self> {
        let mut methods: BTreeMap<String, Vec<MapTriple>> = BTreeMap::new();
        for path in find_eval_files(dir)? {
            let m = method_of(&path).expect("filtered by find_eval_files");
            methods.entry(m).or_default().push(read_map(&path)?);
        }
        Ok(Self { methods })
    }

    pub fn mean(&self, method: &str) -> Option<MapTriple> {
        let v = self.methods.get(method)?;
        let n = v.len() as f64;
        Some(MapTriple {
            base: v.iter().map(|t| t.base).sum::<f64>() / n,
            novel: v.iter().map(|t| t.novel).sum::<f64>() / n,
            all: v.iter().map(|t| t.all).sum::<f64>() / n,
        })
    }

    /// `method,runs,map.base,map.novel,map.all` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,runs,map.base,map.novel,map.all\n");
        for (m, v) in &self.methods {
            let t = self.mean(m).expect("non-empty");
            let _ = writeln!(s, "{m},{},{:.6},{:.6},{:.6}", v.len(), t.base, t.novel, t.all);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_eval(path: &Path, b: f64, n: f64, a: f64) {
        fs::write(path, format!("iou=0.25\nmap.base={b}\nmap.novel={n}\nmap.all={a}\n")).unwrap();
    }

    #[test]
    fn averages_over_run_dirs() {
        let dir = tempfile::tempdir().unwrap();
        for (i, b) in [0.2, 0.4].iter().enumerate() {
            let rd = dir.path().join(format!("run-{i}"));
            fs::create_dir_all(&rd).unwrap();
            write_eval(&rd.join("eval_dacil.txt"), *b, 0.5, 0.3);
        }
        write_eval(&dir.path().join("eval_finetune.txt"), 0.0, 0.6, 0.25);
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let s = Summary::collect(dir.path()).unwrap();
        assert_eq!(s.methods.len(), 2);
        let m = s.mean("dacil").unwrap();
        assert!((m.base - 0.3).abs() < 1e-12 && m.novel == 0.5);
        let csv = s.to_csv();
        assert!(csv.contains("dacil,2,0.300000,0.500000,0.300000"));
        assert!(csv.contains("finetune,1,"));
    }

    #[test]
    fn missing_key_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("eval_x.txt"), "map.base=0.1\n").unwrap();
        assert!(matches!(Summary::collect(dir.path()), Err(Error::CorruptFile { .. })));
    }
}
