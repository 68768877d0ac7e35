//! Per-class average precision and mAP over 3D boxes.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::Scene;
use crate::detector::{forward, DetectorState, Mode, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BoundingBox3D};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub bbox: BoundingBox3D,
    pub confidence: f64,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }
}

/// Class names plus the base/novel split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    /// Indexed by class id.
    pub names: Vec<String>,
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
}

impl ClassPartition {
    pub fn validate(&self) -> Result<()> {
        let n = self.names.len() as u32;
        let mut seen = vec![false; self.names.len()];
        for &c in self.base.iter().chain(&self.novel) {
            if c >= n {
                return Err(Error::InvalidConfig(format!("class id {c} has no name")));
            }
            if std::mem::replace(&mut seen[c as usize], true) {
                return Err(Error::InvalidConfig(format!("class id {c} listed twice in the partition")));
            }
        }
        Ok(())
    }

    pub fn is_base(&self, c: u32) -> bool {
        self.base.contains(&c)
    }

    pub fn is_novel(&self, c: u32) -> bool {
        self.novel.contains(&c)
    }

    pub fn all(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.base.iter().chain(&self.novel).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn name(&self, c: u32) -> &str {
        &self.names[c as usize]
    }
}

/// Confidence of a proposal: objectness times its top class probability.
pub fn confidence(p: &Proposal) -> f64 {
    p.objectness * p.class_probs.iter().cloned().fold(0.0, f64::max)
}

/// Turn proposals into axis-aligned detections labelled with their argmax
/// class.
pub fn detections_from_proposals(scene_id: &str, proposals: &[Proposal]) -> Vec<Detection> {
    proposals
        .iter()
        .map(|p| Detection {
            scene_id: scene_id.to_string(),
            bbox: BoundingBox3D::axis_aligned(p.center, p.size, p.argmax_class() as u32),
            confidence: confidence(p),
        })
        .collect()
}

/// Eval-mode detections for every scene, after per-class NMS at `nms_iou`.
pub fn detect(state: &DetectorState, scenes: &[Scene], nms_iou: f64, exec: Execution) -> Result<Vec<Detection>> {
    let per_scene = par::try_map(exec, scenes, |s| {
        let out = forward(state, &s.cloud, Mode::Eval, None, None)?;
        Ok::<_, Error>(nms(detections_from_proposals(&s.scene_id, &out.proposals), nms_iou))
    })?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Greedy per-class non-maximum suppression within one scene. Keeps input
/// order among survivors.
pub fn nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let order = sort_order(&dets);
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.scene_id == d.scene_id && o.class_id() == d.class_id() && box_iou(&o.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    dets.into_iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d).collect()
}

/// Confidence descending; ties by scene id, then input order.
fn sort_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then_with(|| dets[a].scene_id.cmp(&dets[b].scene_id))
    });
    idx
}

/// A ground-truth box tagged with its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox<'a> {
    pub scene_id: &'a str,
    pub bbox: &'a BoundingBox3D,
}

/// Match one class's detections against its ground truth. Returns the
/// processing order and one TP flag per detection in that order.
pub fn match_detections(dets: &[Detection], gts: &[GtBox<'_>], iou_threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let order = sort_order(dets);
    let mut used = vec![false; gts.len()];
    let flags = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.scene_id != d.scene_id {
                    continue;
                }
                let iou = box_iou(&d.bbox, g.bbox);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (order, flags)
}

/// Precision/recall after each detection in confidence order.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP. `None` when there is neither ground truth nor
/// any detection, in which case the class is left out of every mean.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for ((recall, _), p) in curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = *recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub name: String,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
    /// (recall, precision) after each detection in confidence order.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassAp>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn ap(&self, class_id: u32) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).and_then(|c| c.ap)
    }

    /// `key=value` lines: `iou`, `class_ap.<name>`, `map.base`, `map.novel`,
    /// `map.all`, `count.gt`, `count.det`. Excluded classes print `none`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "iou={}", self.iou_threshold).unwrap();
        for c in &self.classes {
            match c.ap {
                Some(ap) => writeln!(s, "class_ap.{}={ap:.6}", c.name).unwrap(),
                None => writeln!(s, "class_ap.{}=none", c.name).unwrap(),
            }
        }
        writeln!(s, "map.base={:.6}", self.map_base).unwrap();
        writeln!(s, "map.novel={:.6}", self.map_novel).unwrap();
        writeln!(s, "map.all={:.6}", self.map_all).unwrap();
        writeln!(s, "count.gt={}", self.num_gt).unwrap();
        writeln!(s, "count.det={}", self.num_det).unwrap();
        s
    }

    /// `class,recall,precision` rows for every class.
    pub fn pr_table(&self) -> String {
        let mut s = String::from("class,recall,precision\n");
        for c in &self.classes {
            for (r, p) in &c.curve {
                writeln!(s, "{},{r:.6},{p:.6}", c.name).unwrap();
            }
        }
        s
    }
}

/// Parse the `key=value` form written by [`EvalReport::to_text`].
pub fn parse_report_text(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Evaluate detections against the labelled boxes of `scenes`.
pub fn evaluate(dets: &[Detection], scenes: &[Scene], classes: &ClassPartition, iou_threshold: f64) -> Result<EvalReport> {
    evaluate_with(Execution::default(), dets, scenes, classes, iou_threshold)
}

pub fn evaluate_with(
    exec: Execution,
    dets: &[Detection],
    scenes: &[Scene],
    classes: &ClassPartition,
    iou_threshold: f64,
) -> Result<EvalReport> {
    classes.validate()?;
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!("IoU threshold must lie in (0, 1], got {iou_threshold}")));
    }
    let ids = classes.all();
    let known = |c: u32| ids.binary_search(&c).is_ok();
    if let Some(d) = dets.iter().find(|d| !known(d.class_id())) {
        return Err(Error::UnknownClass(d.class_id()));
    }
    let gts: Vec<GtBox<'_>> = scenes
        .iter()
        .flat_map(|s| s.boxes.iter().map(move |b| GtBox { scene_id: &s.scene_id, bbox: b }))
        .collect();
    if let Some(g) = gts.iter().find(|g| !known(g.bbox.class_id)) {
        return Err(Error::UnknownClass(g.bbox.class_id));
    }
    let per_class = par::map(exec, &ids, |&c| {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id() == c).cloned().collect();
        let cg: Vec<GtBox<'_>> = gts.iter().filter(|g| g.bbox.class_id == c).cloned().collect();
        let (_, flags) = match_detections(&cd, &cg, iou_threshold);
        ClassAp {
            class_id: c,
            name: classes.name(c).to_string(),
            ap: average_precision(&flags, cg.len()),
            num_gt: cg.len(),
            num_det: cd.len(),
            curve: pr_curve(&flags, cg.len()),
        }
    });
    let m = |keep: &dyn Fn(u32) -> bool| mean(per_class.iter().filter(|c| keep(c.class_id)).filter_map(|c| c.ap));
    Ok(EvalReport {
        iou_threshold,
        map_base: m(&|c| classes.is_base(c)),
        map_novel: m(&|c| classes.is_novel(c)),
        map_all: m(&|_| true),
        num_gt: gts.len(),
        num_det: dets.len(),
        classes: per_class,
    })
}
