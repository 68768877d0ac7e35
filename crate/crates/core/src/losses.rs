//! Training objectives over detector proposals.
//!
//! Every loss returns its value together with gradients w.r.t. the student
//! proposal outputs ([`ProposalGrad`]); teacher proposals are constants.

use serde::{Deserialize, Serialize};

use crate::detector::{Proposal, ProposalGrad};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox3D, Point3};

/// Lower clamp on teacher probabilities inside the KL ratio.
pub const TEACHER_PROB_FLOOR: f64 = 1e-8;
/// Tolerance on `sum(p) == 1` for class distributions.
pub const SIMPLEX_TOL: f64 = 1e-6;
pub const DEFAULT_ASSIGNMENT_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sup: f64,
    pub dis: f64,
    pub con: f64,
    pub class: f64,
    pub size: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sup: 10.0,
            dis: 1.0,
            con: 10.0,
            class: 1.0,
            size: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sup", self.sup),
            ("dis", self.dis),
            ("con", self.con),
            ("class", self.class),
            ("size", self.size),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sup: self.sup * c,
            dis: self.dis * c,
            con: self.con * c,
            class: self.class * c,
            size: self.size * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDirection {
    /// Every teacher proposal picks its nearest student proposal.
    TeacherToStudent,
    /// Every student proposal picks its nearest teacher proposal.
    StudentToTeacher,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    /// `(teacher_index, student_index)`.
    pub pairs: Vec<(usize, usize)>,
    pub direction: PairDirection,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index of the nearest candidate for every anchor; ties go to the lower
/// candidate index.
pub fn nearest_indices(anchors: &[Point3], candidates: &[Point3]) -> Result<Vec<usize>> {
    if anchors.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyProposals);
    }
    Ok(anchors
        .iter()
        .map(|a| {
            let mut best = 0;
            let mut best_d = a.distance_sq(&candidates[0]);
            for (j, c) in candidates.iter().enumerate().skip(1) {
                let d = a.distance_sq(c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Pair proposals by nearest center. The anchors are the teacher proposals
/// for [`PairDirection::TeacherToStudent`] and the student proposals
/// otherwise.
pub fn pair_proposals(student: &[Proposal], teacher: &[Proposal], direction: PairDirection) -> Result<PairSet> {
    let s: Vec<Point3> = student.iter().map(|p| p.center).collect();
    let t: Vec<Point3> = teacher.iter().map(|p| p.center).collect();
    let pairs = match direction {
        PairDirection::TeacherToStudent => nearest_indices(&t, &s)?.into_iter().enumerate().collect(),
        PairDirection::StudentToTeacher => nearest_indices(&s, &t)?
            .into_iter()
            .enumerate()
            .map(|(si, ti)| (ti, si))
            .collect(),
    };
    Ok(PairSet { pairs, direction })
}

/// A scalar loss with its gradient w.r.t. each student proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<ProposalGrad>,
}

impl LossValue {
    fn zero(student: &[Proposal]) -> Self {
        Self {
            value: 0.0,
            grads: student.iter().map(|p| ProposalGrad::zero(p.class_logits.len())).collect(),
        }
    }
}

fn check_pairs(pairs: &PairSet, student: &[Proposal], teacher: &[Proposal]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyProposals);
    }
    if pairs.pairs.iter().any(|&(t, s)| t >= teacher.len() || s >= student.len()) {
        return Err(Error::Shape("pair index out of range".into()));
    }
    Ok(())
}

/// Mean squared center distance over both pairing directions.
pub fn center_loss(student: &[Proposal], teacher: &[Proposal]) -> Result<LossValue> {
    let mut out = LossValue::zero(student);
    for dir in [PairDirection::StudentToTeacher, PairDirection::TeacherToStudent] {
        let pairs = pair_proposals(student, teacher, dir)?;
        let w = 1.0 / pairs.len() as f64;
        for &(t, s) in &pairs.pairs {
            let d = (student[s].center - teacher[t].center).to_array();
            out.value += w * d.iter().map(|v| v * v).sum::<f64>();
            for (g, dv) in out.grads[s].center.iter_mut().zip(d) {
                *g += 2.0 * w * dv;
            }
        }
    }
    Ok(out)
}

fn check_simplex(p: &Proposal) -> Result<()> {
    let sum: f64 = p.class_probs.iter().sum();
    if p.class_probs.is_empty() || p.class_probs.iter().any(|q| !(q.is_finite() && *q >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("class probabilities sum to {sum}")));
    }
    Ok(())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(p || max(q, floor))` with `p = softmax(logits)`, plus its gradient
/// w.r.t. the logits. Components with `p == q` contribute exactly zero.
pub fn kl_from_logits(logits: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let p = crate::detector::softmax(logits);
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| if pk == qk || pk == 0.0 { 0.0 } else { pk.ln() - qk.max(TEACHER_PROB_FLOOR).ln() })
        .collect();
    let kl: f64 = p.iter().zip(&terms).map(|(pk, t)| pk * t).sum();
    let grad = p.iter().zip(&terms).map(|(pk, t)| pk * (t - kl)).collect();
    (kl, grad)
}

/// Mean `KL(student || teacher)` over the pairs.
pub fn class_loss(student: &[Proposal], teacher: &[Proposal], pairs: &PairSet) -> Result<LossValue> {
    check_pairs(pairs, student, teacher)?;
    for p in student.iter().chain(teacher) {
        check_simplex(p)?;
    }
    let mut out = LossValue::zero(student);
    let w = 1.0 / pairs.len() as f64;
    for &(t, s) in &pairs.pairs {
        if student[s].class_logits.len() != teacher[t].class_probs.len() {
            return Err(Error::Shape("class count differs between student and teacher".into()));
        }
        let (kl, g) = kl_from_logits(&student[s].class_logits, &teacher[t].class_probs);
        out.value += w * kl;
        for (a, b) in out.grads[s].class_logits.iter_mut().zip(g) {
            *a += w * b;
        }
    }
    Ok(out)
}

/// Mean over pairs of the per-dimension mean squared size difference.
pub fn size_loss(student: &[Proposal], teacher: &[Proposal], pairs: &PairSet) -> Result<LossValue> {
    check_pairs(pairs, student, teacher)?;
    let mut out = LossValue::zero(student);
    let w = 1.0 / pairs.len() as f64;
    for &(t, s) in &pairs.pairs {
        for d in 0..3 {
            let diff = student[s].size[d] - teacher[t].size[d];
            out.value += w * diff * diff / 3.0;
            out.grads[s].size[d] += w * 2.0 * diff / 3.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub center: f64,
    pub class: f64,
    pub size: f64,
    /// `center + w.class * class + w.size * size`
    pub value: f64,
    pub grads: Vec<ProposalGrad>,
}

pub fn consistency_loss(student: &[Proposal], teacher: &[Proposal], weights: &LossWeights) -> Result<ConsistencyLoss> {
    let center = center_loss(student, teacher)?;
    let pairs = pair_proposals(student, teacher, PairDirection::TeacherToStudent)?;
    let class = class_loss(student, teacher, &pairs)?;
    let size = size_loss(student, teacher, &pairs)?;
    let mut grads = center.grads;
    crate::detector::accumulate_grads(&mut grads, &class.grads, weights.class);
    crate::detector::accumulate_grads(&mut grads, &size.grads, weights.size);
    Ok(ConsistencyLoss {
        center: center.value,
        class: class.value,
        size: size.value,
        value: center.value + weights.class * class.value + weights.size * size.value,
        grads,
    })
}

/// Mean over aligned proposals of the squared logit difference restricted to
/// `base_classes`.
pub fn distillation_loss(student: &[Proposal], teacher: &[Proposal], base_classes: &[usize]) -> Result<LossValue> {
    if student.len() != teacher.len() {
        return Err(Error::Alignment {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    if student.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let mut out = LossValue::zero(student);
    let w = 1.0 / student.len() as f64;
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        for &c in base_classes {
            if c >= s.class_logits.len() || c >= t.class_logits.len() {
                return Err(Error::UnknownClass(c as u32));
            }
            let diff = s.class_logits[c] - t.class_logits[c];
            out.value += w * diff * diff;
            out.grads[i].class_logits[c] += 2.0 * w * diff;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss {
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub class: f64,
    pub num_positive: usize,
    pub value: f64,
    pub grads: Vec<ProposalGrad>,
}

/// Binary cross-entropy with logits, and its derivative.
fn bce_with_logits(x: f64, y: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    (loss, crate::detector::sigmoid(x) - y)
}

/// Label assigned to each proposal: the nearest label center to the
/// proposal's anchor vote, if within `radius`.
pub fn assign_labels(proposals: &[Proposal], labels: &[BoundingBox3D], radius: f64) -> Vec<Option<usize>> {
    if labels.is_empty() {
        return vec![None; proposals.len()];
    }
    let centers: Vec<Point3> = labels.iter().map(|b| b.center).collect();
    let anchors: Vec<Point3> = proposals.iter().map(|p| p.anchor).collect();
    let nearest = nearest_indices(&anchors, &centers).expect("non-empty");
    nearest
        .into_iter()
        .zip(&anchors)
        .map(|(j, a)| (a.distance_sq(&centers[j]) <= radius * radius).then_some(j))
        .collect()
}

/// Objectness BCE over all proposals plus, averaged over positives, squared
/// center error, squared size error and class cross-entropy.
pub fn supervised_loss(proposals: &[Proposal], labels: &[BoundingBox3D], radius: f64) -> Result<SupervisedLoss> {
    if proposals.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let c = proposals[0].class_logits.len();
    if let Some(b) = labels.iter().find(|b| b.class_id as usize >= c) {
        return Err(Error::UnknownClass(b.class_id));
    }
    let assigned = assign_labels(proposals, labels, radius);
    let num_positive = assigned.iter().flatten().count();
    let m = proposals.len() as f64;
    let wp = if num_positive > 0 { 1.0 / num_positive as f64 } else { 0.0 };
    let mut out = SupervisedLoss {
        objectness: 0.0,
        center: 0.0,
        size: 0.0,
        class: 0.0,
        num_positive,
        value: 0.0,
        grads: proposals.iter().map(|p| ProposalGrad::zero(p.class_logits.len())).collect(),
    };
    for (i, (p, a)) in proposals.iter().zip(&assigned).enumerate() {
        let (l, g) = bce_with_logits(p.objectness_logit, if a.is_some() { 1.0 } else { 0.0 });
        out.objectness += l / m;
        out.grads[i].objectness_logit = g / m;
        let Some(j) = *a else { continue };
        let label = &labels[j];
        let dc = (p.center - label.center).to_array();
        for d in 0..3 {
            out.center += wp * dc[d] * dc[d];
            out.grads[i].center[d] = 2.0 * wp * dc[d];
            let ds = p.size[d] - label.size[d];
            out.size += wp * ds * ds;
            out.grads[i].size[d] = 2.0 * wp * ds;
        }
        let lp = log_softmax(&p.class_logits);
        let k = label.class_id as usize;
        out.class -= wp * lp[k];
        for (q, (g, l)) in out.grads[i].class_logits.iter_mut().zip(&lp).enumerate() {
            *g = wp * (l.exp() - if q == k { 1.0 } else { 0.0 });
        }
    }
    out.value = out.objectness + out.center + out.size + out.class;
    Ok(out)
}

pub fn total_loss(l_sup: f64, l_dis: f64, l_con: f64, weights: &LossWeights) -> f64 {
    weights.sup * l_sup + weights.dis * l_dis + weights.con * l_con
}
