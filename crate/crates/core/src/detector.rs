//! A small voting detector with hand-written forward and backward passes.
//!
//! Pipeline for one cloud:
//!
//! 1. farthest point sampling picks `num_seeds` seeds;
//! 2. each seed gathers its `knn` nearest points, expressed relative to the
//!    seed plus the point's height above the lowest point of the cloud;
//! 3. a shared per-point MLP (two linear + BN + ReLU layers) is max-pooled
//!    into one feature per seed;
//! 4. the vote head (linear + BN + ReLU, linear) predicts an offset and the
//!    vote is `seed + offset`;
//! 5. farthest point sampling over the votes picks `num_proposals` anchors,
//!    votes within `group_radius` of an anchor are grouped and their seed
//!    features max-pooled;
//! 6. the proposal head (linear + BN + ReLU, linear) emits an objectness
//!    logit, a center offset from the anchor, a log-size and class logits.
//!
//! All index selections (seeds, neighbours, anchors, groups) are recorded in
//! a [`SamplingTrace`]. Replaying a trace in another model forces a
//! one-to-one proposal correspondence with the model that produced it.
//! Backward treats those selections, and the max-pool winners, as constant
//! routing.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::rng;
use crate::workbench::io::Reader;

/// Per-point input: offset from the seed (3) and height above the floor (1).
pub const INPUT_DIM: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const NUM_BN_LAYERS: usize = 4;
/// Objectness logit, center offset, log-size; class logits follow.
pub const BOX_OUTPUTS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_seeds: usize,
    pub knn: usize,
    pub hidden: usize,
    pub num_proposals: usize,
    pub group_radius: f64,
    pub num_classes: usize,
    pub bn_momentum: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_seeds: 32,
            knn: 16,
            hidden: 32,
            num_proposals: 8,
            group_radius: 0.5,
            num_classes: 5,
            bn_momentum: 0.9,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_seeds", self.num_seeds),
            ("knn", self.knn),
            ("hidden", self.hidden),
            ("num_proposals", self.num_proposals),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_proposals > self.num_seeds {
            return Err(Error::InvalidConfig("num_proposals must not exceed num_seeds".into()));
        }
        if !(self.group_radius > 0.0 && self.group_radius.is_finite()) {
            return Err(Error::InvalidConfig("group_radius must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        BOX_OUTPUTS + self.num_classes
    }
}

/// Offsets of every parameter tensor inside the flat parameter vector, in
/// declared (checkpoint) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub enc1_w: usize,
    pub bn1_gamma: usize,
    pub bn1_beta: usize,
    pub enc2_w: usize,
    pub bn2_gamma: usize,
    pub bn2_beta: usize,
    pub vote1_w: usize,
    pub bn3_gamma: usize,
    pub bn3_beta: usize,
    pub vote2_w: usize,
    pub vote2_b: usize,
    pub prop1_w: usize,
    pub bn4_gamma: usize,
    pub bn4_beta: usize,
    pub prop2_w: usize,
    pub prop2_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &DetectorConfig) -> Self {
        let h = cfg.hidden;
        let o = cfg.output_dim();
        let mut at = 0;
        let mut next = |len: usize| {
            let off = at;
            at += len;
            off
        };
        let enc1_w = next(h * INPUT_DIM);
        let bn1_gamma = next(h);
        let bn1_beta = next(h);
        let enc2_w = next(h * h);
        let bn2_gamma = next(h);
        let bn2_beta = next(h);
        let vote1_w = next(h * h);
        let bn3_gamma = next(h);
        let bn3_beta = next(h);
        let vote2_w = next(3 * h);
        let vote2_b = next(3);
        let prop1_w = next(h * h);
        let bn4_gamma = next(h);
        let bn4_beta = next(h);
        let prop2_w = next(o * h);
        let prop2_b = next(o);
        Self {
            enc1_w,
            bn1_gamma,
            bn1_beta,
            enc2_w,
            bn2_gamma,
            bn2_beta,
            vote1_w,
            bn3_gamma,
            bn3_beta,
            vote2_w,
            vote2_b,
            prop1_w,
            bn4_gamma,
            bn4_beta,
            prop2_w,
            prop2_b,
            total: at,
        }
    }

    /// `(name, offset, len)` for every tensor, in declared order.
    pub fn tensors(&self, cfg: &DetectorConfig) -> Vec<(&'static str, usize, usize)> {
        let h = cfg.hidden;
        let o = cfg.output_dim();
        vec![
            ("enc1.weight", self.enc1_w, h * INPUT_DIM),
            ("bn1.gamma", self.bn1_gamma, h),
            ("bn1.beta", self.bn1_beta, h),
            ("enc2.weight", self.enc2_w, h * h),
            ("bn2.gamma", self.bn2_gamma, h),
            ("bn2.beta", self.bn2_beta, h),
            ("vote1.weight", self.vote1_w, h * h),
            ("bn3.gamma", self.bn3_gamma, h),
            ("bn3.beta", self.bn3_beta, h),
            ("vote2.weight", self.vote2_w, 3 * h),
            ("vote2.bias", self.vote2_b, 3),
            ("prop1.weight", self.prop1_w, h * h),
            ("bn4.gamma", self.bn4_gamma, h),
            ("bn4.beta", self.bn4_beta, h),
            ("prop2.weight", self.prop2_w, o * h),
            ("prop2.bias", self.prop2_b, o),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running (or batch) normalization statistics for every BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
}

impl BnStats {
    pub fn identity(hidden: usize) -> Self {
        Self {
            layers: (0..NUM_BN_LAYERS)
                .map(|_| BnLayerStats {
                    mean: vec![0.0; hidden],
                    var: vec![1.0; hidden],
                })
                .collect(),
        }
    }

    pub fn check_shape(&self, hidden: usize) -> Result<()> {
        if self.layers.len() != NUM_BN_LAYERS {
            return Err(Error::Shape(format!(
                "expected {NUM_BN_LAYERS} BN layers, got {}",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.mean.len() != hidden || l.var.len() != hidden {
                return Err(Error::Shape(format!(
                    "BN layer {i} has {}/{} channels, expected {hidden}",
                    l.mean.len(),
                    l.var.len()
                )));
            }
        }
        Ok(())
    }

    /// Flattened `mean, var` per layer, in layer order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.mean.iter().chain(&l.var))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.mean.iter_mut().chain(l.var.iter_mut()))
    }
}

/// All learnable parameters plus BN running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    config: DetectorConfig,
    params: Vec<f64>,
    bn: BnStats,
    frozen: bool,
}

impl DetectorState {
    /// Fresh, seeded initialization.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::stream(seed, "detector-init", 0);
        let h = config.hidden;
        let o = config.output_dim();
        let mut fill = |off: usize, len: usize, bound: f64, r: &mut rng::Rng| {
            for v in &mut params[off..off + len] {
                *v = r.gen_range(-bound..bound);
            }
        };
        fill(layout.enc1_w, h * INPUT_DIM, (6.0 / INPUT_DIM as f64).sqrt(), &mut r);
        fill(layout.enc2_w, h * h, (6.0 / h as f64).sqrt(), &mut r);
        fill(layout.vote1_w, h * h, (6.0 / h as f64).sqrt(), &mut r);
        fill(layout.vote2_w, 3 * h, 0.1 / (h as f64).sqrt(), &mut r);
        fill(layout.prop1_w, h * h, (6.0 / h as f64).sqrt(), &mut r);
        fill(layout.prop2_w, o * h, 0.3 / (h as f64).sqrt(), &mut r);
        for off in [layout.bn1_gamma, layout.bn2_gamma, layout.bn3_gamma, layout.bn4_gamma] {
            params[off..off + h].iter_mut().for_each(|g| *g = 1.0);
        }
        Ok(Self {
            bn: BnStats::identity(h),
            config,
            params,
            frozen: false,
        })
    }

    pub fn from_parts(config: DetectorConfig, params: Vec<f64>, bn: BnStats, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        bn.check_shape(config.hidden)?;
        Ok(Self {
            config,
            params,
            bn,
            frozen,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn bn_stats(&self) -> &BnStats {
        &self.bn
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Deep, independent copy that rejects every mutation.
    pub fn freeze(&self) -> DetectorState {
        DetectorState {
            frozen: true,
            ..self.clone()
        }
    }

    /// Deep, trainable copy.
    pub fn copy_state(&self) -> DetectorState {
        DetectorState {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn export_bn_stats(&self) -> BnStats {
        self.bn.clone()
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::FrozenState)
        } else {
            Ok(())
        }
    }

    /// Add `delta` to the parameters.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        self.ensure_mutable()?;
        if delta.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "update has {} entries, state has {}",
                delta.len(),
                self.params.len()
            )));
        }
        self.params.iter_mut().zip(delta).for_each(|(p, d)| *p += d);
        Ok(())
    }

    /// Mutable access to parameters and BN statistics together, for
    /// elementwise updates such as EMA.
    pub fn parts_mut(&mut self) -> Result<(&mut [f64], &mut BnStats)> {
        self.ensure_mutable()?;
        Ok((&mut self.params, &mut self.bn))
    }

    pub fn set_bn_stats(&mut self, bn: BnStats) -> Result<()> {
        self.ensure_mutable()?;
        bn.check_shape(self.config.hidden)?;
        self.bn = bn;
        Ok(())
    }

    /// Fold batch statistics from a train-mode forward into the running
    /// statistics: `running = momentum * running + (1 - momentum) * batch`.
    pub fn absorb_batch_stats(&mut self, batch: &BnStats) -> Result<()> {
        self.ensure_mutable()?;
        batch.check_shape(self.config.hidden)?;
        let m = self.config.bn_momentum;
        for (run, b) in self.bn.values_mut().zip(batch.values()) {
            *run = m * *run + (1.0 - m) * b;
        }
        Ok(())
    }
}

/// Recorded index selections of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingTrace {
    pub num_points: usize,
    pub seeds: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    /// Seed index whose vote anchors each proposal.
    pub anchors: Vec<usize>,
    /// Seed indices grouped into each proposal.
    pub groups: Vec<Vec<usize>>,
}

impl SamplingTrace {
    fn validate(&self, cfg: &DetectorConfig, num_points: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::TraceMismatch(msg));
        if self.num_points != num_points {
            return bad(format!("trace recorded on {} points, cloud has {num_points}", self.num_points));
        }
        if self.seeds.len() != cfg.num_seeds || self.neighbors.len() != cfg.num_seeds {
            return bad(format!("trace has {} seeds, config wants {}", self.seeds.len(), cfg.num_seeds));
        }
        if self.anchors.len() != cfg.num_proposals || self.groups.len() != cfg.num_proposals {
            return bad(format!(
                "trace has {} proposals, config wants {}",
                self.anchors.len(),
                cfg.num_proposals
            ));
        }
        let k = cfg.knn.min(num_points);
        let points_ok = self.seeds.iter().all(|&i| i < num_points)
            && self.neighbors.iter().all(|n| n.len() == k && n.iter().all(|&i| i < num_points));
        let seeds_ok = self.anchors.iter().all(|&i| i < cfg.num_seeds)
            && self.groups.iter().all(|g| !g.is_empty() && g.iter().all(|&i| i < cfg.num_seeds));
        if !(points_ok && seeds_ok) {
            return bad("index out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics normalized a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsOrigin {
    Batch,
    Running,
    External,
}

/// One detector hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub center: Point3,
    pub size: [f64; 3],
    pub class_probs: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub objectness: f64,
    pub objectness_logit: f64,
    /// Vote position the proposal was grouped around.
    pub anchor: Point3,
}

impl Proposal {
    /// Build a proposal from raw head outputs.
    pub fn from_raw(anchor: Point3, objectness_logit: f64, center: Point3, log_size: [f64; 3], class_logits: Vec<f64>) -> Self {
        Self {
            center,
            size: log_size.map(f64::exp),
            class_probs: softmax(&class_logits),
            class_logits,
            objectness: sigmoid(objectness_logit),
            objectness_logit,
            anchor,
        }
    }

    pub fn argmax_class(&self) -> usize {
        argmax(&self.class_probs)
    }
}

/// Upstream gradient for one proposal. Size gradients are taken w.r.t. the
/// (positive) size; backward chains them through the log-size head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrad {
    pub objectness_logit: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class_logits: Vec<f64>,
}

impl ProposalGrad {
    pub fn zero(num_classes: usize) -> Self {
        Self {
            objectness_logit: 0.0,
            center: [0.0; 3],
            size: [0.0; 3],
            class_logits: vec![0.0; num_classes],
        }
    }

    pub fn add_scaled(&mut self, other: &ProposalGrad, scale: f64) {
        self.objectness_logit += scale * other.objectness_logit;
        for d in 0..3 {
            self.center[d] += scale * other.center[d];
            self.size[d] += scale * other.size[d];
        }
        for (a, b) in self.class_logits.iter_mut().zip(&other.class_logits) {
            *a += scale * b;
        }
    }
}

pub fn zero_grads(n: usize, num_classes: usize) -> Vec<ProposalGrad> {
    vec![ProposalGrad::zero(num_classes); n]
}

/// Sum `scale * src` into `dst`, proposal by proposal.
pub fn accumulate_grads(dst: &mut [ProposalGrad], src: &[ProposalGrad], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_scaled(s, scale);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Farthest point sampling from index 0; ties go to the lower index.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Vec<usize> {
    let m = m.min(points.len());
    if m == 0 {
        return Vec::new();
    }
    let mut picked = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    picked.push(cur);
    while picked.len() < m {
        let c = points[cur];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = p.distance_sq(&c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
        picked.push(cur);
    }
    picked
}

/// The `k` nearest points to `query`, nearest first; ties by lower index.
pub fn knn(points: &[Point3], query: &Point3, k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (p.distance_sq(query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Votes within `radius` of the anchor vote, in index order; falls back to
/// the nearest vote when none qualifies.
pub fn group_votes(votes: &[Point3], anchor: &Point3, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let members: Vec<usize> = votes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.distance_sq(anchor) <= r2)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        knn(votes, anchor, 1)
    } else {
        members
    }
}

// ---------------------------------------------------------------------------
// dense helpers

/// `out[n][o] = sum_i w[o][i] * x[n][i]`
fn linear(x: &[f64], n: usize, in_dim: usize, w: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, v) in or.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            *v = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Accumulates `dw` and returns `dx`.
fn linear_backward(x: &[f64], n: usize, in_dim: usize, w: &[f64], out_dim: usize, dout: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * in_dim];
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dr = &dout[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for (o, &g) in dr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: bool,
}

/// Normalize `a` (n x c) in place into `gamma * xhat + beta` and return the
/// cache plus the batch statistics when they were computed.
fn bn_forward(
    a: &mut [f64],
    n: usize,
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    fixed: Option<&BnLayerStats>,
) -> (BnCache, Option<BnLayerStats>) {
    let (mean, var, batch) = match fixed {
        Some(s) => (s.mean.clone(), s.var.clone(), false),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for r in 0..n {
                for j in 0..c {
                    mean[j] += a[r * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for r in 0..n {
                for j in 0..c {
                    let d = a[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var, true)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; n * c];
    for r in 0..n {
        for j in 0..c {
            let h = (a[r * c + j] - mean[j]) * inv_std[j];
            xhat[r * c + j] = h;
            a[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    let stats = batch.then_some(BnLayerStats { mean, var });
    (BnCache { xhat, inv_std, batch }, stats)
}

/// Returns `da` and accumulates `dgamma`, `dbeta`.
fn bn_backward(cache: &BnCache, dy: &[f64], n: usize, c: usize, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<f64> {
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for r in 0..n {
        for j in 0..c {
            let g = dy[r * c + j];
            sum_dy[j] += g;
            sum_dy_xhat[j] += g * cache.xhat[r * c + j];
        }
    }
    for j in 0..c {
        dgamma[j] += sum_dy_xhat[j];
        dbeta[j] += sum_dy[j];
    }
    let mut da = vec![0.0; n * c];
    let nf = n as f64;
    for r in 0..n {
        for j in 0..c {
            let scale = gamma[j] * cache.inv_std[j];
            let g = dy[r * c + j];
            da[r * c + j] = if cache.batch {
                scale * (g - sum_dy[j] / nf - cache.xhat[r * c + j] * sum_dy_xhat[j] / nf)
            } else {
                scale * g
            };
        }
    }
    da
}

/// ReLU in place, or gating by a fixed mask. Returns the mask used.
fn relu_in_place(a: &mut [f64], fixed: Option<&[bool]>) -> Vec<bool> {
    let mask: Vec<bool> = match fixed {
        Some(m) => m.to_vec(),
        None => a.iter().map(|v| *v > 0.0).collect(),
    };
    for (v, on) in a.iter_mut().zip(&mask) {
        if !on {
            *v = 0.0;
        }
    }
    mask
}

fn relu_backward(mask: &[bool], d: &mut [f64]) {
    for (g, on) in d.iter_mut().zip(mask) {
        if !on {
            *g = 0.0;
        }
    }
}

/// Max-pool rows of `x` (c columns) over each index group. Returns pooled
/// features and the winning row per (group, channel).
fn max_pool(x: &[f64], c: usize, groups: impl Iterator<Item = Vec<usize>>, fixed: Option<&[usize]>) -> (Vec<f64>, Vec<usize>) {
    let mut pooled = Vec::new();
    let mut winners = Vec::new();
    for g in groups {
        for j in 0..c {
            let best = match fixed {
                Some(w) => w[winners.len()],
                None => {
                    let mut best = g[0];
                    for &r in &g[1..] {
                        if x[r * c + j] > x[best * c + j] {
                            best = r;
                        }
                    }
                    best
                }
            };
            pooled.push(x[best * c + j]);
            winners.push(best);
        }
    }
    (pooled, winners)
}

/// Activation pattern of one pass: ReLU masks and max-pool winners.
/// Replaying it pins every piecewise-linear choice of the network, so the
/// output becomes a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    relu: [Vec<bool>; NUM_BN_LAYERS],
    seed_winners: Vec<usize>,
    group_winners: Vec<usize>,
}

impl Routing {
    fn validate(&self, cfg: &DetectorConfig, trace: &SamplingTrace) -> Result<()> {
        let h = cfg.hidden;
        let n1 = trace.neighbors.iter().map(Vec::len).sum::<usize>();
        let rows = [n1, n1, cfg.num_seeds, cfg.num_proposals];
        let relu_ok = self.relu.iter().zip(rows).all(|(m, r)| m.len() == r * h);
        let seeds_ok = self.seed_winners.len() == cfg.num_seeds * h && self.seed_winners.iter().all(|&w| w < n1);
        let groups_ok = self.group_winners.len() == cfg.num_proposals * h
            && self.group_winners.iter().all(|&w| w < cfg.num_seeds);
        if relu_ok && seeds_ok && groups_ok {
            Ok(())
        } else {
            Err(Error::Shape("routing does not match the trace".into()))
        }
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    origin: StatsOrigin,
    x: Vec<f64>,
    bn1: BnCache,
    r1: Vec<f64>,
    bn2: BnCache,
    routing: Routing,
    seed_feat: Vec<f64>,
    bn3: BnCache,
    r3: Vec<f64>,
    group_feat: Vec<f64>,
    bn4: BnCache,
    r5: Vec<f64>,
    anchors: Vec<usize>,
    sizes: Vec<[f64; 3]>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stats_origin(&self) -> StatsOrigin {
        self.origin
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub proposals: Vec<Proposal>,
    pub trace: SamplingTrace,
    pub cache: ForwardCache,
    /// Present for train-mode passes normalized with batch statistics; fold
    /// into the state with [`DetectorState::absorb_batch_stats`].
    pub batch_stats: Option<BnStats>,
}

/// Run the detector on one cloud.
///
/// Normalization uses `bn_source` when given (in either mode), batch
/// statistics in train mode otherwise, and the state's running statistics
/// in eval mode. The state itself is never mutated.
pub fn forward(
    state: &DetectorState,
    cloud: &PointCloud,
    mode: Mode,
    trace_in: Option<&SamplingTrace>,
    bn_source: Option<&BnStats>,
) -> Result<ForwardOutput> {
    forward_impl(state, cloud, mode, trace_in, bn_source, None)
}

/// [`forward`] with the trace and the activation pattern of an earlier pass
/// both held fixed.
pub fn forward_with_routing(
    state: &DetectorState,
    cloud: &PointCloud,
    mode: Mode,
    trace: &SamplingTrace,
    routing: &Routing,
    bn_source: Option<&BnStats>,
) -> Result<ForwardOutput> {
    trace.validate(&state.config, cloud.len())?;
    routing.validate(&state.config, trace)?;
    forward_impl(state, cloud, mode, Some(trace), bn_source, Some(routing))
}

fn forward_impl(
    state: &DetectorState,
    cloud: &PointCloud,
    mode: Mode,
    trace_in: Option<&SamplingTrace>,
    bn_source: Option<&BnStats>,
    routing: Option<&Routing>,
) -> Result<ForwardOutput> {
    let cfg = &state.config;
    let p = &state.params;
    let l = state.layout();
    let h = cfg.hidden;
    let s = cfg.num_seeds;
    let m = cfg.num_proposals;
    let o = cfg.output_dim();
    let pts = &cloud.points;
    if pts.len() < s {
        return Err(Error::InsufficientPoints { got: pts.len(), need: s });
    }
    if let Some(t) = trace_in {
        t.validate(cfg, pts.len())?;
    }
    if let Some(b) = bn_source {
        b.check_shape(h)?;
    }
    let (fixed, origin): (Option<&BnStats>, StatsOrigin) = match (bn_source, mode) {
        (Some(b), _) => (Some(b), StatsOrigin::External),
        (None, Mode::Train) => (None, StatsOrigin::Batch),
        (None, Mode::Eval) => (Some(&state.bn), StatsOrigin::Running),
    };
    let layer = |i: usize| fixed.map(|b| &b.layers[i]);

    let seeds = match trace_in {
        Some(t) => t.seeds.clone(),
        None => farthest_point_sample(pts, s),
    };
    let neighbors: Vec<Vec<usize>> = match trace_in {
        Some(t) => t.neighbors.clone(),
        None => seeds.iter().map(|&i| knn(pts, &pts[i], cfg.knn)).collect(),
    };
    let k = neighbors[0].len();
    let n1 = s * k;
    let floor = pts.iter().map(|q| q.z).fold(f64::INFINITY, f64::min);

    let mut x = Vec::with_capacity(n1 * INPUT_DIM);
    for (si, nb) in seeds.iter().zip(&neighbors) {
        let c = pts[*si];
        for &j in nb {
            let q = pts[j];
            x.extend_from_slice(&[q.x - c.x, q.y - c.y, q.z - c.z, q.z - floor]);
        }
    }

    let mut batch_layers = Vec::new();

    let mut a1 = linear(&x, n1, INPUT_DIM, &p[l.enc1_w..], h);
    let (bn1, st) = bn_forward(&mut a1, n1, h, &p[l.bn1_gamma..l.bn1_gamma + h], &p[l.bn1_beta..l.bn1_beta + h], layer(0));
    batch_layers.extend(st);
    let mask1 = relu_in_place(&mut a1, routing.map(|r| &r.relu[0][..]));
    let r1 = a1;

    let mut a2 = linear(&r1, n1, h, &p[l.enc2_w..], h);
    let (bn2, st) = bn_forward(&mut a2, n1, h, &p[l.bn2_gamma..l.bn2_gamma + h], &p[l.bn2_beta..l.bn2_beta + h], layer(1));
    batch_layers.extend(st);
    let mask2 = relu_in_place(&mut a2, routing.map(|r| &r.relu[1][..]));
    let r2 = a2;

    let (seed_feat, seed_winners) = max_pool(
        &r2,
        h,
        (0..s).map(|i| (i * k..(i + 1) * k).collect()),
        routing.map(|r| &r.seed_winners[..]),
    );

    let mut a3 = linear(&seed_feat, s, h, &p[l.vote1_w..], h);
    let (bn3, st) = bn_forward(&mut a3, s, h, &p[l.bn3_gamma..l.bn3_gamma + h], &p[l.bn3_beta..l.bn3_beta + h], layer(2));
    batch_layers.extend(st);
    let mask3 = relu_in_place(&mut a3, routing.map(|r| &r.relu[2][..]));
    let r3 = a3;
    let offsets = linear(&r3, s, h, &p[l.vote2_w..], 3);
    let votes: Vec<Point3> = seeds
        .iter()
        .enumerate()
        .map(|(i, &si)| {
            let b = &p[l.vote2_b..l.vote2_b + 3];
            pts[si] + Point3::new(offsets[i * 3] + b[0], offsets[i * 3 + 1] + b[1], offsets[i * 3 + 2] + b[2])
        })
        .collect();

    let anchors = match trace_in {
        Some(t) => t.anchors.clone(),
        None => farthest_point_sample(&votes, m),
    };
    let groups: Vec<Vec<usize>> = match trace_in {
        Some(t) => t.groups.clone(),
        None => anchors
            .iter()
            .map(|&a| group_votes(&votes, &votes[a], cfg.group_radius))
            .collect(),
    };

    let (group_feat, group_winners) = max_pool(&seed_feat, h, groups.iter().cloned(), routing.map(|r| &r.group_winners[..]));
    let mut a5 = linear(&group_feat, m, h, &p[l.prop1_w..], h);
    let (bn4, st) = bn_forward(&mut a5, m, h, &p[l.bn4_gamma..l.bn4_gamma + h], &p[l.bn4_beta..l.bn4_beta + h], layer(3));
    batch_layers.extend(st);
    let mask5 = relu_in_place(&mut a5, routing.map(|r| &r.relu[3][..]));
    let r5 = a5;
    let mut out = linear(&r5, m, h, &p[l.prop2_w..], o);
    let bias = &p[l.prop2_b..l.prop2_b + o];
    for r in 0..m {
        for j in 0..o {
            out[r * o + j] += bias[j];
        }
    }

    let mut proposals = Vec::with_capacity(m);
    let mut sizes = Vec::with_capacity(m);
    for (r, &a) in anchors.iter().enumerate() {
        let row = &out[r * o..(r + 1) * o];
        let anchor = votes[a];
        let center = anchor + Point3::new(row[1], row[2], row[3]);
        let prop = Proposal::from_raw(anchor, row[0], center, [row[4], row[5], row[6]], row[BOX_OUTPUTS..].to_vec());
        sizes.push(prop.size);
        proposals.push(prop);
    }

    let batch_stats = (origin == StatsOrigin::Batch).then(|| BnStats { layers: batch_layers });
    Ok(ForwardOutput {
        proposals,
        trace: SamplingTrace {
            num_points: pts.len(),
            seeds,
            neighbors,
            anchors: anchors.clone(),
            groups,
        },
        cache: ForwardCache {
            mode,
            origin,
            x,
            bn1,
            r1,
            bn2,
            routing: Routing {
                relu: [mask1, mask2, mask3, mask5],
                seed_winners,
                group_winners,
            },
            seed_feat,
            bn3,
            r3,
            group_feat,
            bn4,
            r5,
            anchors,
            sizes,
        },
        batch_stats,
    })
}

/// Gradients of the proposal outputs w.r.t. every parameter, in the flat
/// parameter layout.
pub fn backward(state: &DetectorState, cache: &ForwardCache, grads: &[ProposalGrad]) -> Result<Vec<f64>> {
    if cache.mode != Mode::Train {
        return Err(Error::InvalidCache);
    }
    let cfg = &state.config;
    let p = &state.params;
    let l = state.layout();
    let h = cfg.hidden;
    let s = cfg.num_seeds;
    let m = cfg.num_proposals;
    let o = cfg.output_dim();
    let c = cfg.num_classes;
    if grads.len() != m || grads.iter().any(|g| g.class_logits.len() != c) {
        return Err(Error::Shape(format!("expected {m} proposal gradients with {c} classes")));
    }
    if cache.r1.len() != cache.x.len() / INPUT_DIM * h || cache.seed_feat.len() != s * h {
        return Err(Error::InvalidCache);
    }
    let n1 = cache.x.len() / INPUT_DIM;
    let mut g = vec![0.0; l.total];

    let mut dout = vec![0.0; m * o];
    let mut dvote = vec![0.0; s * 3];
    for (r, gr) in grads.iter().enumerate() {
        let row = &mut dout[r * o..(r + 1) * o];
        row[0] = gr.objectness_logit;
        for d in 0..3 {
            row[1 + d] = gr.center[d];
            row[4 + d] = gr.size[d] * cache.sizes[r][d];
            dvote[cache.anchors[r] * 3 + d] += gr.center[d];
        }
        row[BOX_OUTPUTS..].copy_from_slice(&gr.class_logits);
    }

    // proposal head
    for r in 0..m {
        for j in 0..o {
            g[l.prop2_b + j] += dout[r * o + j];
        }
    }
    let mut dr5 = linear_backward(&cache.r5, m, h, &p[l.prop2_w..], o, &dout, &mut g[l.prop2_w..l.prop2_w + o * h]);
    relu_backward(&cache.routing.relu[3], &mut dr5);
    let da5 = {
        let (head, tail) = g.split_at_mut(l.bn4_beta);
        bn_backward(
            &cache.bn4,
            &dr5,
            m,
            h,
            &p[l.bn4_gamma..l.bn4_gamma + h],
            &mut head[l.bn4_gamma..l.bn4_gamma + h],
            &mut tail[..h],
        )
    };
    let dgroup = linear_backward(&cache.group_feat, m, h, &p[l.prop1_w..], h, &da5, &mut g[l.prop1_w..l.prop1_w + h * h]);
    let mut dseed = vec![0.0; s * h];
    for (idx, &winner) in cache.routing.group_winners.iter().enumerate() {
        let j = idx % h;
        dseed[winner * h + j] += dgroup[idx];
    }

    // vote head
    for i in 0..s {
        for d in 0..3 {
            g[l.vote2_b + d] += dvote[i * 3 + d];
        }
    }
    let mut dr3 = linear_backward(&cache.r3, s, h, &p[l.vote2_w..], 3, &dvote, &mut g[l.vote2_w..l.vote2_w + 3 * h]);
    relu_backward(&cache.routing.relu[2], &mut dr3);
    let da3 = {
        let (head, tail) = g.split_at_mut(l.bn3_beta);
        bn_backward(
            &cache.bn3,
            &dr3,
            s,
            h,
            &p[l.bn3_gamma..l.bn3_gamma + h],
            &mut head[l.bn3_gamma..l.bn3_gamma + h],
            &mut tail[..h],
        )
    };
    let dseed_vote = linear_backward(&cache.seed_feat, s, h, &p[l.vote1_w..], h, &da3, &mut g[l.vote1_w..l.vote1_w + h * h]);
    for (a, b) in dseed.iter_mut().zip(&dseed_vote) {
        *a += b;
    }

    // encoder
    let mut dr2 = vec![0.0; n1 * h];
    for (idx, &winner) in cache.routing.seed_winners.iter().enumerate() {
        let j = idx % h;
        dr2[winner * h + j] += dseed[idx];
    }
    relu_backward(&cache.routing.relu[1], &mut dr2);
    let da2 = {
        let (head, tail) = g.split_at_mut(l.bn2_beta);
        bn_backward(
            &cache.bn2,
            &dr2,
            n1,
            h,
            &p[l.bn2_gamma..l.bn2_gamma + h],
            &mut head[l.bn2_gamma..l.bn2_gamma + h],
            &mut tail[..h],
        )
    };
    let mut dr1 = linear_backward(&cache.r1, n1, h, &p[l.enc2_w..], h, &da2, &mut g[l.enc2_w..l.enc2_w + h * h]);
    relu_backward(&cache.routing.relu[0], &mut dr1);
    let da1 = {
        let (head, tail) = g.split_at_mut(l.bn1_beta);
        bn_backward(
            &cache.bn1,
            &dr1,
            n1,
            h,
            &p[l.bn1_gamma..l.bn1_gamma + h],
            &mut head[l.bn1_gamma..l.bn1_gamma + h],
            &mut tail[..h],
        )
    };
    linear_backward(&cache.x, n1, INPUT_DIM, &p[l.enc1_w..], h, &da1, &mut g[l.enc1_w..l.enc1_w + h * INPUT_DIM]);
    Ok(g)
}

// ---------------------------------------------------------------------------
// checkpoints
//
// magic b"DCKP", version u32, config (num_seeds u64, knn u64, hidden u64,
// num_proposals u64, group_radius f64, num_classes u64, bn_momentum f64),
// frozen u8, n_params u64 + params f64, n_bn_layers u64, then per layer
// channels u64 + mean f64 * channels + var f64 * channels.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(state: &DetectorState) -> Vec<u8> {
    let c = &state.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.num_seeds, c.knn, c.hidden, c.num_proposals] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.group_radius.to_le_bytes());
    out.extend_from_slice(&(c.num_classes as u64).to_le_bytes());
    out.extend_from_slice(&c.bn_momentum.to_le_bytes());
    out.push(state.frozen as u8);
    out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for v in &state.params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(state.bn.layers.len() as u64).to_le_bytes());
    for layer in &state.bn.layers {
        out.extend_from_slice(&(layer.mean.len() as u64).to_le_bytes());
        for v in layer.mean.iter().chain(&layer.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<DetectorState> {
    let mut r = Reader::new(buf, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = DetectorConfig {
        num_seeds: r.u64()? as usize,
        knn: r.u64()? as usize,
        hidden: r.u64()? as usize,
        num_proposals: r.u64()? as usize,
        group_radius: r.f64()?,
        num_classes: r.u64()? as usize,
        bn_momentum: r.f64()?,
    };
    let frozen = r.u8()? != 0;
    let n = r.len(8)?;
    let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.len(8)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let ch = r.len(16)?;
        let mean = (0..ch).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let var = (0..ch).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(BnLayerStats { mean, var });
    }
    r.finish()?;
    DetectorState::from_parts(config, params, BnStats { layers }, frozen).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn save_checkpoint(path: &Path, state: &DetectorState) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf, path)
}

pub mod gradcheck;
