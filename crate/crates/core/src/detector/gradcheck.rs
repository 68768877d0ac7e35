//! Central finite-difference check of [`backward`](super::backward), using
//! the five-point stencil (truncation error O(eps^4)).
//!
//! The scalar probed is a fixed random linear functional of every proposal
//! output (objectness, center, size, class probabilities). The numeric side
//! only ever runs forward passes. [`check`] replays the base pass's sampling
//! trace and activation pattern, so every index selection, ReLU gate and
//! max-pool winner stays fixed and the probed function is smooth.
//! [`check_free`] replays only the sampling trace; it agrees with the
//! analytic gradient when no kink lies within `2 * eps`.

use rand::Rng;

use super::{backward, forward, forward_with_routing, BnStats, DetectorState, Mode, Proposal, ProposalGrad, SamplingTrace};
use crate::error::Result;
use crate::geometry::{Point3, PointCloud};
use crate::rng;

/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `n` uniform points in `[-1, 1]^2 x [0, 1]`.
pub fn probe_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng::stream(seed, "cloud", 0);
    PointCloud::new(
        (0..n)
            .map(|_| Point3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.0..1.0)))
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct OutputWeights {
    objectness: Vec<f64>,
    center: Vec<[f64; 3]>,
    size: Vec<[f64; 3]>,
    class_probs: Vec<Vec<f64>>,
}

impl OutputWeights {
    pub fn random(m: usize, c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "gradcheck-weights", 0);
        let mut u = move || r.gen_range(-1.0..1.0);
        Self {
            objectness: (0..m).map(|_| u()).collect(),
            center: (0..m).map(|_| [u(), u(), u()]).collect(),
            size: (0..m).map(|_| [u(), u(), u()]).collect(),
            class_probs: (0..m).map(|_| (0..c).map(|_| u()).collect()).collect(),
        }
    }

    pub fn value(&self, props: &[Proposal]) -> f64 {
        let mut total = 0.0;
        for (i, p) in props.iter().enumerate() {
            total += self.objectness[i] * p.objectness;
            let c = p.center.to_array();
            for d in 0..3 {
                total += self.center[i][d] * c[d] + self.size[i][d] * p.size[d];
            }
            total += self.class_probs[i].iter().zip(&p.class_probs).map(|(w, q)| w * q).sum::<f64>();
        }
        total
    }

    /// Analytic upstream gradient of [`value`](Self::value).
    pub fn upstream(&self, props: &[Proposal]) -> Vec<ProposalGrad> {
        props
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = &self.class_probs[i];
                let mean: f64 = w.iter().zip(&p.class_probs).map(|(a, b)| a * b).sum();
                ProposalGrad {
                    objectness_logit: self.objectness[i] * p.objectness * (1.0 - p.objectness),
                    center: self.center[i],
                    size: self.size[i],
                    class_logits: p.class_probs.iter().zip(w).map(|(q, wc)| q * (wc - mean)).collect(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: &'static str,
    pub len: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare analytic and central-difference gradients for every parameter,
/// with the activation pattern of the base pass held fixed.
pub fn check(state: &DetectorState, cloud: &PointCloud, bn_source: Option<&BnStats>, eps: f64, seed: u64) -> Result<GradCheckReport> {
    run(state, cloud, bn_source, eps, seed, true)
}

/// Like [`check`] but only the sampling trace is replayed.
pub fn check_free(state: &DetectorState, cloud: &PointCloud, bn_source: Option<&BnStats>, eps: f64, seed: u64) -> Result<GradCheckReport> {
    run(state, cloud, bn_source, eps, seed, false)
}

fn run(state: &DetectorState, cloud: &PointCloud, bn_source: Option<&BnStats>, eps: f64, seed: u64, pin: bool) -> Result<GradCheckReport> {
    let base = forward(state, cloud, Mode::Train, None, bn_source)?;
    let weights = OutputWeights::random(base.proposals.len(), state.config().num_classes, seed);
    let analytic = backward(state, &base.cache, &weights.upstream(&base.proposals))?;
    let routing = base.cache.routing();
    let probe = |s: &DetectorState, trace: &SamplingTrace| -> Result<f64> {
        let out = if pin {
            forward_with_routing(s, cloud, Mode::Train, trace, routing, bn_source)?
        } else {
            forward(s, cloud, Mode::Train, Some(trace), bn_source)?
        };
        Ok(weights.value(&out.proposals))
    };
    let layout = state.layout();
    let original = state.params().to_vec();
    let mut work = state.copy_state();
    let mut tensors = Vec::new();
    for (name, off, len) in layout.tensors(state.config()) {
        let mut max_rel_err: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        for i in off..off + len {
            let mut at = |k: f64| -> Result<f64> {
                work.params[i] = original[i] + k * eps;
                probe(&work, &base.trace)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work.params[i] = original[i];
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            max_rel_err = max_rel_err.max(rel_err(analytic[i], numeric));
            max_abs_grad = max_abs_grad.max(analytic[i].abs());
        }
        tensors.push(TensorReport {
            name,
            len,
            max_rel_err,
            max_abs_grad,
        });
    }
    Ok(GradCheckReport { tensors })
}
