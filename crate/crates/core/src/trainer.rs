//! Training schedules: base pre-training, sequential fine-tuning, the
//! Fine-tune baseline and dual-teacher incremental training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::augment::Scene;
use crate::detector::{self, backward, forward, BnStats, DetectorConfig, DetectorState, Mode, Proposal, StatsOrigin};
use crate::error::{Error, Result};
use crate::eval::ClassPartition;
use crate::geometry::{box_iou, BoundingBox3D, SceneTransform};
use crate::losses::{self, LossWeights};
use crate::optim::{Adam, AdamConfig, StepSchedule};
use crate::par::{self, Execution};
use crate::rng;

/// Random scene-level augmentation: mirror over x, small rotation about z,
/// uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneAugConfig {
    pub flip_prob: f64,
    /// Radians; rotation is uniform in `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for SceneAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation: 5f64.to_radians(),
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

impl SceneAugConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.max_rotation.is_finite()
            && self.max_rotation >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid scene augmentation {self:?}")))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneTransform {
        let flip_x = rng.gen_bool(self.flip_prob);
        let rotation_z = if self.max_rotation > 0.0 {
            rng.gen_range(-self.max_rotation..=self.max_rotation)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        SceneTransform { flip_x, rotation_z, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_in_epochs: usize,
    pub finetune_cross_epochs: usize,
    pub dual_epochs: usize,
    pub baseline_epochs: usize,
    /// Scenes per step in the supervised stages.
    pub batch_size: usize,
    pub in_target_per_batch: usize,
    pub cross_per_batch: usize,
    pub lr: f64,
    /// Epochs (counted within each stage) at which the rate decays.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub ema_alpha: f64,
    pub pseudo_threshold: f64,
    pub assignment_radius: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub scene_aug: SceneAugConfig,
    /// Apply scene augmentation in the supervised stages too.
    pub augment_supervised: bool,
    /// Add teacher pseudo labels to cross-domain scenes for their unlabelled
    /// target-context objects.
    pub complete_cross_labels: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_in_epochs: 5,
            finetune_cross_epochs: 5,
            dual_epochs: 20,
            baseline_epochs: 20,
            batch_size: 4,
            in_target_per_batch: 3,
            cross_per_batch: 1,
            lr: 1e-3,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            ema_alpha: 0.999,
            pseudo_threshold: 0.9,
            assignment_radius: losses::DEFAULT_ASSIGNMENT_RADIUS,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            scene_aug: SceneAugConfig::default(),
            augment_supervised: true,
            complete_cross_labels: true,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.in_target_per_batch == 0 {
            return bad("in_target_per_batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha));
        }
        if !(self.pseudo_threshold >= 0.0 && self.pseudo_threshold <= 1.0) {
            return bad(format!("pseudo_threshold must lie in [0, 1], got {}", self.pseudo_threshold));
        }
        if !(self.assignment_radius > 0.0 && self.assignment_radius.is_finite()) {
            return bad(format!("assignment_radius must be positive, got {}", self.assignment_radius));
        }
        self.weights.validate()?;
        self.scene_aug.validate()
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base: self.lr,
            milestones: self.lr_milestones.clone(),
            factor: self.lr_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub dis: f64,
    pub con: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.sup += s * o.sup;
        self.dis += s * o.dis;
        self.con += s * o.con;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Per-epoch metrics of one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub epochs: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,L_sup,L_dis,L_con,L_total,lr";

impl StageLog {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            epochs: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            writeln!(s, "{},{:.8},{:.8},{:.8},{:.8},{:e}", e.epoch, e.loss.sup, e.loss.dis, e.loss.con, e.loss.total, e.lr).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: DetectorState,
    pub logs: Vec<StageLog>,
}

/// Average gradient, loss and batch statistics of one scene.
struct SceneResult {
    grad: Vec<f64>,
    loss: LossBreakdown,
    batch_stats: Option<BnStats>,
}

fn supervised_scene(state: &DetectorState, scene: &Scene, transform: &SceneTransform, cfg: &TrainConfig) -> Result<SceneResult> {
    let cloud = transform.apply_cloud(&scene.cloud);
    let labels: Vec<BoundingBox3D> = scene.boxes.iter().map(|b| transform.apply_box(b)).collect();
    let out = forward(state, &cloud, Mode::Train, None, None)?;
    let sup = losses::supervised_loss(&out.proposals, &labels, cfg.assignment_radius)?;
    let mut grads = detector::zero_grads(out.proposals.len(), state.config().num_classes);
    detector::accumulate_grads(&mut grads, &sup.grads, cfg.weights.sup);
    let grad = backward(state, &out.cache, &grads)?;
    Ok(SceneResult {
        grad,
        loss: LossBreakdown {
            sup: sup.value,
            dis: 0.0,
            con: 0.0,
            total: cfg.weights.sup * sup.value,
        },
        batch_stats: out.batch_stats,
    })
}

/// Mean of per-scene results, in batch order.
fn reduce(results: &[SceneResult], n_params: usize) -> (Vec<f64>, LossBreakdown) {
    let w = 1.0 / results.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut loss = LossBreakdown::default();
    for r in results {
        grad.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += w * b);
        loss.add_scaled(&r.loss, w);
    }
    (grad, loss)
}

fn check_corpus(scenes: &[Scene], stage: &str) -> Result<()> {
    if scenes.is_empty() {
        Err(Error::EmptyCorpus(stage.into()))
    } else {
        Ok(())
    }
}

/// Plain supervised training on `scenes` with their own labels.
pub fn train_supervised(state: &DetectorState, scenes: &[Scene], epochs: usize, stage: &str, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = state.copy_state();
    let mut log = StageLog::new(stage);
    if epochs == 0 {
        return Ok(TrainOutcome { state, logs: vec![log] });
    }
    check_corpus(scenes, stage)?;
    let mut opt = Adam::new(state.params().len(), cfg.adam);
    let schedule = cfg.schedule();
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("{stage}/shuffle"), epoch as u64));
        let mut epoch_loss = LossBreakdown::default();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let step_id = (epoch * batches.len() + step) as u64;
            let transforms: Vec<SceneTransform> = (0..batch.len())
                .map(|i| {
                    if cfg.augment_supervised {
                        cfg.scene_aug.draw(&mut rng::stream(cfg.seed, &format!("{stage}/aug/{step_id}"), i as u64))
                    } else {
                        SceneTransform::IDENTITY
                    }
                })
                .collect();
            let items: Vec<(usize, &SceneTransform)> = batch.iter().copied().zip(&transforms).collect();
            let snapshot = &state;
            let results = par::try_map(cfg.execution, &items, |(i, t)| supervised_scene(snapshot, &scenes[*i], t, cfg))?;
            let (grad, loss) = reduce(&results, state.params().len());
            state.apply_update(&opt.step(&grad, lr)?)?;
            for r in &results {
                if let Some(b) = &r.batch_stats {
                    state.absorb_batch_stats(b)?;
                }
            }
            epoch_loss.add_scaled(&loss, 1.0 / batches.len() as f64);
        }
        log.epochs.push(EpochMetrics {
            epoch,
            loss: epoch_loss,
            lr,
        });
    }
    Ok(TrainOutcome { state, logs: vec![log] })
}

/// Base training from a fresh detector on labelled source scenes.
pub fn pretrain_base(scenes: &[Scene], det_cfg: &DetectorConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_corpus(scenes, "pretrain")?;
    let init = DetectorState::new(det_cfg.clone(), rng::derive_seed(cfg.seed, "detector-init", 0))?;
    train_supervised(&init, scenes, cfg.pretrain_epochs, "pretrain", cfg)
}

/// Fine-tune on in-domain augmented source scenes, then on cross-domain
/// scenes.
pub fn finetune_sequential(state: &DetectorState, in_source: &[Scene], cross: &[Scene], classes: &ClassPartition, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let first = train_supervised(state, in_source, cfg.finetune_in_epochs, "finetune-in-source", cfg)?;
    let completed;
    let cross = if cfg.complete_cross_labels && cfg.finetune_cross_epochs > 0 {
        let teacher = first.state.freeze();
        completed = par::try_map(cfg.execution, cross, |s| complete_labels(&teacher, s, classes, cfg.pseudo_threshold))?;
        &completed[..]
    } else {
        cross
    };
    let second = train_supervised(&first.state, cross, cfg.finetune_cross_epochs, "finetune-cross", cfg)?;
    Ok(TrainOutcome {
        state: second.state,
        logs: first.logs.into_iter().chain(second.logs).collect(),
    })
}

/// Fine-tune baseline: novel-class supervision only, no teachers.
pub fn finetune_baseline(state: &DetectorState, target_scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_supervised(state, target_scenes, cfg.baseline_epochs, "baseline", cfg)
}

/// Blend `student` into `teacher`: `teacher + alpha * (teacher - student)`
/// rewritten as `student + alpha * (teacher - student)`, which leaves a
/// teacher equal to its student untouched. Covers parameters and BN
/// running statistics.
pub fn ema_update(teacher: &DetectorState, student: &DetectorState, alpha: f64) -> Result<DetectorState> {
    if teacher.config() != student.config() {
        return Err(Error::Shape("EMA between detectors of different configuration".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA decay must lie in [0, 1], got {alpha}")));
    }
    let mut out = teacher.clone();
    let (params, bn) = out.parts_mut()?;
    let blend = |t: &mut f64, s: f64| *t = s + alpha * (*t - s);
    params.iter_mut().zip(student.params()).for_each(|(t, s)| blend(t, *s));
    bn.values_mut().zip(student.bn_stats().values()).for_each(|(t, s)| blend(t, *s));
    Ok(out)
}

/// Confident base-class boxes from the cross-domain teacher.
pub fn generate_pseudo_labels(cross_teacher: &DetectorState, scene: &Scene, classes: &ClassPartition, threshold: f64) -> Result<Vec<BoundingBox3D>> {
    let out = forward(cross_teacher, &scene.cloud, Mode::Eval, None, None)?;
    Ok(pseudo_from_proposals(&out.proposals, classes, threshold))
}

fn pseudo_from_proposals(proposals: &[Proposal], classes: &ClassPartition, threshold: f64) -> Vec<BoundingBox3D> {
    proposals
        .iter()
        .filter(|p| p.objectness >= threshold)
        .filter_map(|p| {
            let best = classes
                .base
                .iter()
                .copied()
                .filter(|&c| (c as usize) < p.class_probs.len())
                .fold(None, |acc: Option<u32>, c| match acc {
                    Some(b) if p.class_probs[b as usize] >= p.class_probs[c as usize] => Some(b),
                    _ => Some(c),
                })?;
            Some(BoundingBox3D::axis_aligned(p.center, p.size, best))
        })
        .collect()
}

/// Pseudo labels of `teacher` that do not touch any box in `gt`.
pub fn non_colliding_pseudo_labels(teacher: &DetectorState, scene: &Scene, gt: &[BoundingBox3D], classes: &ClassPartition, threshold: f64) -> Result<Vec<BoundingBox3D>> {
    let mut pseudo = generate_pseudo_labels(teacher, scene, classes, threshold)?;
    pseudo.retain(|p| gt.iter().all(|g| box_iou(p, g) == 0.0));
    Ok(pseudo)
}

/// `scene` with non-colliding pseudo labels appended to its own boxes.
pub fn complete_labels(teacher: &DetectorState, scene: &Scene, classes: &ClassPartition, threshold: f64) -> Result<Scene> {
    let extra = non_colliding_pseudo_labels(teacher, scene, &scene.boxes, classes, threshold)?;
    let mut out = scene.clone();
    out.boxes.extend(extra);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    Pseudo,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedLabels {
    pub boxes: Vec<BoundingBox3D>,
    pub provenance: Vec<LabelSource>,
}

/// Transformed student input plus pseudo and ground-truth labels mapped
/// through the same transform.
pub fn make_mixed_labels(pseudo: &[BoundingBox3D], novel_gt: &[BoundingBox3D], scene: &Scene, transform: &SceneTransform) -> (Scene, MixedLabels) {
    let boxes: Vec<BoundingBox3D> = pseudo.iter().chain(novel_gt).map(|b| transform.apply_box(b)).collect();
    let provenance = std::iter::repeat_n(LabelSource::Pseudo, pseudo.len())
        .chain(std::iter::repeat_n(LabelSource::GroundTruth, novel_gt.len()))
        .collect();
    let input = Scene {
        cloud: transform.apply_cloud(&scene.cloud),
        boxes: boxes.clone(),
        domain_tag: scene.domain_tag,
        scene_id: scene.scene_id.clone(),
    };
    (input, MixedLabels { boxes, provenance })
}

/// Map a proposal computed on an untransformed cloud into the transformed
/// frame.
fn transform_proposal(p: &Proposal, t: &SceneTransform) -> Proposal {
    Proposal {
        center: t.apply_point(&p.center),
        anchor: t.apply_point(&p.anchor),
        size: p.size.map(|s| s * t.scale),
        ..p.clone()
    }
}

/// One dual-teacher batch: in-domain target scenes (novel labels only) and
/// cross-domain scenes (base labels).
#[derive(Debug, Clone, Copy)]
pub struct DualBatch<'a> {
    pub in_target: &'a [Scene],
    pub cross: &'a [Scene],
}

/// What one dual-teacher step saw, per in-target scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStepReport {
    pub loss: LossBreakdown,
    pub transforms: Vec<SceneTransform>,
    pub pseudo_labels: Vec<Vec<BoundingBox3D>>,
    pub supervised_labels: Vec<MixedLabels>,
    /// Normalization source of every student and cross-teacher forward.
    pub stats_origins: Vec<StatsOrigin>,
}

/// Models of the dual-teacher stage. The cross-domain teacher is frozen.
#[derive(Debug, Clone)]
pub struct DualModels {
    pub student: DetectorState,
    pub in_teacher: DetectorState,
    pub cross_teacher: DetectorState,
    pub optimizer: Adam,
}

impl DualModels {
    /// Student and in-domain teacher start as copies of `init`; the
    /// cross-domain teacher is a frozen copy of it.
    pub fn new(init: &DetectorState, cfg: &TrainConfig) -> Self {
        Self {
            student: init.copy_state(),
            in_teacher: init.copy_state(),
            cross_teacher: init.freeze(),
            optimizer: Adam::new(init.params().len(), cfg.adam),
        }
    }
}

struct DualSceneResult {
    inner: SceneResult,
    transform: SceneTransform,
    pseudo: Vec<BoundingBox3D>,
    labels: Option<MixedLabels>,
    origins: [StatsOrigin; 2],
}

fn dual_scene(models: &DualModels, scene: &Scene, is_cross: bool, rng_seed: u64, classes: &ClassPartition, cfg: &TrainConfig) -> Result<DualSceneResult> {
    let shared = models.in_teacher.bn_stats();
    let w = &cfg.weights;
    let transform = cfg.scene_aug.draw(&mut rng::Rng::seed_from_u64(rng_seed));
    let (input, labels, pseudo) = if is_cross {
        let extra = if cfg.complete_cross_labels {
            non_colliding_pseudo_labels(&models.cross_teacher, scene, &scene.boxes, classes, cfg.pseudo_threshold)?
        } else {
            Vec::new()
        };
        let input = Scene {
            cloud: transform.apply_cloud(&scene.cloud),
            boxes: scene.boxes.iter().chain(&extra).map(|b| transform.apply_box(b)).collect(),
            ..scene.clone()
        };
        (input, None, Vec::new())
    } else {
        let novel: Vec<BoundingBox3D> = scene.boxes.iter().copied().filter(|b| classes.is_novel(b.class_id)).collect();
        let pseudo = non_colliding_pseudo_labels(&models.cross_teacher, scene, &novel, classes, cfg.pseudo_threshold)?;
        let (input, mixed) = make_mixed_labels(&pseudo, &novel, scene, &transform);
        (input, Some(mixed), pseudo)
    };

    let student = forward(&models.student, &input.cloud, Mode::Train, None, Some(shared))?;
    let cross = forward(&models.cross_teacher, &input.cloud, Mode::Eval, Some(&student.trace), Some(shared))?;

    let sup = losses::supervised_loss(&student.proposals, &input.boxes, cfg.assignment_radius)?;
    let base: Vec<usize> = classes.base.iter().map(|&c| c as usize).collect();
    let dis = losses::distillation_loss(&student.proposals, &cross.proposals, &base)?;
    let mut grads = detector::zero_grads(student.proposals.len(), models.student.config().num_classes);
    detector::accumulate_grads(&mut grads, &sup.grads, w.sup);
    detector::accumulate_grads(&mut grads, &dis.grads, w.dis);
    let mut con_value = 0.0;
    if !is_cross && w.con > 0.0 {
        let teacher = forward(&models.in_teacher, &scene.cloud, Mode::Eval, None, None)?;
        let mapped: Vec<Proposal> = teacher.proposals.iter().map(|p| transform_proposal(p, &transform)).collect();
        let con = losses::consistency_loss(&student.proposals, &mapped, w)?;
        detector::accumulate_grads(&mut grads, &con.grads, w.con);
        con_value = con.value;
    }
    let grad = backward(&models.student, &student.cache, &grads)?;
    Ok(DualSceneResult {
        inner: SceneResult {
            grad,
            loss: LossBreakdown {
                sup: sup.value,
                dis: dis.value,
                con: con_value,
                total: losses::total_loss(sup.value, dis.value, con_value, w),
            },
            batch_stats: None,
        },
        transform,
        pseudo,
        labels,
        origins: [student.cache.stats_origin(), cross.cache.stats_origin()],
    })
}

/// One optimizer step on the student followed by the EMA update of the
/// in-domain teacher. `step_seed` drives the scene augmentation.
pub fn dual_teacher_step(
    models: &mut DualModels,
    batch: DualBatch<'_>,
    classes: &ClassPartition,
    lr: f64,
    step_seed: u64,
    cfg: &TrainConfig,
) -> Result<DualStepReport> {
    if batch.in_target.is_empty() && batch.cross.is_empty() {
        return Err(Error::Batch("empty dual-teacher batch".into()));
    }
    if batch.in_target.len() > cfg.in_target_per_batch || batch.cross.len() > cfg.cross_per_batch {
        return Err(Error::Batch(format!(
            "batch has {} in-target and {} cross scenes, limit is {} and {}",
            batch.in_target.len(),
            batch.cross.len(),
            cfg.in_target_per_batch,
            cfg.cross_per_batch
        )));
    }
    if !models.cross_teacher.is_frozen() {
        return Err(Error::Batch("cross-domain teacher must be frozen".into()));
    }
    let items: Vec<(&Scene, bool)> = batch
        .in_target
        .iter()
        .map(|s| (s, false))
        .chain(batch.cross.iter().map(|s| (s, true)))
        .collect();
    let seeds: Vec<u64> = (0..items.len()).map(|i| rng::derive_seed(step_seed, "dual-aug", i as u64)).collect();
    let snapshot = &*models;
    let idx: Vec<usize> = (0..items.len()).collect();
    let results = par::try_map(cfg.execution, &idx, |&i| dual_scene(snapshot, items[i].0, items[i].1, seeds[i], classes, cfg))?;
    let inner: Vec<SceneResult> = results
        .iter()
        .map(|r| SceneResult {
            grad: r.inner.grad.clone(),
            loss: r.inner.loss,
            batch_stats: None,
        })
        .collect();
    let (grad, loss) = reduce(&inner, models.student.params().len());
    let delta = models.optimizer.step(&grad, lr)?;
    models.student.apply_update(&delta)?;
    models.in_teacher = ema_update(&models.in_teacher, &models.student, cfg.ema_alpha)?;
    let mut report = DualStepReport {
        loss,
        transforms: Vec::new(),
        pseudo_labels: Vec::new(),
        supervised_labels: Vec::new(),
        stats_origins: Vec::new(),
    };
    for r in results {
        report.stats_origins.extend(r.origins);
        if let Some(l) = r.labels {
            report.transforms.push(r.transform);
            report.pseudo_labels.push(r.pseudo);
            report.supervised_labels.push(l);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DualOutcome {
    pub student: DetectorState,
    pub in_teacher: DetectorState,
    pub log: StageLog,
}

/// Dual-teacher incremental training. Each step takes the next
/// `in_target_per_batch` in-target scenes of a per-epoch shuffle plus
/// `cross_per_batch` cross scenes drawn cyclically from their own shuffle.
pub fn dual_teacher_train(init: &DetectorState, in_target: &[Scene], cross: &[Scene], classes: &ClassPartition, cfg: &TrainConfig) -> Result<DualOutcome> {
    cfg.validate()?;
    classes.validate()?;
    let mut models = DualModels::new(init, cfg);
    let mut log = StageLog::new("dual-teacher");
    if cfg.dual_epochs == 0 {
        return Ok(DualOutcome {
            student: models.student,
            in_teacher: models.in_teacher,
            log,
        });
    }
    check_corpus(in_target, "dual-teacher")?;
    let cross_per_batch = if cross.is_empty() { 0 } else { cfg.cross_per_batch };
    let schedule = cfg.schedule();
    let mut cross_cursor = 0usize;
    let mut cross_order: Vec<usize> = (0..cross.len()).collect();
    let mut cross_round = 0u64;
    for epoch in 0..cfg.dual_epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..in_target.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "dual/shuffle", epoch as u64));
        let chunks: Vec<&[usize]> = order.chunks(cfg.in_target_per_batch).collect();
        let mut epoch_loss = LossBreakdown::default();
        for (step, chunk) in chunks.iter().enumerate() {
            let step_id = (epoch * chunks.len() + step) as u64;
            let it: Vec<Scene> = chunk.iter().map(|&i| in_target[i].clone()).collect();
            let mut cs = Vec::with_capacity(cross_per_batch);
            for _ in 0..cross_per_batch {
                if cross_cursor == 0 {
                    cross_order.shuffle(&mut rng::stream(cfg.seed, "dual/cross-shuffle", cross_round));
                    cross_round += 1;
                }
                cs.push(cross[cross_order[cross_cursor]].clone());
                cross_cursor = (cross_cursor + 1) % cross.len();
            }
            let report = dual_teacher_step(
                &mut models,
                DualBatch { in_target: &it, cross: &cs },
                classes,
                lr,
                rng::derive_seed(cfg.seed, "dual/step", step_id),
                cfg,
            )?;
            epoch_loss.add_scaled(&report.loss, 1.0 / chunks.len() as f64);
        }
        log.epochs.push(EpochMetrics {
            epoch,
            loss: epoch_loss,
            lr,
        });
    }
    Ok(DualOutcome {
        student: models.student,
        in_teacher: models.in_teacher,
        log,
    })
}
