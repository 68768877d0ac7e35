//! End-to-end desk-scale experiment: synthetic corpora, ground-truth
//! databases, copy-paste corpora, the training stages and evaluation of
//! every method on held-out target scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{cross_domain_cp, in_domain_cp, PasteConfig, Scene, TransformRecord};
use crate::detector::{save_checkpoint, DetectorConfig, DetectorState};
use crate::error::{Error, Result};
use crate::eval::{detect, evaluate_with, ClassPartition, EvalReport};
use crate::gtdb::{build_database, GtDatabase};
use crate::par::{self, Execution};
use crate::rng;
use crate::trainer::{dual_teacher_train, finetune_baseline, finetune_sequential, pretrain_base, StageLog, TrainConfig};
use crate::workbench::synth::{synth_domain, DomainSpec};

/// Index of the first held-out target scene; keeps test ids disjoint from
/// training ids.
pub const TEST_SCENE_OFFSET: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub test_scenes: usize,
    pub gtdb_min_points: usize,
    pub eval_iou: f64,
    pub nms_iou: f64,
    pub ablations: bool,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub paste: PasteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (source, target) = DomainSpec::desk_pair();
        Self {
            seed: 0,
            runs: 3,
            source_scenes: 80,
            target_scenes: 60,
            test_scenes: 30,
            gtdb_min_points: 20,
            eval_iou: 0.25,
            nms_iou: 0.25,
            ablations: true,
            source,
            target,
            detector: DetectorConfig {
                num_seeds: 64,
                knn: 32,
                hidden: 32,
                num_proposals: 24,
                group_radius: 0.3,
                num_classes: 5,
                bn_momentum: 0.9,
            },
            train: TrainConfig {
                ema_alpha: 0.995,
                assignment_radius: 0.6,
                ..TrainConfig::default()
            },
            paste: PasteConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.source_scenes == 0 || self.target_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::InvalidConfig("runs and corpus sizes must be positive".into()));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.source.classes != self.target.classes || self.source.base != self.target.base || self.source.novel != self.target.novel {
            return Err(Error::InvalidConfig("source and target specs must share the class table".into()));
        }
        if self.detector.num_classes != self.source.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "detector has {} classes, domain {}",
                self.detector.num_classes,
                self.source.classes.len()
            )));
        }
        self.source.validate()?;
        self.target.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.paste.validate()
    }

    pub fn partition(&self) -> ClassPartition {
        self.source.partition()
    }

    /// Seed of run `r`; run 0 uses the master seed itself.
    pub fn run_seed(&self, run: usize) -> u64 {
        if run == 0 {
            self.seed
        } else {
            rng::derive_seed(self.seed, "run", run as u64)
        }
    }
}

/// Raw synthetic corpora of one run. Target training scenes keep all their
/// boxes; stages strip the labels they may not see.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn synth_corpora(cfg: &ExperimentConfig, seed: u64) -> Result<Corpora> {
    let exec = cfg.train.execution;
    let synth = |spec: &DomainSpec, first, n| synth_domain(spec, rng::derive_seed(seed, &spec.id_prefix, 0), first, n, exec);
    Ok(Corpora {
        source: synth(&cfg.source, 0, cfg.source_scenes)?,
        target: synth(&cfg.target, 0, cfg.target_scenes)?,
        test: synth(&cfg.target, TEST_SCENE_OFFSET, cfg.test_scenes)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasteMode {
    Cross,
    InSource,
    InTarget,
}

impl PasteMode {
    pub fn label(self) -> &'static str {
        match self {
            PasteMode::Cross => "cross",
            PasteMode::InSource => "in-source",
            PasteMode::InTarget => "in-target",
        }
    }
}

/// Copy-paste every scene with a per-scene stream keyed on the scene id.
pub fn paste_corpus(scenes: &[Scene], db: &GtDatabase, mode: PasteMode, cfg: &PasteConfig, seed: u64, exec: Execution) -> Result<Vec<(Scene, TransformRecord)>> {
    par::try_map(exec, scenes, |s| {
        let mut r = rng::stream(seed, &format!("paste/{}/{}", mode.label(), s.scene_id), 0);
        match mode {
            PasteMode::Cross => cross_domain_cp(s, db, cfg, &mut r),
            PasteMode::InSource | PasteMode::InTarget => in_domain_cp(s, db, cfg, &mut r),
        }
    })
}

fn scenes_only(v: Vec<(Scene, TransformRecord)>) -> Vec<Scene> {
    v.into_iter().map(|(s, _)| s).collect()
}

/// Training sets of one run, labelled as each stage sees them.
#[derive(Debug, Clone)]
pub struct TrainingSets {
    /// Source scenes, base labels.
    pub source: Vec<Scene>,
    /// Source scenes with pasted source objects.
    pub in_source: Vec<Scene>,
    /// Target scenes with pasted source objects, labelled with the pasted
    /// (base) boxes and the scene's own novel boxes.
    pub cross: Vec<Scene>,
    /// `cross` restricted to base labels.
    pub cross_base: Vec<Scene>,
    /// Target scenes, novel labels only.
    pub target_novel: Vec<Scene>,
    /// Target scenes with pasted novel objects; novel labels only.
    pub in_target: Vec<Scene>,
}

pub fn build_training_sets(corpora: &Corpora, cfg: &ExperimentConfig, seed: u64) -> Result<TrainingSets> {
    let part = cfg.partition();
    let exec = cfg.train.execution;
    let source: Vec<Scene> = corpora.source.iter().map(|s| s.with_labels(|c| part.is_base(c))).collect();
    let target_novel: Vec<Scene> = corpora.target.iter().map(|s| s.with_labels(|c| part.is_novel(c))).collect();
    let source_db = build_database(&source, &part.base.iter().copied().collect(), cfg.gtdb_min_points).map_err(|e| e.in_stage("gtdb"))?;
    let target_db = build_database(&target_novel, &part.novel.iter().copied().collect(), cfg.gtdb_min_points).map_err(|e| e.in_stage("gtdb"))?;
    let paste = |scenes: &[Scene], db: &GtDatabase, mode| paste_corpus(scenes, db, mode, &cfg.paste, seed, exec).map_err(|e| e.in_stage("augment"));
    let in_source = scenes_only(paste(&source, &source_db, PasteMode::InSource)?);
    let cross = scenes_only(paste(&target_novel, &source_db, PasteMode::Cross)?);
    let cross_base = cross.iter().map(|s| s.with_labels(|c| part.is_base(c))).collect();
    let in_target = scenes_only(paste(&target_novel, &target_db, PasteMode::InTarget)?);
    Ok(TrainingSets {
        source,
        in_source,
        cross,
        cross_base,
        target_novel,
        in_target,
    })
}

/// Methods compared in the report, in report order.
pub const METHODS: [&str; 5] = ["base", "finetune", "dacil", "no-cross-cp", "no-in-cp"];

/// Results of one seeded run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub reports: BTreeMap<&'static str, EvalReport>,
    pub logs: Vec<(String, StageLog)>,
    pub states: BTreeMap<&'static str, DetectorState>,
}

fn evaluate_state(state: &DetectorState, test: &[Scene], cfg: &ExperimentConfig) -> Result<EvalReport> {
    let exec = cfg.train.execution;
    let dets = detect(state, test, cfg.nms_iou, exec)?;
    evaluate_with(exec, &dets, test, &cfg.partition(), cfg.eval_iou)
}

pub fn run_once(cfg: &ExperimentConfig, run: usize) -> Result<RunResult> {
    let seed = cfg.run_seed(run);
    let part = cfg.partition();
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let corpora = synth_corpora(cfg, seed).map_err(|e| e.in_stage("synth"))?;
    let sets = build_training_sets(&corpora, cfg, seed)?;
    let mut logs = Vec::new();
    let mut states = BTreeMap::new();
    let mut keep = |method: &str, stage_logs: &[StageLog]| {
        for l in stage_logs {
            logs.push((method.to_string(), l.clone()));
        }
    };

    let pre = pretrain_base(&sets.source, &cfg.detector, &train).map_err(|e| e.in_stage("pretrain"))?;
    keep("base", &pre.logs);
    let ft = finetune_sequential(&pre.state, &sets.in_source, &sets.cross_base, &part, &train).map_err(|e| e.in_stage("finetune"))?;
    keep("base", &ft.logs);
    let baseline = finetune_baseline(&ft.state, &sets.in_target, &train).map_err(|e| e.in_stage("baseline"))?;
    keep("finetune", &baseline.logs);
    let dual = dual_teacher_train(&ft.state, &sets.in_target, &sets.cross, &part, &train).map_err(|e| e.in_stage("train"))?;
    keep("dacil", std::slice::from_ref(&dual.log));
    states.insert("base", ft.state.clone());
    states.insert("finetune", baseline.state);
    states.insert("dacil", dual.student);

    if cfg.ablations {
        // cross-domain pasting disabled: no cross-domain scenes at all
        let no_cross = TrainConfig {
            finetune_cross_epochs: 0,
            ..train.clone()
        };
        let ft_nc = finetune_sequential(&pre.state, &sets.in_source, &[], &part, &no_cross).map_err(|e| e.in_stage("finetune"))?;
        let nc = dual_teacher_train(&ft_nc.state, &sets.in_target, &[], &part, &no_cross).map_err(|e| e.in_stage("train"))?;
        keep("no-cross-cp", &ft_nc.logs);
        keep("no-cross-cp", std::slice::from_ref(&nc.log));
        states.insert("no-cross-cp", nc.student);
        // in-domain pasting disabled: raw source and raw target scenes
        let ft_ni = finetune_sequential(&pre.state, &sets.source, &sets.cross_base, &part, &train).map_err(|e| e.in_stage("finetune"))?;
        let ni = dual_teacher_train(&ft_ni.state, &sets.target_novel, &sets.cross, &part, &train).map_err(|e| e.in_stage("train"))?;
        keep("no-in-cp", &ft_ni.logs);
        keep("no-in-cp", std::slice::from_ref(&ni.log));
        states.insert("no-in-cp", ni.student);
    }

    let mut reports = BTreeMap::new();
    for m in METHODS {
        if let Some(s) = states.get(m) {
            reports.insert(m, evaluate_state(s, &corpora.test, cfg).map_err(|e| e.in_stage("eval"))?);
        }
    }
    Ok(RunResult { seed, reports, logs, states })
}

/// Seed-averaged mAP triple of one method.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapSummary {
    pub base: f64,
    pub novel: f64,
    pub all: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub means: BTreeMap<&'static str, MapSummary>,
}

impl ExperimentReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let mut means = BTreeMap::new();
        for m in METHODS {
            let rs: Vec<&EvalReport> = runs.iter().filter_map(|r| r.reports.get(m)).collect();
            if rs.is_empty() {
                continue;
            }
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            means.insert(
                m,
                MapSummary {
                    base: mean(&|r| r.map_base),
                    novel: mean(&|r| r.map_novel),
                    all: mean(&|r| r.map_all),
                },
            );
        }
        Self { runs, means }
    }

    pub fn mean(&self, method: &str) -> Option<MapSummary> {
        self.means.get(method).copied()
    }

    /// `key=value` summary: per-run and mean mAPs for every method.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs={}", self.runs.len());
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "run.{i}.seed={}", r.seed);
        }
        for m in METHODS {
            let Some(s) = self.means.get(m) else { continue };
            for (i, r) in self.runs.iter().enumerate() {
                let rep = &r.reports[m];
                for (k, v) in [("base", rep.map_base), ("novel", rep.map_novel), ("all", rep.map_all)] {
                    let _ = writeln!(out, "{m}.run.{i}.map.{k}={}", v);
                }
            }
            let _ = writeln!(out, "{m}.mean.map.base={}", s.base);
            let _ = writeln!(out, "{m}.mean.map.novel={}", s.novel);
            let _ = writeln!(out, "{m}.mean.map.all={}", s.all);
        }
        out
    }

    /// Comparison table, one row per method and class group.
    pub fn comparison_table(&self) -> String {
        let mut out = String::from("method,group,mean_map\n");
        for (m, s) in &self.means {
            for (g, v) in [("base", s.base), ("novel", s.novel), ("all", s.all)] {
                let _ = writeln!(out, "{m},{g},{v}");
            }
        }
        out
    }

    /// Write the summary, per-run eval reports, loss curves, PR tables and
    /// final checkpoints under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let w = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| Error::io(p, e));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        w(&dir.join("report.txt"), &self.to_text())?;
        w(&dir.join("comparison.csv"), &self.comparison_table())?;
        for (i, r) in self.runs.iter().enumerate() {
            let rd = dir.join(format!("run-{i}"));
            std::fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
            for (m, rep) in &r.reports {
                w(&rd.join(format!("eval_{m}.txt")), &rep.to_text())?;
                w(&rd.join(format!("pr_{m}.csv")), &rep.pr_table())?;
            }
            for (m, log) in &r.logs {
                w(&rd.join(format!("loss_{m}_{}.csv", log.stage)), &log.to_csv())?;
            }
            for (m, s) in &r.states {
                save_checkpoint(&rd.join(format!("{m}.ckpt")), s)?;
            }
        }
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let runs = (0..cfg.runs).map(|r| run_once(cfg, r)).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_runs(runs))
}
