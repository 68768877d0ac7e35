//! `key=value` configuration files with environment-variable overrides.
//!
//! Every key in [`KEYS`] can be set in a file (one `key = value` per line,
//! `#` starts a comment) or through the environment as
//! `DACIL_<KEY>` with dots and dashes replaced by underscores and letters
//! upper-cased, e.g. `train.weights.sup` becomes `DACIL_TRAIN_WEIGHTS_SUP`.
//! Environment values win over file values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::workbench::experiment::ExperimentConfig;

pub const ENV_PREFIX: &str = "DACIL_";

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn format(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn format(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(usize, u64, f64);

impl Value for bool {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl Value for Execution {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "parallel" => Some(Execution::Parallel),
            "sequential" => Some(Execution::Sequential),
            _ => None,
        }
    }
    fn format(&self) -> String {
        match self {
            Execution::Parallel => "parallel".into(),
            Execution::Sequential => "sequential".into(),
        }
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(T::parse).collect()
    }
    fn format(&self) -> String {
        self.iter().map(Value::format).collect::<Vec<_>>().join(",")
    }
}

impl Value for (f64, f64) {
    fn parse(s: &str) -> Option<Self> {
        match Vec::<f64>::parse(s)?.as_slice() {
            [a, b] => Some((*a, *b)),
            _ => None,
        }
    }
    fn format(&self) -> String {
        format!("{},{}", self.0, self.1)
    }
}

impl Value for [f64; 2] {
    fn parse(s: &str) -> Option<Self> {
        <(f64, f64)>::parse(s).map(|(a, b)| [a, b])
    }
    fn format(&self) -> String {
        format!("{},{}", self[0], self[1])
    }
}

fn parse_as<T: Value>(key: &str, value: &str) -> Result<T> {
    T::parse(value.trim()).ok_or_else(|| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $t:ty),* $(,)?) => {
        /// Every recognised configuration key.
        pub const KEYS: &[&str] = &[$($key),*];

        /// Set one key from its textual value.
        pub fn set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => cfg.$($field).+ = parse_as::<$t>(key, value)?,)*
                _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
            }
            Ok(())
        }

        /// Every key with its current value, in [`KEYS`] order.
        pub fn entries(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, Value::format(&cfg.$($field).+))),*]
        }
    };
}

config_keys! {
    "seed" => seed: u64,
    "runs" => runs: usize,
    "source_scenes" => source_scenes: usize,
    "target_scenes" => target_scenes: usize,
    "test_scenes" => test_scenes: usize,
    "gtdb_min_points" => gtdb_min_points: usize,
    "eval_iou" => eval_iou: f64,
    "nms_iou" => nms_iou: f64,
    "ablations" => ablations: bool,

    "detector.num_seeds" => detector.num_seeds: usize,
    "detector.knn" => detector.knn: usize,
    "detector.hidden" => detector.hidden: usize,
    "detector.num_proposals" => detector.num_proposals: usize,
    "detector.group_radius" => detector.group_radius: f64,
    "detector.bn_momentum" => detector.bn_momentum: f64,

    "train.pretrain_epochs" => train.pretrain_epochs: usize,
    "train.finetune_in_epochs" => train.finetune_in_epochs: usize,
    "train.finetune_cross_epochs" => train.finetune_cross_epochs: usize,
    "train.dual_epochs" => train.dual_epochs: usize,
    "train.baseline_epochs" => train.baseline_epochs: usize,
    "train.batch_size" => train.batch_size: usize,
    "train.in_target_per_batch" => train.in_target_per_batch: usize,
    "train.cross_per_batch" => train.cross_per_batch: usize,
    "train.lr" => train.lr: f64,
    "train.lr_milestones" => train.lr_milestones: Vec<usize>,
    "train.lr_decay" => train.lr_decay: f64,
    "train.ema_alpha" => train.ema_alpha: f64,
    "train.pseudo_threshold" => train.pseudo_threshold: f64,
    "train.assignment_radius" => train.assignment_radius: f64,
    "train.weights.sup" => train.weights.sup: f64,
    "train.weights.dis" => train.weights.dis: f64,
    "train.weights.con" => train.weights.con: f64,
    "train.weights.class" => train.weights.class: f64,
    "train.weights.size" => train.weights.size: f64,
    "train.adam.beta1" => train.adam.beta1: f64,
    "train.adam.beta2" => train.adam.beta2: f64,
    "train.adam.eps" => train.adam.eps: f64,
    "train.scene_aug.flip_prob" => train.scene_aug.flip_prob: f64,
    "train.scene_aug.max_rotation" => train.scene_aug.max_rotation: f64,
    "train.scene_aug.scale_min" => train.scene_aug.scale_min: f64,
    "train.scene_aug.scale_max" => train.scene_aug.scale_max: f64,
    "train.augment_supervised" => train.augment_supervised: bool,
    "train.complete_cross_labels" => train.complete_cross_labels: bool,
    "train.execution" => train.execution: Execution,

    "paste.n_objects_min" => paste.n_objects_min: usize,
    "paste.n_objects_max" => paste.n_objects_max: usize,
    "paste.scale_range" => paste.scale_range: (f64, f64),
    "paste.rot_range" => paste.rot_range: f64,
    "paste.max_rejections" => paste.max_rejections: usize,
    "paste.remove_occluded" => paste.remove_occluded: bool,

    "source.size_multiplier" => source.size_multiplier: Vec<f64>,
    "source.floor_extent" => source.floor_extent: [f64; 2],
    "source.floor_points" => source.floor_points: usize,
    "source.clutter_points" => source.clutter_points: usize,
    "source.clutter_blobs" => source.clutter_blobs: usize,
    "source.context_density" => source.context_density: f64,
    "source.objects_min" => source.objects_min: usize,
    "source.objects_max" => source.objects_max: usize,
    "source.min_gap" => source.min_gap: f64,
    "source.noise" => source.noise: f64,
    "source.max_attempts" => source.max_attempts: usize,

    "target.size_multiplier" => target.size_multiplier: Vec<f64>,
    "target.floor_extent" => target.floor_extent: [f64; 2],
    "target.floor_points" => target.floor_points: usize,
    "target.clutter_points" => target.clutter_points: usize,
    "target.clutter_blobs" => target.clutter_blobs: usize,
    "target.context_density" => target.context_density: f64,
    "target.objects_min" => target.objects_min: usize,
    "target.objects_max" => target.objects_max: usize,
    "target.min_gap" => target.min_gap: f64,
    "target.noise" => target.noise: f64,
    "target.max_attempts" => target.max_attempts: usize,
}

/// Environment variable that overrides `key`.
pub fn env_var(key: &str) -> String {
    let mut s = String::from(ENV_PREFIX);
    s.extend(key.chars().map(|c| if c == '.' || c == '-' { '_' } else { c.to_ascii_uppercase() }));
    s
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got `{raw}`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn apply_text(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    for (k, v) in parse_lines(text)? {
        set(cfg, &k, &v)?;
    }
    Ok(())
}

/// Apply every `DACIL_*` variable found through `lookup`.
pub fn apply_env(cfg: &mut ExperimentConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
    for key in KEYS {
        if let Some(v) = lookup(&env_var(key)) {
            set(cfg, key, &v)?;
        }
    }
    Ok(())
}

/// Defaults, then the optional file, then the process environment.
pub fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        apply_text(&mut cfg, &text)?;
    }
    apply_env(&mut cfg, |k| std::env::var(k).ok())?;
    Ok(cfg)
}

/// The full configuration as `key=value` lines; feeding it back through
/// [`apply_text`] reproduces `cfg` for every configurable field.
pub fn to_text(cfg: &ExperimentConfig) -> String {
    entries(cfg).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
