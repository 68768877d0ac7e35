use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dacil::augment::Scene;
use dacil::detector::{gradcheck, load_checkpoint, save_checkpoint, DetectorConfig, DetectorState};
use dacil::eval::{detect, evaluate_with};
use dacil::gtdb::{build_database, GtDatabase};
use dacil::rng;
use dacil::trainer::{dual_teacher_train, finetune_baseline, finetune_sequential, pretrain_base, StageLog, TrainConfig, METRICS_HEADER};
use dacil::workbench::config;
use dacil::workbench::experiment::{paste_corpus, run_experiment, ExperimentConfig, PasteMode};
use dacil::workbench::io::{load_scenes, save_augmented, save_scenes};
use dacil::workbench::report::Summary;
use dacil::workbench::synth::{synth_domain, DomainSpec};
use dacil::Error;

mod exit;

#[derive(Parser, Debug)]
#[command(name = "dacil", version, about = "Class-incremental 3D detection under domain shift on synthetic point clouds")]
struct Cli {
    /// Master seed; overrides `seed` from the config file and environment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Labels {
    All,
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Cross,
    InSource,
    InTarget,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene corpus.
    Synth {
        #[arg(long, value_enum)]
        domain: Domain,
        /// Number of scenes; defaults to the configured corpus size.
        #[arg(long)]
        scenes: Option<usize>,
        /// Index of the first scene.
        #[arg(long, default_value_t = 0)]
        first: usize,
        /// Labels kept on the written scenes.
        #[arg(long, value_enum, default_value = "all")]
        labels: Labels,
    },
    /// Build a ground-truth object database from labelled scenes.
    Gtdb {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        classes: Labels,
        #[arg(long)]
        min_points: Option<usize>,
    },
    /// Copy-paste objects from a database into scenes.
    Augment {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        gtdb: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Train the base model on base-class labels.
    Pretrain {
        #[arg(long)]
        scenes_dir: PathBuf,
    },
    /// Fine-tune on in-domain pasted scenes, then on cross-domain scenes.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        in_source_dir: PathBuf,
        #[arg(long)]
        cross_dir: Option<PathBuf>,
    },
    /// Dual-teacher incremental training.
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        in_target_dir: PathBuf,
        #[arg(long)]
        cross_dir: Option<PathBuf>,
    },
    /// Plain fine-tuning on novel labels.
    Baseline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes_dir: PathBuf,
    },
    /// Evaluate a checkpoint on labelled scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes_dir: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// Report name, written as `eval_<name>.txt` and `pr_<name>.csv`.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Finite-difference check of the detector gradients.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check the configured detector on a synthetic source scene instead of
        /// a compact network on a random cloud.
        #[arg(long)]
        full: bool,
    },
    /// Average `eval_*.txt` files into a comparison table.
    Report {
        /// Directory to scan; defaults to the output directory.
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// Run the complete experiment.
    RunExperiment,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Gtdb { .. } => "gtdb",
            Command::Augment { .. } => "augment",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Train { .. } => "train",
            Command::Baseline { .. } => "baseline",
            Command::Eval { .. } => "eval",
            Command::GradCheck { .. } => "grad-check",
            Command::Report { .. } => "report",
            Command::RunExperiment => "run-experiment",
        }
    }
}

type Res<T> = std::result::Result<T, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error [config]: {e}");
            return ExitCode::from(exit::CONFIG);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Err(e) = cfg.validate() {
        eprintln!("error [config]: {e}");
        return ExitCode::from(exit::CONFIG);
    }
    let stage = cli.command.stage();
    match run(&cli.command, &cfg, &cli.out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error [{stage}]: {msg}");
            ExitCode::from(exit::code(stage))
        }
        Err(Failure::Error(e)) => {
            let tagged = e.stage().unwrap_or(stage);
            eprintln!("error [{tagged}]: {}", chain(&e));
            ExitCode::from(exit::for_error(&e, stage))
        }
    }
}

fn chain(e: &(dyn std::error::Error + 'static)) -> String {
    let mut s = e.to_string();
    let mut src = e.source();
    while let Some(inner) = src {
        let t = inner.to_string();
        if !s.contains(&t) {
            s.push_str(": ");
            s.push_str(&t);
        }
        src = inner.source();
    }
    s
}

enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cmd: &Command, cfg: &ExperimentConfig, out: &Path) -> std::result::Result<(), Failure> {
    let part = cfg.partition();
    let exec = cfg.train.execution;
    let keep = |labels: Labels| {
        let p = part.clone();
        move |c: u32| match labels {
            Labels::All => true,
            Labels::Base => p.is_base(c),
            Labels::Novel => p.is_novel(c),
        }
    };
    match cmd {
        Command::Synth { domain, scenes, first, labels } => {
            let (spec, n): (&DomainSpec, usize) = match domain {
                Domain::Source => (&cfg.source, scenes.unwrap_or(cfg.source_scenes)),
                Domain::Target => (&cfg.target, scenes.unwrap_or(cfg.target_scenes)),
            };
            let seed = rng::derive_seed(cfg.seed, &spec.id_prefix, 0);
            let keep = keep(*labels);
            let corpus: Vec<Scene> = synth_domain(spec, seed, *first, n, exec)?.iter().map(|s| s.with_labels(&keep)).collect();
            save_scenes(out, &corpus)?;
            println!("wrote {} scenes to {}", corpus.len(), out.display());
        }
        Command::Gtdb { input_dir, classes, min_points } => {
            let scenes = load_scenes(input_dir)?;
            let ids = match classes {
                Labels::All => part.all(),
                Labels::Base => part.base.clone(),
                Labels::Novel => part.novel.clone(),
            };
            let db = build_database(&scenes, &ids.into_iter().collect(), min_points.unwrap_or(cfg.gtdb_min_points))?;
            db.save(out)?;
            println!("wrote {} objects to {}", db.len(), out.display());
        }
        Command::Augment { input_dir, gtdb, mode } => {
            let scenes = load_scenes(input_dir)?;
            let db = GtDatabase::load(gtdb)?;
            let mode = match mode {
                Mode::Cross => PasteMode::Cross,
                Mode::InSource => PasteMode::InSource,
                Mode::InTarget => PasteMode::InTarget,
            };
            let items = paste_corpus(&scenes, &db, mode, &cfg.paste, cfg.seed, exec)?;
            save_augmented(out, &items)?;
            println!("wrote {} augmented scenes to {}", items.len(), out.display());
        }
        Command::Pretrain { scenes_dir } => {
            let scenes = labelled(scenes_dir, keep(Labels::Base))?;
            let res = pretrain_base(&scenes, &cfg.detector, &cfg.train)?;
            finish(out, &[("model", &res.state)], &res.logs)?;
        }
        Command::Finetune { checkpoint, in_source_dir, cross_dir } => {
            let init = load_checkpoint(checkpoint)?;
            let in_source = labelled(in_source_dir, keep(Labels::Base))?;
            let cross = match cross_dir {
                Some(d) => labelled(d, keep(Labels::Base))?,
                None => Vec::new(),
            };
            let train = TrainConfig {
                finetune_cross_epochs: if cross.is_empty() { 0 } else { cfg.train.finetune_cross_epochs },
                ..cfg.train.clone()
            };
            let res = finetune_sequential(&init, &in_source, &cross, &part, &train)?;
            finish(out, &[("model", &res.state)], &res.logs)?;
        }
        Command::Train { checkpoint, in_target_dir, cross_dir } => {
            let init = load_checkpoint(checkpoint)?;
            let in_target = labelled(in_target_dir, keep(Labels::Novel))?;
            let cross = match cross_dir {
                Some(d) => load_scenes(d)?,
                None => Vec::new(),
            };
            let res = dual_teacher_train(&init, &in_target, &cross, &part, &cfg.train)?;
            finish(out, &[("student", &res.student), ("in_teacher", &res.in_teacher)], std::slice::from_ref(&res.log))?;
        }
        Command::Baseline { checkpoint, scenes_dir } => {
            let init = load_checkpoint(checkpoint)?;
            let scenes = labelled(scenes_dir, keep(Labels::Novel))?;
            let res = finetune_baseline(&init, &scenes, &cfg.train)?;
            finish(out, &[("model", &res.state)], &res.logs)?;
        }
        Command::Eval { checkpoint, scenes_dir, iou, name } => {
            let state = load_checkpoint(checkpoint)?;
            let scenes = load_scenes(scenes_dir)?;
            let dets = detect(&state, &scenes, cfg.nms_iou, exec)?;
            let report = evaluate_with(exec, &dets, &scenes, &part, iou.unwrap_or(cfg.eval_iou))?;
            create_dir(out)?;
            write(&out.join(format!("eval_{name}.txt")), &report.to_text())?;
            write(&out.join(format!("pr_{name}.csv")), &report.pr_table())?;
            print!("{}", report.to_text());
        }
        Command::GradCheck { seeds, eps, tol, full } => grad_check(cfg, out, *seeds, *eps, *tol, *full)?,
        Command::Report { input_dir } => {
            let summary = Summary::collect(input_dir.as_deref().unwrap_or(out))?;
            if summary.methods.is_empty() {
                return Err(Failure::Check("no eval_*.txt files found".into()));
            }
            create_dir(out)?;
            let csv = summary.to_csv();
            write(&out.join("summary.csv"), &csv)?;
            print!("{csv}");
        }
        Command::RunExperiment => {
            let report = run_experiment(cfg)?;
            report.write(out)?;
            write(&out.join("config.txt"), &config::to_text(cfg))?;
            print!("{}", report.comparison_table());
        }
    }
    Ok(())
}

fn labelled(dir: &Path, keep: impl Fn(u32) -> bool) -> Res<Vec<Scene>> {
    Ok(load_scenes(dir)?.iter().map(|s| s.with_labels(&keep)).collect())
}

fn create_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append the epochs of `log` to `metrics_<stage>.csv`, writing the header
/// when the file is new.
fn append_metrics(dir: &Path, log: &StageLog) -> Res<()> {
    let path = dir.join(format!("metrics_{}.csv", log.stage));
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let csv = log.to_csv();
    let body = if fresh { csv.as_str() } else { csv.strip_prefix(METRICS_HEADER).unwrap_or(&csv).trim_start_matches('\n') };
    f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
}

fn finish(out: &Path, states: &[(&str, &DetectorState)], logs: &[StageLog]) -> Res<()> {
    create_dir(out)?;
    for (name, s) in states {
        let path = out.join(format!("{name}.ckpt"));
        save_checkpoint(&path, s)?;
        println!("wrote {}", path.display());
    }
    for log in logs {
        append_metrics(out, log)?;
        if let Some(last) = log.epochs.last() {
            println!("{}: {} epochs, final L_total {:.6}", log.stage, log.epochs.len(), last.loss.total);
        }
    }
    Ok(())
}

fn grad_check(cfg: &ExperimentConfig, out: &Path, seeds: u64, eps: f64, tol: f64, full: bool) -> std::result::Result<(), Failure> {
    if seeds == 0 || !(eps > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidConfig("seeds, eps and tol must be positive".into()).into());
    }
    let det = if full {
        cfg.detector.clone()
    } else {
        DetectorConfig {
            num_seeds: 16,
            knn: 8,
            hidden: 8,
            num_proposals: 8,
            group_radius: 0.4,
            ..cfg.detector.clone()
        }
    };
    let mut csv = String::from("seed,tensor,len,max_rel_err,max_abs_grad\n");
    let mut worst: f64 = 0.0;
    for i in 0..seeds {
        let seed = rng::derive_seed(cfg.seed, "grad-check", i);
        let state = DetectorState::new(det.clone(), seed)?;
        let cloud = if full {
            synth_domain(&cfg.source, seed, 0, 1, cfg.train.execution)?.remove(0).cloud
        } else {
            gradcheck::probe_cloud(64, seed)
        };
        let report = gradcheck::check(&state, &cloud, None, eps, seed)?;
        for t in &report.tensors {
            csv.push_str(&format!("{seed},{},{},{:e},{:e}\n", t.name, t.len, t.max_rel_err, t.max_abs_grad));
        }
        worst = worst.max(report.max_rel_err());
        println!("seed {seed}: max relative error {:e}", report.max_rel_err());
    }
    create_dir(out)?;
    write(&out.join("gradcheck.csv"), &csv)?;
    if worst >= tol {
        return Err(Failure::Check(format!("max relative error {worst:e} exceeds {tol:e}")));
    }
    Ok(())
}
