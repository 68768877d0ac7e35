use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
source_scenes = 8
target_scenes = 6
test_scenes = 3
runs = 1
ablations = false
detector.num_seeds = 16
detector.knn = 8
detector.hidden = 8
detector.num_proposals = 8
train.pretrain_epochs = 1
train.finetune_in_epochs = 1
train.finetune_cross_epochs = 1
train.dual_epochs = 1
train.baseline_epochs = 1
";

fn dacil(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacil"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .expect("spawn dacil")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn stage_by_stage_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let p = |s: &str| d.join(s).to_string_lossy().into_owned();
    let run = |args: &[&str]| ok(dacil(&cfg, args));

    run(&["--out-dir", &p("src"), "synth", "--domain", "source", "--labels", "base"]);
    run(&["--out-dir", &p("tgt"), "synth", "--domain", "target", "--labels", "novel"]);
    run(&["--out-dir", &p("test"), "synth", "--domain", "target", "--first", "100000", "--scenes", "3"]);
    run(&["--out-dir", &p("db_src"), "gtdb", "--input-dir", &p("src"), "--classes", "base"]);
    run(&["--out-dir", &p("db_tgt"), "gtdb", "--input-dir", &p("tgt"), "--classes", "novel"]);
    assert!(d.join("db_src/index.txt").exists());
    run(&["--out-dir", &p("in_src"), "augment", "--input-dir", &p("src"), "--gtdb", &p("db_src"), "--mode", "in-source"]);
    run(&["--out-dir", &p("cross"), "augment", "--input-dir", &p("tgt"), "--gtdb", &p("db_src"), "--mode", "cross"]);
    run(&["--out-dir", &p("in_tgt"), "augment", "--input-dir", &p("tgt"), "--gtdb", &p("db_tgt"), "--mode", "in-target"]);
    let sidecars = fs::read_dir(d.join("cross")).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".record.json")).count();
    assert_eq!(sidecars, 6);

    run(&["--out-dir", &p("pre"), "pretrain", "--scenes-dir", &p("src")]);
    let metrics = fs::read_to_string(d.join("pre/metrics_pretrain.csv")).unwrap();
    assert!(metrics.starts_with("epoch,L_sup,L_dis,L_con,L_total,lr\n"));
    assert_eq!(metrics.lines().count(), 2);

    run(&["--out-dir", &p("ft"), "finetune", "--checkpoint", &p("pre/model.ckpt"), "--in-source-dir", &p("in_src"), "--cross-dir", &p("cross")]);
    run(&["--out-dir", &p("bl"), "baseline", "--checkpoint", &p("ft/model.ckpt"), "--scenes-dir", &p("in_tgt")]);
    run(&["--out-dir", &p("dual"), "train", "--checkpoint", &p("ft/model.ckpt"), "--in-target-dir", &p("in_tgt"), "--cross-dir", &p("cross")]);
    assert!(d.join("dual/student.ckpt").exists() && d.join("dual/in_teacher.ckpt").exists());

    let text = run(&["--out-dir", &p("ev"), "eval", "--checkpoint", &p("dual/student.ckpt"), "--scenes-dir", &p("test"), "--name", "dacil"]);
    for key in ["map.base=", "map.novel=", "map.all=", "class_ap.chair="] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    run(&["--out-dir", &p("ev"), "eval", "--checkpoint", &p("bl/model.ckpt"), "--scenes-dir", &p("test"), "--name", "finetune", "--iou", "0.5"]);
    let summary = run(&["--out-dir", &p("ev"), "report"]);
    assert!(summary.contains("dacil,1,") && summary.contains("finetune,1,"));
    assert!(d.join("ev/summary.csv").exists());
}

#[test]
fn metrics_are_appended() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let p = |s: &str| d.join(s).to_string_lossy().into_owned();
    ok(dacil(&cfg, &["--out-dir", &p("src"), "synth", "--domain", "source"]));
    for _ in 0..2 {
        ok(dacil(&cfg, &["--out-dir", &p("pre"), "pretrain", "--scenes-dir", &p("src")]));
    }
    let metrics = fs::read_to_string(d.join("pre/metrics_pretrain.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let read = |dir: &str| {
        let mut files: Vec<_> = fs::read_dir(d.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    for (dir, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = d.join(dir).to_string_lossy().into_owned();
        ok(dacil(&cfg, &["--seed", seed, "--out-dir", &out, "synth", "--domain", "target", "--scenes", "2"]));
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn env_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let out = d.join("s").to_string_lossy().into_owned();
    let status = Command::new(env!("CARGO_BIN_EXE_dacil"))
        .env("DACIL_SOURCE_SCENES", "2")
        .args(["--config", &cfg.to_string_lossy(), "--out-dir", &out, "synth", "--domain", "source"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn exit_codes_are_stage_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let missing = d.join("missing").to_string_lossy().into_owned();
    let code = |out: Output| out.status.code().unwrap();

    assert_eq!(code(dacil(&cfg, &["no-such-command"])), 2);
    let bad = d.join("bad.cfg");
    fs::write(&bad, "no.such.key = 1\n").unwrap();
    assert_eq!(code(dacil(&bad, &["report"])), 3);
    fs::write(&bad, "train.ema_alpha = 2\n").unwrap();
    assert_eq!(code(dacil(&bad, &["report"])), 3);

    let out = dacil(&cfg, &["eval", "--checkpoint", &missing, "--scenes-dir", &missing]);
    assert_eq!(code(out.clone()), 17);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[eval]"));
    assert_eq!(code(dacil(&cfg, &["gtdb", "--input-dir", &missing])), 11);
    assert_eq!(code(dacil(&cfg, &["pretrain", "--scenes-dir", &missing])), 13);
    let empty = d.join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(dacil(&cfg, &["--out-dir", &missing, "report", "--input-dir", &empty.to_string_lossy()])), 19);
}

#[test]
fn grad_check_passes_and_fails_on_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let out = d.join("gc").to_string_lossy().into_owned();
    ok(dacil(&cfg, &["--out-dir", &out, "grad-check"]));
    let csv = fs::read_to_string(d.join("gc/gradcheck.csv")).unwrap();
    assert!(csv.starts_with("seed,tensor,len,max_rel_err,max_abs_grad"));
    assert_eq!(dacil(&cfg, &["--out-dir", &out, "grad-check", "--seeds", "1", "--tol", "1e-300"]).status.code(), Some(18));
}

#[test]
fn run_experiment_writes_report_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let out = d.join("exp").to_string_lossy().into_owned();
    let table = ok(dacil(&cfg, &["--seed", "3", "--out-dir", &out, "run-experiment"]));
    assert!(table.starts_with("method,group,mean_map"));
    for f in ["report.txt", "comparison.csv", "config.txt", "run-0/eval_dacil.txt", "run-0/eval_finetune.txt", "run-0/pr_dacil.csv", "run-0/dacil.ckpt"] {
        assert!(d.join("exp").join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(d.join("exp/report.txt")).unwrap();
    assert!(report.contains("run.0.seed=3"));
    let summary = ok(dacil(&cfg, &["--out-dir", &out, "report"]));
    assert!(summary.contains("dacil,1,") && summary.contains("base,1,"));
}
