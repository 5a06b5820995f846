use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scarcekit::config::{RunConfig, TtaMode};
use scarcekit::data::io::{read_mask, read_tabular};
use scarcekit::data::{Lesion, Task};
use scarcekit::ensemble::{Ensemble, MANIFEST_NAME};
use scarcekit::learners::Predictor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarcekit")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quick_grading() -> RunConfig {
    let mut cfg = RunConfig::new(Task::Grading);
    cfg.synth.n = 300;
    cfg.synth.labeled = 40;
    cfg.synth.dev = 80;
    cfg.synth.size = 32;
    cfg.train.lr = 1e-2;
    cfg.train.epochs = 10;
    cfg.ensemble.members = 2;
    cfg.companion.train_images = 6;
    cfg.companion.epochs = 3;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> String {
    let path = dir.join(name);
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_echoes_class_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&run(&["synth", "--task", "grading", "--n", "611", "--seed", "5", "--out", p(&a)]));
    assert_eq!(out.trim(), "counts 329 212 70");
    ok(&run(&["synth", "--task", "grading", "--n", "611", "--seed", "5", "--out", p(&b)]));
    for name in ["labeled.csv", "unlabeled.csv", "dev.csv", "companions/0.pgm"] {
        let name = if name.starts_with("companions") {
            let dev = read_tabular(&a.join("dev.csv"), Task::Grading).unwrap();
            format!("companions/{}.pgm", dev.samples()[0].id)
        } else {
            name.to_string()
        };
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
    let header = fs::read_to_string(a.join("dev.csv")).unwrap();
    assert!(header.starts_with("id,feat_0,feat_1,feat_2,feat_3,feat_4,feat_5,feat_6,feat_7,label\n"));
}

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--task", "grading", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "missing seed");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "task = \"grading\"\nseed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&bad), "--out", p(dir.path())]).status.code(), Some(2), "unknown key");
    assert_eq!(run(&["train", "--task", "grading", "--seed", "1"]).status.code(), Some(2), "no output dir");
    assert_eq!(run(&["rpl", "--task", "segmentation", "--seed", "1", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_grading();
    cfg.train.lr = 1e300;
    cfg.model.dropout = 0.0;
    let path = write_config(dir.path(), "c.toml", &cfg);
    let out = run(&["train", "--config", &path, "--seed", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grading_train_rpl_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = quick_grading();
    let path = write_config(dir.path(), "g.toml", &cfg);
    ok(&run(&["rpl", "--config", &path, "--seed", "2", "--out", p(&out)]));
    let audit = fs::read_to_string(out.join("audit.csv")).unwrap();
    let lines: Vec<&str> = audit.lines().collect();
    assert_eq!(lines[0], "round,class,bucket_size,selected,min_conf_selected");
    let rounds: std::collections::BTreeSet<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rounds.into_iter().collect::<Vec<_>>(), ["1", "2", "3", "4", "5"]);
    assert!(out.join("model").join(MANIFEST_NAME).exists());
    assert!(out.join("companion/np").join(MANIFEST_NAME).exists());

    let predicted = run(&["predict", "--config", &path, "--seed", "2", "--out", p(&out)]);
    ok(&predicted);
    let log = String::from_utf8_lossy(&predicted.stderr);
    assert!(log.contains("pipeline: ensemble(on) -> tta(flip) -> rounding -> post(on)"), "{log}");
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 81);

    let printed = ok(&run(&["evaluate", "--config", &path, "--seed", "2", "--out", p(&out)]));
    assert!(printed.starts_with("task,metric,class,value,seed,config_digest\n"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config_digest"], cfg.digest());
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), printed);
}

#[test]
fn predict_with_every_stage_off_gives_raw_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_grading();
    cfg.ensemble.enabled = false;
    cfg.tta.mode = Some(TtaMode::None);
    cfg.post.enabled = false;
    let path = write_config(dir.path(), "raw.toml", &cfg);
    ok(&run(&["synth", "--config", &path, "--seed", "4", "--out", p(&out)]));
    ok(&run(&["train", "--config", &path, "--seed", "4", "--out", p(&out)]));
    let log = run(&["predict", "--config", &path, "--seed", "4", "--out", p(&out)]);
    ok(&log);
    assert!(String::from_utf8_lossy(&log.stderr).contains("ensemble(off) -> tta(none) -> rounding -> post(off)"));
    let model = Ensemble::load(&out.join("model").join(MANIFEST_NAME)).unwrap();
    let dev = read_tabular(&out.join("dev.csv"), Task::Grading).unwrap();
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    for (line, s) in preds.lines().skip(1).zip(dev.samples()) {
        let mut fields = line.split(',');
        assert_eq!(fields.next().unwrap(), s.id.to_string());
        let grade: u8 = fields.next().unwrap().parse().unwrap();
        assert_eq!(grade, model.members()[0].predict(&s.features).unwrap().decision().value());
    }
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_grading();
    let synth_cfg = write_config(dir.path(), "q.toml", &cfg);
    ok(&run(&["synth", "--config", &synth_cfg, "--seed", "6", "--out", p(&out)]));
    let dev = read_tabular(&out.join("dev.csv"), Task::Grading).unwrap();
    let mut text = String::from("id,grade,score_0,score_1,score_2\n");
    for s in dev.samples() {
        let g = s.label.unwrap().index();
        let scores: Vec<String> = (0..3).map(|c| if c == g { "1".into() } else { "0".into() }).collect();
        text.push_str(&format!("{},{},{}\n", s.id, g, scores.join(",")));
    }
    fs::write(out.join("perfect.csv"), text).unwrap();
    cfg.data.train = Some(out.join("labeled.csv"));
    cfg.data.dev = Some(out.join("dev.csv"));
    cfg.data.predictions = Some(out.join("perfect.csv"));
    let path = write_config(dir.path(), "e.toml", &cfg);
    ok(&run(&["evaluate", "--config", &path, "--seed", "6", "--out", p(&out)]));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    for metric in ["qwk", "accuracy", "auc"] {
        let row = report.lines().find(|l| l.starts_with(&format!("grading,{metric},,"))).unwrap();
        assert_eq!(row.split(',').nth(3).unwrap(), "1", "{row}");
    }
}

#[test]
fn segmentation_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    ok(&run(&["synth", "--task", "segmentation", "--n", "10", "--seed", "1", "--out", p(&data)]));
    assert!(data.join("train/masks/0_irma.pgm").exists() || data.join("dev/masks/0_irma.pgm").exists());
    let mut cfg = RunConfig::new(Task::Segmentation);
    cfg.data.train = Some(data.join("train"));
    cfg.data.dev = Some(data.join("dev"));
    cfg.train.epochs = 3;
    cfg.train.lr = 0.2;
    cfg.ensemble.members = 2;
    cfg.augment.enabled = true;
    let path = write_config(dir.path(), "s.toml", &cfg);
    ok(&run(&["train", "--config", &path, "--seed", "1", "--out", p(&out)]));
    let log = run(&["predict", "--config", &path, "--seed", "1", "--out", p(&out)]);
    ok(&log);
    assert!(String::from_utf8_lossy(&log.stderr).contains("ensemble(on) -> tta(rotate) -> binarize@0.5 -> post(on)"));
    let dev = scarcekit::data::io::read_seg_dataset(&data.join("dev")).unwrap();
    assert_eq!(dev.len(), 2);
    for s in dev.samples() {
        let stem = out.join("predictions").join(s.id.to_string());
        for l in Lesion::ALL {
            assert!(scarcekit::data::io::mask_path(&stem, l).exists());
        }
        read_mask(&stem).unwrap();
    }
    let printed = ok(&run(&["evaluate", "--config", &path, "--seed", "1", "--out", p(&out)]));
    assert!(printed.contains("segmentation,mean_dsc,,"));
    assert!(printed.contains("segmentation,dsc,nv,"));
}

#[test]
fn segmentation_ablation_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Task::Segmentation);
    cfg.synth.size = 32;
    cfg.synth.seg_train = 6;
    cfg.synth.seg_dev = 3;
    cfg.train.epochs = 2;
    cfg.ensemble.members = 2;
    let path = write_config(dir.path(), "s.toml", &cfg);
    let csv = ok(&run(&["ablate", "--config", &path, "--seeds", "1,2", "--out", p(dir.path())]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "row,ensemble,tta,post,mean_dsc_mean,mean_dsc_std,mean_iou_mean,mean_iou_std,irma_dsc_mean,np_dsc_mean,nv_dsc_mean"
    );
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "+ensemble", "+TTA", "+post"]);
    assert_eq!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap(), csv);
}
