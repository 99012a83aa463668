use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lacune::metrics::MetricsReport;
use lacune::nifti_io::read_mask;

fn lacune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lacune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lacune(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{ "shape": [96, 96, 40], "diameter_range": [3.0, 8.0], "n_lacunes": 3, "n_decoys_outside_region": 2 }"#;

fn phantoms(root: &Path, n: usize) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let out = root.join("phantoms");
    ok(&["gen-phantoms", "--n", &n.to_string(), "--spec", s(&spec), "--seed", "3", "--out", s(&out)]);
    out
}

fn report(dir: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn unknown_flag_and_subcommand_exit_two() {
    assert_eq!(lacune(&["predict", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lacune(&["bogus"]).status.code(), Some(2));
    assert_eq!(lacune(&["--version"]).status.code(), Some(0));
}

#[test]
fn workflow_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{ "shape": [96, 96, 32], "lacunes": 3 }"#).unwrap();
    let out = lacune(&["gen-phantoms", "--n", "1", "--spec", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let missing = lacune(&[
        "predict",
        "--case",
        s(tmp.path()),
        "--detector",
        "rule-based",
        "--segmenter",
        "rule-based",
        "--prevmask",
        s(&tmp.path().join("none.nii.gz")),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn evaluate_identical_dirs_gives_unit_dice() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = phantoms(tmp.path(), 2);
    let rep = tmp.path().join("report");
    ok(&["evaluate", "--pred", s(&ph), "--truth", s(&ph), "--out", s(&rep), "--jobs", "2"]);
    let r = report(&rep);
    assert_eq!(r.per_case.len(), 2);
    assert!(r.per_case.iter().all(|c| c.dice == 1.0));
    assert_eq!(r.lesionwise.fn_ + r.lesionwise.fp, 0);
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert!(csv.starts_with("case_id,metric,value"));
    assert!(rep.join("provenance.json").exists());
}

#[test]
fn full_rule_based_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = phantoms(tmp.path(), 3);
    assert!(ph.join("manifest.json").exists() && ph.join("provenance.json").exists());

    let prev = tmp.path().join("prevmap");
    let csf = ph.join("phantom_000/csf.nii.gz");
    ok(&["build-prevmap", "--masks", s(&ph), "--csf", s(&csf), "--out", s(&prev)]);
    let mask = prev.join("mask.nii.gz");
    assert!(read_mask(&mask).unwrap().any());

    let predict = |out: &Path, overlay: bool| {
        let mut args = vec![
            "predict", "--cases", s(&ph), "--detector", "rule-based", "--segmenter", "rule-based", "--prevmask",
            s(&mask), "--out", s(out), "--jobs", "2",
        ];
        let ov = out.join("overlay");
        if overlay {
            args.extend(["--overlay", s(&ov)]);
        }
        ok(&args);
    };
    let pred = tmp.path().join("pred");
    predict(&pred, true);
    assert!(fs::read_dir(pred.join("overlay")).unwrap().count() > 0);
    for i in 0..3 {
        let id = format!("phantom_{i:03}");
        let seg = read_mask(pred.join(format!("{id}_seg.nii.gz"))).unwrap();
        let unc = read_mask(pred.join(format!("{id}_unc.nii.gz"))).unwrap();
        assert!(!seg.intersection(&unc).unwrap().any());
        let decoys = read_mask(ph.join(&id).join("decoys.nii.gz")).unwrap();
        assert!(!seg.intersection(&decoys).unwrap().any(), "{id}: decoy kept");
        let prov: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(pred.join(format!("{id}_provenance.json"))).unwrap()).unwrap();
        let stages: Vec<&str> = prov["extra"]["pipeline"]["stages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|st| st["name"].as_str().unwrap())
            .collect();
        assert_eq!(stages, lacune::pipeline::STAGES);
    }

    let again = tmp.path().join("pred2");
    predict(&again, false);
    for i in 0..3 {
        for kind in ["seg", "unc"] {
            let f = format!("phantom_{i:03}_{kind}.nii.gz");
            assert_eq!(fs::read(pred.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap(), "{f} differs");
        }
    }

    let rep = tmp.path().join("report");
    let out = ok(&["evaluate", "--pred", s(&pred), "--truth", s(&ph), "--out", s(&rep)]);
    assert!(!out.stdout.is_empty());
    let r = report(&rep);
    assert_eq!(r.per_case.len(), 3);
    assert!(r.lesionwise.tp > 0);
    assert!(r.dice > 0.0);
}

#[test]
fn training_commands_produce_usable_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = phantoms(tmp.path(), 3);
    let region = ph.join("phantom_000/region.nii.gz");

    let det_cfg = tmp.path().join("det.json");
    fs::write(&det_cfg, r#"{ "epochs": 1, "hidden_channels": 4 }"#).unwrap();
    let det = tmp.path().join("det.ckpt");
    ok(&["train-detect", "--cases", s(&ph), "--config", s(&det_cfg), "--seed", "4", "--out", s(&det)]);
    assert!(det.exists() && Path::new(&format!("{}.meta.json", s(&det))).exists());
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{}.provenance.json", s(&det))).unwrap()).unwrap();
    assert_eq!(prov["seed"], 4);
    assert_eq!(prov["config"]["epochs"], 1);

    let seg_cfg = tmp.path().join("seg.json");
    fs::write(&seg_cfg, r#"{ "epochs": 2, "max_positives": 10, "threshold": "optimize" }"#).unwrap();
    let split = tmp.path().join("split.json");
    fs::write(&split, r#"{ "train": ["phantom_000", "phantom_001"], "validation": ["phantom_002"] }"#).unwrap();
    let seg = tmp.path().join("seg.ckpt");
    let train_seg = |out: &Path| {
        ok(&[
            "train-segment", "--cases", s(&ph), "--prevmask", s(&region), "--config", s(&seg_cfg), "--split", s(&split),
            "--out", s(out),
        ]);
    };
    train_seg(&seg);
    let seg2 = tmp.path().join("seg2.ckpt");
    train_seg(&seg2);
    assert_eq!(fs::read(&seg).unwrap(), fs::read(&seg2).unwrap(), "seeded training not reproducible");
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{}.provenance.json", s(&seg))).unwrap()).unwrap();
    assert!(prov["extra"]["threshold_search"]["threshold"].is_number());

    let pred = tmp.path().join("pred");
    ok(&[
        "predict", "--case", s(&ph.join("phantom_002")), "--detector", s(&det), "--segmenter", s(&seg), "--prevmask",
        s(&region), "--out", s(&pred),
    ]);
    assert!(pred.join("phantom_002_seg.nii.gz").exists());

    let without_val = lacune(&[
        "train-segment", "--cases", s(&ph), "--prevmask", s(&region), "--config", s(&seg_cfg), "--out",
        s(&tmp.path().join("x.ckpt")),
    ]);
    assert_eq!(without_val.status.code(), Some(1));
}
