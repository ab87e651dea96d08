use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use csunet::core::Tensor;
use csunet::volume::{self, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

const EXTENT: usize = 16;

fn csunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csunet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn csunet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn synth(out: &Path, count: usize, seed: u64, glass: f64) -> Output {
    csunet(&[
        "synth",
        "--out",
        s(out),
        "--count",
        &count.to_string(),
        "--extent",
        &EXTENT.to_string(),
        "--seed",
        &seed.to_string(),
        "--ground-glass-fraction",
        &glass.to_string(),
    ])
}

/// One trained fit-all run shared by the tests that need a model.
struct Trained {
    _root: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let out = root.path().join("run");
        let o = csunet(&["synth", "--out", s(&data), "--count", "4", "--extent", "16", "--seed", "5", "--radius", "3"]);
        assert!(o.status.success());
        let cfg = root.path().join("cfg.json");
        std::fs::write(
            &cfg,
            r#"{"network":{"input_extent":16,"stage_channels":[4,8,16,32]},
                "train":{"max_epochs":30,"batch_size":2,"patience":30}}"#,
        )
        .unwrap();
        let o = csunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--fit-all"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Trained { _root: root, data, out }
    })
}

#[test]
fn synth_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert!(synth(&a, 3, 9, 0.5).status.success());
    assert!(synth(&b, 3, 9, 0.5).status.success());
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let c = root.path().join("c");
    assert!(synth(&c, 3, 10, 0.5).status.success());
    assert_ne!(
        std::fs::read(a.join("case0000.image.csuv")).unwrap(),
        std::fs::read(c.join("case0000.image.csuv")).unwrap()
    );
}

#[test]
fn synth_ground_glass_fraction() {
    let root = tempfile::tempdir().unwrap();
    let contrasts = |dir: &Path| -> Vec<f64> {
        let m = read_json(&dir.join("manifest.json"));
        m["samples"].as_array().unwrap().iter().map(|e| e["contrast"].as_f64().unwrap()).collect()
    };
    let all = root.path().join("all");
    assert!(synth(&all, 5, 1, 1.0).status.success());
    assert!(contrasts(&all).iter().all(|&c| c == 0.25));

    let none = root.path().join("none");
    assert!(synth(&none, 5, 1, 0.0).status.success());
    assert!(contrasts(&none).iter().all(|&c| c == 0.8));

    let half = root.path().join("half");
    assert!(synth(&half, 4, 1, 0.5).status.success());
    assert_eq!(contrasts(&half).iter().filter(|&&c| c == 0.25).count(), 2);
}

#[test]
fn usage_errors_exit_2_without_outputs() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert!(synth(&data, 2, 0, 0.0).status.success());

    let cases = [
        r#"{"network": {"input_extent": 16, "stage_channels": [4,8,16,32]}, "bogus": 1}"#,
        r#"{"network": {"input_extent": 16, "stage_channels": [4,8,16]}}"#,
        r#"{"network": {"input_extent": 16}, "train": {"batch_size": 0}}"#,
        r#"{"network": {"input_extent": 16}, "loss": {"class_count": 3}}"#,
        r#"{"network": {"input_extent": 32, "stage_channels": [4,8,16,32]}}"#,
        r#"{"network": "#,
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = root.path().join(format!("bad{i}.json"));
        std::fs::write(&cfg, text).unwrap();
        let out = root.path().join(format!("out{i}"));
        let o = csunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "case {i} wrote outputs");
    }

    assert_eq!(csunet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(csunet(&["synth", "--out", "x", "--count", "0"]).status.code(), Some(2));
    assert_eq!(
        csunet(&["eval", "--model", s(&root.path().join("missing.csuc")), "--data", s(&data)]).status.code(),
        Some(2)
    );
    let o = Command::new(env!("CARGO_BIN_EXE_csunet"))
        .args(["gradcheck", "--skip-network"])
        .env("CSUNET_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cross_validation_writes_report_and_fold_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert!(synth(&data, 4, 2, 0.0).status.success());
    let cfg = root.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"network":{"input_extent":16,"stage_channels":[2,4,4,8]},"train":{"max_epochs":2,"folds":2}}"#,
    )
    .unwrap();
    let out = root.path().join("run");
    let o = csunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "report.json", "fold0.csuc", "fold1.csuc", "fold0.history.json", "fold1.history.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = read_json(&out.join("report.json"));
    for key in ["folds", "mean", "std", "config"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    for f in folds {
        for key in ["fold", "sen", "dsc", "pre", "miou", "best_epoch", "epochs_run", "val_ids"] {
            assert!(f.get(key).is_some(), "fold row lacks {key}");
        }
    }
    let mut ids: Vec<_> = folds.iter().flat_map(|f| f["val_ids"].as_array().unwrap().clone()).collect();
    ids.sort_by_key(|v| v.as_str().unwrap().to_string());
    assert_eq!(ids.len(), 4);
    ids.dedup();
    assert_eq!(ids.len(), 4);
    for key in ["sen", "dsc", "pre", "miou"] {
        let vals: Vec<f64> = folds.iter().map(|f| f[key].as_f64().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / 2.0;
        assert!((report["mean"][key].as_f64().unwrap() - mean).abs() < 1e-12);
    }
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["train"]["folds"], 2);
    assert_eq!(resolved["loss"]["class_count"], 2);

    let single = root.path().join("single");
    let o = csunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&single), "--fold", "1"]);
    assert!(o.status.success());
    assert!(single.join("fold1.csuc").is_file());
    let o = csunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&single), "--fold", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reproduces_training_metrics() {
    let t = trained();
    let history = read_json(&t.out.join("model.history.json"));
    let best = history["best"]["dsc"].as_f64().unwrap();
    let report = t.out.join("eval.json");
    let o = csunet(&["eval", "--model", s(&t.out.join("model.csuc")), "--data", s(&t.data), "--report", s(&report)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("DSC"));
    let dsc = read_json(&report)["dsc"].as_f64().unwrap();
    assert!((dsc - best).abs() <= 1e-6, "eval {dsc} vs history {best}");
    assert!(best > 0.1, "training made no progress: {best}");
}

#[test]
fn predict_writes_mask_with_input_extents() {
    let t = trained();
    let out = t.out.join("pred.csuv");
    let o = csunet(&[
        "predict",
        "--model",
        s(&t.out.join("model.csuc")),
        "--input",
        s(&t.data.join("case0000.image.csuv")),
        "--output",
        s(&out),
    ]);
    assert!(o.status.success());
    let mask = volume::read_volume(&out).unwrap().into_u8().unwrap();
    assert_eq!(mask.shape(), &[1, EXTENT, EXTENT, EXTENT]);
    assert!(mask.data().iter().all(|&v| v <= 1));
    assert!(mask.data().iter().any(|&v| v == 1));
}

#[test]
fn noise_only_volume_is_mostly_background() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("noise.csuv");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let normal = Normal::new(0.0f32, 0.1).unwrap();
    let noise = Tensor::from_fn(vec![1, EXTENT, EXTENT, EXTENT], |_| normal.sample(&mut rng));
    volume::write_volume(&input, &Volume::F32(noise)).unwrap();
    let out = dir.path().join("pred.csuv");
    let o = csunet(&["predict", "--model", s(&t.out.join("model.csuc")), "--input", s(&input), "--output", s(&out)]);
    assert!(o.status.success());
    let mask = volume::read_volume(&out).unwrap().into_u8().unwrap();
    let fg = mask.data().iter().filter(|&&v| v == 1).count() as f64 / mask.len() as f64;
    assert!(fg < 0.05, "foreground fraction {fg}");
}

#[test]
fn gradcheck_detects_injected_fault() {
    let o = csunet(&["gradcheck", "--skip-network", "--inject-fault", "conv3d"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failed = text.lines().find(|l| l.starts_with("FAILED")).expect("failure summary");
    assert!(failed.contains("conv3d"));
    assert!(!failed.contains("relu"));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let o = csunet(&["gradcheck", "--skip-network", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let items = read_json(&report)["items"].as_array().unwrap().len();
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("PASS")).count(), items);
}
