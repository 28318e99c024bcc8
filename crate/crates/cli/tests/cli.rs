use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carshape"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Mesh database, shape space and two noiseless scenes under `root`.
fn pipeline_inputs(root: &Path) {
    let meshes = root.join("meshes");
    let space = root.join("space");
    let gt = root.join("gt");
    ok(&["synth-meshes", "--out", p(&meshes), "--seed", "1", "--counts", "3,4,3,4"]);
    ok(&["build-shapespace", "--mesh-dir", p(&meshes), "--out", p(&space)]);
    ok(&["synth", "--shapespace", p(&space), "--out", p(&gt), "--scenes", "2", "--cars", "3", "--seed", "5"]);
}

#[test]
fn noiseless_pipeline_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline_inputs(root);
    let (space, gt, fit, eval) = (root.join("space"), root.join("gt"), root.join("fit"), root.join("eval"));
    ok(&["fit", "--annotations", p(&gt), "--shapespace", p(&space), "--out", p(&fit)]);
    ok(&[
        "eval", "--preds", p(&fit), "--gts", p(&gt), "--shapespace", p(&space),
        "--views", "16", "--render-size", "96x72", "--out", p(&eval),
    ]);
    let report = read_json(&eval.join("eval_report.json"));
    assert_eq!(report["mean_ap"].as_f64(), Some(1.0), "{report}");
    assert_eq!(report["num_ground_truth"].as_u64(), Some(6));
    let csv = fs::read_to_string(eval.join("eval_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    for sub in ["meshes", "space", "gt", "fit", "eval"] {
        let manifest = read_json(&root.join(sub).join("manifest.json"));
        assert!(manifest["config_hash"].as_str().unwrap().len() == 64, "{sub}");
        assert!(!manifest["outputs"].as_array().unwrap().is_empty(), "{sub}");
    }
}

#[test]
fn empty_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline_inputs(root);
    let (space, gt, preds, eval) = (root.join("space"), root.join("gt"), root.join("empty"), root.join("eval"));
    fs::create_dir_all(&preds).unwrap();
    for entry in fs::read_dir(&gt).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("scene_") {
            let mut ann = read_json(&path);
            ann["instances"] = Value::Array(Vec::new());
            fs::write(preds.join(name), ann.to_string()).unwrap();
        }
    }
    ok(&[
        "eval", "--preds", p(&preds), "--gts", p(&gt), "--shapespace", p(&space),
        "--views", "4", "--render-size", "48x36", "--out", p(&eval),
    ]);
    let report = read_json(&eval.join("eval_report.json"));
    assert_eq!(report["mean_ap"].as_f64(), Some(0.0));
    assert_eq!(report["num_predictions"].as_u64(), Some(0));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let meshes = root.join("meshes");
    let gt = root.join("gt");
    ok(&["synth-meshes", "--out", p(&meshes), "--seed", "2", "--counts", "2,2,2,2"]);
    let space = root.join("space");
    ok(&["build-shapespace", "--mesh-dir", p(&meshes), "--out", p(&space), "--clusters", "2"]);
    let synth = ["synth", "--shapespace", p(&space), "--out", p(&gt), "--scenes", "2", "--cars", "2", "--noise", "1.5"];
    ok(&synth);
    let snapshot = |dir: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let path = e.unwrap().path();
                (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let first = snapshot(&gt);
    assert!(first.iter().any(|(n, _)| n == "manifest.json"));
    ok(&synth);
    assert_eq!(first, snapshot(&gt));
}

#[test]
fn missing_mesh_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "build-shapespace",
        "--mesh-dir",
        p(&dir.path().join("nowhere")),
        "--out",
        p(&dir.path().join("space")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("weights.json");
    fs::write(&cfg, r#"{"kpts": 1.0, "bogus": 2.0}"#).unwrap();
    let out = run(&["gradcheck", "--configs", "1", "--weights", p(&cfg), "--out", p(&dir.path().join("g"))]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes_with_few_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("grad");
    ok(&["gradcheck", "--configs", "3", "--seed", "4", "--out", p(&out_dir)]);
    let report = read_json(&out_dir.join("gradcheck.json"));
    assert_eq!(report["passed"].as_bool(), Some(true));
}
