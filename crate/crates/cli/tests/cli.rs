//! Command-line behavior: exit codes, artifacts and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfoa_core::cv::ClinicalModel;
use pfoa_core::gbm::GbmModel;
use pfoa_core::synth::read_clinical_csv;
use serde_json::Value;

const TINY: &str = "\
synth.n_subjects = 40
synth.target_prevalence = 0.3
train.epochs = 2
cv.folds = 3
gbm.n_trees = 20
";

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, config).unwrap();
        Self {
            _dir: dir,
            root,
            config: cfg,
        }
    }

    fn pfoa(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pfoa"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.root)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.pfoa(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn prepared() -> Self {
        let r = Self::new(TINY);
        r.ok(&["synth"]);
        r.ok(&["preprocess"]);
        r
    }
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_predictions(path: &Path, model: &str, rows: &[(&str, usize, f64, u8)]) {
    let mut text = String::from("knee_id,fold,model,probability,label\n");
    for (id, fold, p, y) in rows {
        text.push_str(&format!("{id},{fold},{model},{p},{y}\n"));
    }
    std::fs::write(path, text).unwrap();
}

/// Ten knees in two folds, half positive, scored perfectly.
fn perfect_rows() -> Vec<(String, usize, f64, u8)> {
    (0..10)
        .map(|i| {
            let y = u8::from(i % 2 == 0);
            (format!("K{i:02}"), i / 5, if y == 1 { 0.8 } else { 0.2 }, y)
        })
        .collect()
}

fn as_refs(rows: &[(String, usize, f64, u8)]) -> Vec<(&str, usize, f64, u8)> {
    rows.iter().map(|(a, b, c, d)| (a.as_str(), *b, *c, *d)).collect()
}

#[test]
fn synth_is_deterministic_and_validates_config() {
    let a = Run::new(TINY);
    let out = a.ok(&["synth"]);
    assert_eq!(stdout_json(&out)["knees"], 80);
    for sub in ["cohort/clinical.csv", "cohort/images/S00001_L.png", "cohort/landmarks/S00001_R.json", "manifests/synth.json"] {
        assert!(a.path(sub).exists(), "{sub}");
    }
    let b = Run::new(TINY);
    b.ok(&["synth"]);
    let read = |r: &Run| std::fs::read(r.path("cohort/clinical.csv")).unwrap();
    assert_eq!(read(&a), read(&b));

    let bad = Run::new("synth.target_prevalence = 1.5\n");
    let out = bad.pfoa(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("target_prevalence"), "{}", stderr(&out));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["exit_code"], 2);

    let unknown = Run::new("synth.bogus = 1\n");
    let out = unknown.pfoa(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("synth.bogus"));
}

#[test]
fn preprocess_skips_corrupt_knees_and_fails_only_when_all_do() {
    let r = Run::new(TINY);
    r.ok(&["synth"]);
    std::fs::write(r.path("cohort/landmarks/S00003_R.json"), "{ not json").unwrap();
    let out = r.ok(&["preprocess"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("processed 79, failed 1"));
    let failures = std::fs::read_to_string(r.path("rois/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(failures.contains("S00003_R"));
    assert!(!r.path("rois/S00003_R.f32").exists());
    let header: Value = serde_json::from_str(&std::fs::read_to_string(r.path("rois/S00001_L.json")).unwrap()).unwrap();
    assert_eq!(header["shape"][0], header["shape"][1]);
    assert!(r.path("rois/previews/S00001_L.png").exists());

    std::fs::remove_dir_all(r.path("cohort/landmarks")).unwrap();
    let out = r.pfoa(&["preprocess"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn zero_failures_on_a_generated_cohort() {
    let r = Run::prepared();
    let failures = std::fs::read_to_string(r.path("rois/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 1);
    for e in std::fs::read_dir(r.path("rois")).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".json") && !name.ends_with(".lesions.json") {
            let h: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            assert_eq!(h["shape"][0], h["shape"][1], "{name}");
        }
    }
}

#[test]
fn train_writes_one_row_per_knee_and_is_reproducible() {
    let a = Run::prepared();
    a.ok(&["train", "--model", "gbm3"]);
    let csv = std::fs::read_to_string(a.path("predictions/gbm3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 81);
    for f in 0..3 {
        assert!(a.path(&format!("models/gbm3/fold{f}.json")).exists());
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(a.path("metrics/gbm3_folds.json")).unwrap()).unwrap();
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 3);

    let b = Run::prepared();
    b.ok(&["train", "--model", "gbm3"]);
    assert_eq!(csv, std::fs::read_to_string(b.path("predictions/gbm3.csv")).unwrap());
    // Rerunning in place keeps the folds and the bytes.
    a.ok(&["train", "--model", "gbm3"]);
    assert_eq!(csv, std::fs::read_to_string(a.path("predictions/gbm3.csv")).unwrap());
}

#[test]
fn train_rejects_bad_models_missing_inputs_and_changed_folds() {
    let r = Run::new(TINY);
    r.ok(&["synth"]);
    let out = r.pfoa(&["train", "--model", "resnet"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    for name in ["gbm1", "gbm2", "gbm3", "cnn", "cnn-attn"] {
        assert!(msg.contains(name), "{msg}");
    }
    let out = r.pfoa(&["train", "--model", "cnn"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("S00001_L.f32"), "{}", stderr(&out));

    r.ok(&["train", "--model", "gbm1"]);
    let out = r.pfoa(&["train", "--model", "gbm2", "--folds", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("folds.json"));
}

#[test]
fn cnn_manifests_differ_only_by_attention() {
    let r = Run::prepared();
    r.ok(&["train", "--model", "cnn"]);
    r.ok(&["train", "--model", "cnn-attn"]);
    let load = |m: &str| -> Value {
        serde_json::from_str(&std::fs::read_to_string(r.path(&format!("models/{m}/params.json"))).unwrap()).unwrap()
    };
    let (plain, attn) = (load("cnn"), load("cnn-attn"));
    let entries = |v: &Value| -> Vec<(String, Vec<u64>)> {
        v["parameters"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| {
                let shape = p["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).collect();
                (p["name"].as_str().unwrap().to_string(), shape)
            })
            .collect()
    };
    let (pe, ae) = (entries(&plain), entries(&attn));
    let non_attn: Vec<_> = ae.iter().filter(|(n, _)| !n.starts_with("attn")).cloned().collect();
    assert_eq!(non_attn.len(), pe.len());
    for ((na, sa), (np, sp)) in non_attn.iter().zip(&pe) {
        assert_eq!(na, np);
        // Only the head's input width grows, by the pooled attended features.
        if sa != sp {
            assert!(na.starts_with("head.") && na.ends_with(".weight"), "{na}");
            assert_eq!(sa[0], sp[0]);
        }
    }
    let diff = attn["parameter_count"].as_u64().unwrap() - plain["parameter_count"].as_u64().unwrap();
    assert_eq!(diff, attn["attention_parameter_count"].as_u64().unwrap());
    for f in 0..3 {
        assert!(r.path(&format!("models/cnn-attn/fold{f}.ckpt")).exists());
    }
}

#[test]
fn eval_reports_perfect_predictions_and_monotone_curves() {
    let r = Run::new(TINY);
    std::fs::create_dir_all(&r.root).unwrap();
    let file = r.root.join("perfect.csv");
    let rows = perfect_rows();
    write_predictions(&file, "oracle", &as_refs(&rows));
    let out = r.ok(&["eval", file.to_str().unwrap()]);
    let rep = &stdout_json(&out)["models"]["oracle"];
    assert_eq!(rep["auc"], 1.0);
    assert!((rep["brier"].as_f64().unwrap() - 0.04).abs() < 1e-15);
    for key in ["auc_ci", "ap", "ap_fold_ci", "brier", "n_pos", "n_neg"] {
        assert!(!rep[key].is_null(), "{key}");
    }
    for curve in ["roc_oracle.csv", "pr_oracle.csv"] {
        let text = std::fs::read_to_string(r.path(&format!("eval/{curve}"))).unwrap();
        let thresholds: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(thresholds.windows(2).all(|w| w[0] >= w[1]), "{curve}");
    }

    let exact = r.root.join("exact.csv");
    let binary: Vec<_> = rows.iter().map(|(a, b, _, y)| (a.as_str(), *b, f64::from(*y), *y)).collect();
    write_predictions(&exact, "exact", &binary);
    let out = r.ok(&["eval", exact.to_str().unwrap()]);
    assert_eq!(stdout_json(&out)["models"]["exact"]["brier"], 0.0);

    let unlabeled = r.root.join("unlabeled.csv");
    std::fs::write(&unlabeled, "knee_id,fold,model,probability\nK1,0,m,0.5\n").unwrap();
    let out = r.pfoa(&["eval", unlabeled.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn compare_is_antisymmetric_and_checks_knee_ids() {
    let r = Run::prepared();
    r.ok(&["train", "--model", "gbm1"]);
    r.ok(&["train", "--model", "gbm3"]);
    let (a, b) = (r.path("predictions/gbm1.csv"), r.path("predictions/gbm3.csv"));
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    let same = stdout_json(&r.ok(&["compare", a, a]));
    assert_eq!(same["p_value"], 1.0);
    assert_eq!(same["z"], 0.0);
    let ab = stdout_json(&r.ok(&["compare", a, b]));
    let ba = stdout_json(&r.ok(&["compare", b, a]));
    assert_eq!(ab["z"].as_f64().unwrap(), -ba["z"].as_f64().unwrap());
    assert_eq!(ab["p_value"], ba["p_value"]);
    assert!(ab["p_value"].as_f64().unwrap().is_finite());
    assert!(r.path("eval/compare_gbm1_vs_gbm3.json").exists());

    let short = r.root.join("short.csv");
    let text = std::fs::read_to_string(b).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("S00002_R")).collect();
    std::fs::write(&short, kept.join("\n")).unwrap();
    let out = r.pfoa(&["compare", a, short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("S00002_R"), "{}", stderr(&out));
}

#[test]
fn stacking_perfect_inputs_stays_perfect() {
    let r = Run::new(TINY);
    std::fs::create_dir_all(&r.root).unwrap();
    // Enough knees per fold for the stacker's default minimum leaf size.
    let rows: Vec<(String, usize, f64, u8)> = (0..300)
        .map(|i| {
            let y = u8::from(i % 3 == 0);
            (format!("K{i:03}"), i / 100, if y == 1 { 0.9 } else { 0.1 }, y)
        })
        .collect();
    let clinical = r.root.join("c.csv");
    let image = r.root.join("i.csv");
    write_predictions(&clinical, "clin", &as_refs(&rows));
    write_predictions(&image, "img", &as_refs(&rows));
    r.ok(&["stack", "--clinical", clinical.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    let out = r.ok(&["eval", r.path("predictions/stack.csv").to_str().unwrap()]);
    assert_eq!(stdout_json(&out)["models"]["stack"]["auc"], 1.0);

    let mut moved = rows.clone();
    moved[0].1 = 2;
    write_predictions(&image, "img", &as_refs(&moved));
    let out = r.pfoa(&["stack", "--clinical", clinical.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shap_rows_sum_to_recomputed_margins() {
    let r = Run::prepared();
    let out = r.pfoa(&["explain", "--model", "gbm2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("folds.json"));
    r.ok(&["train", "--model", "gbm1"]);
    let out = r.pfoa(&["explain", "--model", "gbm2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gbm2/fold0.json"), "{}", stderr(&out));
    r.ok(&["train", "--model", "gbm2"]);
    let out = r.ok(&["explain", "--model", "gbm2", "--format", "csv"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rank,feature,mean_abs_shap"));

    let clinical = read_clinical_csv(&r.path("cohort/clinical.csv")).unwrap();
    let x = ClinicalModel::Gbm2.matrix(&clinical).unwrap();
    let models: Vec<GbmModel> = (0..3)
        .map(|f| GbmModel::from_json(&std::fs::read_to_string(r.path(&format!("models/gbm2/fold{f}.json"))).unwrap()).unwrap())
        .collect();
    let mut reader = csv::Reader::from_path(r.path("explain/shap_gbm2.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 3 + x.n_cols() + 1);
    let mut n = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], clinical[i].knee_id());
        let fold: usize = rec[1].parse().unwrap();
        let vals: Vec<f64> = rec.iter().skip(2).map(|v| v.parse().unwrap()).collect();
        let total: f64 = vals[..=x.n_cols()].iter().sum();
        let margin = models[fold].margin_row(x.row(i));
        assert!((total - margin).abs() < 1e-9, "{}: {total} vs {margin}", &rec[0]);
        n += 1;
    }
    assert_eq!(n, 80);
    let ranking = std::fs::read_to_string(r.path("explain/importance_gbm2.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 1 + x.n_cols());
}

#[test]
fn attn_writes_one_overlay_per_knee() {
    let r = Run::prepared();
    let out = r.pfoa(&["attn", "--knees", "S00001_L"]);
    assert_eq!(out.status.code(), Some(2));
    r.ok(&["train", "--model", "cnn-attn"]);
    let out = r.pfoa(&["attn", "--model", "cnn", "--knees", "S00001_L"]);
    assert_eq!(out.status.code(), Some(2));
    let out = r.ok(&["attn", "--knees", "S00001_L,S00002_R,S00007_L"]);
    let summary = stdout_json(&out);
    assert_eq!(summary.as_array().unwrap().len(), 3);
    let pngs = std::fs::read_dir(r.path("attn"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 3);
    let out = r.pfoa(&["attn", "--knees", "S00001_L", "--tap", "5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = r.pfoa(&["attn", "--knees", "nobody"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csv_format_prints_plain_errors() {
    let r = Run::new(TINY);
    let out = r.pfoa(&["--format", "csv", "preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: missing"), "{}", stderr(&out));
}
