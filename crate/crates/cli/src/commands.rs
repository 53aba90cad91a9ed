//! Command implementations over the shared run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use pfoa_core::attention::{
    attention_parameter_count, export_attention_overlay, lesion_mass_fraction, write_overlay, AttentionNet,
    RoiDataset,
};
use pfoa_core::cv::{
    make_folds, run_cv, stack_second_layer, ClinicalModel, CnnLearner, CvKnees, FoldAssignment, FoldLearner,
    GbmLearner, PredictionRow, PredictionTable,
};
use pfoa_core::gbm::{exact_shap_with_base, GbmModel};
use pfoa_core::metrics::{
    average_precision, delong_test, fold_mean_ci, pr_points, report, roc_points, write_pr_csv, write_roc_csv,
    ScoredSet,
};
use pfoa_core::raster::GrayImage;
use pfoa_core::roi::{preprocess_knee, read_roi_tensor, write_roi_tensor, LandmarkSet};
use pfoa_core::synth::{
    generate_cohort, read_clinical_csv, write_clinical_csv, write_knee_files, ClinicalRow, CohortLayout,
    LandmarkFile, LesionFile,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{missing, CliError, CliResult};
use crate::manifest::{sha256_file, RunManifest};
use crate::{Format, ModelKind};

/// Number of training rows used as the SHAP background set.
const SHAP_BACKGROUND: usize = 100;

pub struct Context {
    pub run: PathBuf,
    pub format: Format,
}

impl Context {
    fn cohort(&self) -> PathBuf {
        self.run.join("cohort")
    }
    fn rois(&self) -> PathBuf {
        self.run.join("rois")
    }
    fn folds(&self) -> PathBuf {
        self.run.join("folds.json")
    }
    fn models(&self, model: &str) -> PathBuf {
        self.run.join("models").join(model)
    }
    fn predictions(&self, model: &str) -> PathBuf {
        self.run.join("predictions").join(format!("{model}.csv"))
    }
    fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.run.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }
}

/// `println!` that treats a closed stdout (e.g. piped into `head`) as done.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    say!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_clinical(ctx: &Context) -> CliResult<Vec<ClinicalRow>> {
    let path = CohortLayout { root: &ctx.cohort() }.clinical_csv();
    if !path.exists() {
        return Err(missing(&path, "synth"));
    }
    Ok(read_clinical_csv(&path)?)
}

/// Hex SHA-256 over the sorted relative paths and contents of `dir`.
fn tree_hash(dir: &Path) -> CliResult<String> {
    use sha2::{Digest, Sha256};
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha256_file(&p)?.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn synth(ctx: &Context, cfg: &RunConfig) -> CliResult<()> {
    let records = generate_cohort(&cfg.synth)?;
    let root = ctx.cohort();
    let layout = CohortLayout { root: &root };
    layout.create_dirs()?;
    write_clinical_csv(&records, &layout.clinical_csv())?;
    records
        .par_iter()
        .map(|r| write_knee_files(r, &cfg.synth, &layout))
        .collect::<Result<Vec<_>, _>>()?;

    let positives = records.iter().filter(|r| r.label.as_u8() == 1).count();
    let mut m = RunManifest::new("synth", cfg);
    m.seeds.insert("synth".into(), cfg.synth.seed);
    m.output(&ctx.run, &layout.clinical_csv())?;
    m.extra.insert("cohort_tree_sha256".into(), json!(tree_hash(&root)?));
    m.write(&ctx.run, "synth")?;
    let summary = json!({
        "knees": records.len(),
        "positives": positives,
        "prevalence": positives as f64 / records.len() as f64,
        "cohort": root,
    });
    match ctx.format {
        Format::Json => print_json(&summary),
        Format::Csv => {
            say!("knees,positives,prevalence\n{},{},{}", records.len(), positives, summary["prevalence"]);
            Ok(())
        }
    }
}

fn preprocess_one(ctx: &Context, cfg: &RunConfig, row: &ClinicalRow, out: &Path) -> Result<(), String> {
    let knee = row.knee_id();
    let root = ctx.cohort();
    let layout = CohortLayout { root: &root };
    let image = GrayImage::load_png(&layout.image(&knee)).map_err(|e| e.to_string())?;
    let lm_path = layout.landmarks(&knee);
    let lm_text = std::fs::read(&lm_path).map_err(|e| format!("{}: {e}", lm_path.display()))?;
    let lm: LandmarkFile = serde_json::from_slice(&lm_text).map_err(|e| format!("{}: {e}", lm_path.display()))?;
    let lesion_path = layout.lesions(&knee);
    let boxes = if lesion_path.exists() {
        let text = std::fs::read(&lesion_path).map_err(|e| format!("{}: {e}", lesion_path.display()))?;
        serde_json::from_slice::<LesionFile>(&text)
            .map_err(|e| format!("{}: {e}", lesion_path.display()))?
            .boxes
    } else {
        Vec::new()
    };
    let landmarks = LandmarkSet::new(lm.points).map_err(|e| e.to_string())?;
    let processed =
        preprocess_knee(&image, &landmarks, row.side, &boxes, &cfg.preprocess).map_err(|e| e.to_string())?;
    write_roi_tensor(out, &knee, &processed.roi).map_err(|e| e.to_string())?;
    processed
        .roi
        .pixels
        .to_image()
        .save_png8_scaled(&out.join("previews").join(format!("{knee}.png")))
        .map_err(|e| e.to_string())?;
    let lesions = serde_json::to_vec(&LesionFile {
        boxes: processed.lesion_boxes,
    })
    .map_err(|e| e.to_string())?;
    std::fs::write(out.join(format!("{knee}.lesions.json")), lesions).map_err(|e| e.to_string())
}

pub fn preprocess(ctx: &Context, cfg: &RunConfig) -> CliResult<()> {
    cfg.preprocess.validate()?;
    let rows = load_clinical(ctx)?;
    let out = ctx.subdir("rois")?;
    std::fs::create_dir_all(out.join("previews"))?;
    let results: Vec<Result<(), String>> = rows.par_iter().map(|r| preprocess_one(ctx, cfg, r, &out)).collect();
    let mut failures = csv::Writer::from_path(out.join("failures.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
    failures
        .write_record(["knee_id", "error"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut failed = 0;
    for (row, r) in rows.iter().zip(&results) {
        if let Err(e) = r {
            failed += 1;
            eprintln!("skipping {}: {e}", row.knee_id());
            failures
                .write_record([row.knee_id(), e.clone()])
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    failures.flush()?;
    let processed = rows.len() - failed;
    say!("processed {processed}, failed {failed}");
    let mut m = RunManifest::new("preprocess", cfg);
    m.input(&ctx.run, &CohortLayout { root: &ctx.cohort() }.clinical_csv())?;
    m.extra.insert("processed".into(), json!(processed));
    m.extra.insert("failed".into(), json!(failed));
    m.extra.insert("rois_tree_sha256".into(), json!(tree_hash(&out)?));
    m.write(&ctx.run, "preprocess")?;
    if processed == 0 && !rows.is_empty() {
        return Err(CliError::Runtime("every knee failed preprocessing".into()));
    }
    Ok(())
}

/// Build the fold assignment and make sure it matches the one already
/// recorded in the run, if any.
fn ensure_folds(ctx: &Context, cfg: &RunConfig, rows: &[ClinicalRow]) -> CliResult<FoldAssignment> {
    let subjects: Vec<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let folds = make_folds(&subjects, &labels, cfg.cv.folds, cfg.cv.seed)?;
    let path = ctx.folds();
    if path.exists() {
        let existing = FoldAssignment::load(&path)?;
        if existing != folds {
            return Err(CliError::Usage(format!(
                "{} holds a different fold assignment (hash {} vs {}); reuse the same --folds/--seed or a fresh run",
                path.display(),
                existing.hash(),
                folds.hash()
            )));
        }
    } else {
        folds.save(&path)?;
    }
    Ok(folds)
}

fn load_folds(ctx: &Context) -> CliResult<FoldAssignment> {
    let path = ctx.folds();
    if !path.exists() {
        return Err(missing(&path, "train"));
    }
    Ok(FoldAssignment::load(&path)?)
}

fn clinical_model(kind: ModelKind) -> Option<ClinicalModel> {
    match kind {
        ModelKind::Gbm1 => Some(ClinicalModel::Gbm1),
        ModelKind::Gbm2 => Some(ClinicalModel::Gbm2),
        ModelKind::Gbm3 => Some(ClinicalModel::Gbm3),
        ModelKind::Cnn | ModelKind::CnnAttn => None,
    }
}

/// GBM learner that also stores each fold model.
struct SavingGbm<'a> {
    inner: GbmLearner<'a>,
    dir: PathBuf,
}

impl FoldLearner for SavingGbm<'_> {
    fn fit_predict(&self, fold: usize, train: &[usize], test: &[usize]) -> pfoa_core::Result<Vec<f64>> {
        let model = self.inner.fit_fold(fold, train)?;
        let path = self.dir.join(format!("fold{fold}.json"));
        std::fs::write(&path, model.to_json()?).map_err(|e| pfoa_core::Error::Io { path, source: e })?;
        model.predict_proba(&self.inner.x.select_rows(test))
    }
}

fn load_rois(ctx: &Context, rows: &[ClinicalRow]) -> CliResult<Vec<pfoa_core::roi::RoiImage>> {
    let dir = ctx.rois();
    rows.iter()
        .map(|r| {
            let knee = r.knee_id();
            let path = dir.join(format!("{knee}.f32"));
            if !path.exists() {
                return Err(missing(&path, "preprocess"));
            }
            Ok(read_roi_tensor(&dir, &knee)?)
        })
        .collect()
}

#[derive(Serialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn train(ctx: &Context, cfg: &RunConfig, kind: ModelKind) -> CliResult<()> {
    let rows = load_clinical(ctx)?;
    let folds = ensure_folds(ctx, cfg, &rows)?;
    let knee_ids: Vec<String> = rows.iter().map(|r| r.knee_id()).collect();
    let subjects: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let knees = CvKnees {
        knee_ids: &knee_ids,
        subjects: &subjects,
        labels: &labels,
    };
    let name = kind.name();
    let model_dir = ctx.models(name);
    std::fs::create_dir_all(&model_dir)?;
    let mut manifest = RunManifest::new("train", cfg);
    manifest.seeds.insert("cv".into(), cfg.cv.seed);
    manifest.input(&ctx.run, &CohortLayout { root: &ctx.cohort() }.clinical_csv())?;

    let outcome = if let Some(cm) = clinical_model(kind) {
        cfg.gbm.validate()?;
        manifest.seeds.insert("gbm".into(), cfg.gbm.seed);
        let x = cm.matrix(&rows)?;
        let learner = SavingGbm {
            inner: GbmLearner {
                x: &x,
                labels: &labels,
                config: cfg.gbm.clone(),
            },
            dir: model_dir.clone(),
        };
        run_cv(&learner, name, knees, &folds)?
    } else {
        cfg.train.validate()?;
        cfg.backbone.validate()?;
        manifest.seeds.insert("train".into(), cfg.train.seed);
        let with_attention = kind == ModelKind::CnnAttn;
        let rois = load_rois(ctx, &rows)?;
        manifest.extra.insert("rois_tree_sha256".into(), json!(tree_hash(&ctx.rois())?));
        let data = RoiDataset::from_rois(knee_ids.clone(), &rois, labels.clone(), &cfg.preprocess)?;
        let save_dir = model_dir.clone();
        let hook = move |fold: usize, net: &AttentionNet| net.save(&save_dir.join(format!("fold{fold}.ckpt")));
        let learner = CnnLearner {
            data: &data,
            backbone: cfg.backbone.clone(),
            preprocess: cfg.preprocess.clone(),
            train: cfg.train.clone(),
            with_attention,
            on_model: Some(&hook),
        };
        let template = AttentionNet::new(&cfg.backbone, with_attention, 0)?;
        let params: Vec<ParamEntry> = template
            .params()
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        write_json(
            &model_dir.join("params.json"),
            &json!({
                "with_attention": with_attention,
                "parameter_count": template.parameter_count(),
                "attention_parameter_count": if with_attention { attention_parameter_count(&cfg.backbone) } else { 0 },
                "parameters": params,
            }),
        )?;
        run_cv(&learner, name, knees, &folds)?
    };

    let pred_path = ctx.predictions(name);
    std::fs::create_dir_all(pred_path.parent().expect("has parent"))?;
    outcome.table.write_csv(&pred_path)?;
    let pooled = report(&outcome.table.scored(name)?)?;
    let metrics_dir = ctx.subdir("metrics")?;
    let metrics_path = metrics_dir.join(format!("{name}_folds.json"));
    write_json(
        &metrics_path,
        &json!({
            "model": name,
            "fold_hash": folds.hash(),
            "folds": outcome.fold_metrics,
            "pooled": pooled,
        }),
    )?;
    manifest.extra.insert("fold_hash".into(), json!(folds.hash()));
    manifest.output(&ctx.run, &ctx.folds())?;
    manifest.output(&ctx.run, &pred_path)?;
    manifest.output(&ctx.run, &metrics_path)?;
    manifest.write(&ctx.run, &format!("train_{name}"))?;
    let summary = json!({ "model": name, "auc": pooled.auc, "fold_hash": folds.hash(), "predictions": pred_path });
    match ctx.format {
        Format::Json => print_json(&summary),
        Format::Csv => {
            say!("model,auc,fold_hash\n{name},{},{}", pooled.auc, folds.hash());
            Ok(())
        }
    }
}

fn read_table(path: &Path) -> CliResult<PredictionTable> {
    if !path.exists() {
        return Err(missing(path, "train"));
    }
    Ok(PredictionTable::read_csv(path)?)
}

/// Predictions of the single model in `path`, keyed by knee id.
fn single_model(path: &Path) -> CliResult<(String, BTreeMap<String, PredictionRow>)> {
    let table = read_table(path)?;
    let models = table.models();
    if models.len() != 1 {
        return Err(CliError::Usage(format!(
            "{} holds {} models; expected exactly one",
            path.display(),
            models.len()
        )));
    }
    let mut by_knee = BTreeMap::new();
    for r in table.rows {
        let id = r.knee_id.clone();
        if by_knee.insert(id.clone(), r).is_some() {
            return Err(CliError::Usage(format!("{}: knee {id} appears twice", path.display())));
        }
    }
    Ok((models[0].clone(), by_knee))
}

/// Pair two prediction files knee by knee.
fn paired(a: &Path, b: &Path) -> CliResult<(String, String, Vec<(PredictionRow, PredictionRow)>)> {
    let (ma, ra) = single_model(a)?;
    let (mb, mut rb) = single_model(b)?;
    let ids_a: BTreeSet<&String> = ra.keys().collect();
    let ids_b: BTreeSet<&String> = rb.keys().collect();
    if let Some(first) = ids_a.symmetric_difference(&ids_b).next() {
        return Err(CliError::Usage(format!(
            "knee ids differ between {} and {}; first mismatch: {first}",
            a.display(),
            b.display()
        )));
    }
    let mut pairs = Vec::with_capacity(ra.len());
    for (id, x) in ra {
        let y = rb.remove(&id).expect("same key set");
        if x.label != y.label {
            return Err(CliError::Usage(format!("knee {id}: labels differ between the two files")));
        }
        pairs.push((x, y));
    }
    Ok((ma, mb, pairs))
}

#[derive(Serialize)]
struct ModelReport {
    n: usize,
    n_pos: usize,
    n_neg: usize,
    auc: f64,
    auc_ci: (f64, f64),
    ap: f64,
    /// Mean and 95% interval of per-fold average precision.
    ap_fold_mean: Option<f64>,
    ap_fold_ci: Option<(f64, f64)>,
    brier: f64,
}

pub fn eval(ctx: &Context, cfg: &RunConfig, files: &[PathBuf]) -> CliResult<()> {
    let files: Vec<PathBuf> = if files.is_empty() {
        let dir = ctx.run.join("predictions");
        if !dir.exists() {
            return Err(missing(&dir, "train"));
        }
        let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        files.to_vec()
    };
    if files.is_empty() {
        return Err(CliError::Usage("no prediction files to evaluate".into()));
    }
    let out = ctx.subdir("eval")?;
    let mut manifest = RunManifest::new("eval", cfg);
    let mut models = BTreeMap::new();
    for f in &files {
        let table = read_table(f)?;
        manifest.input(&ctx.run, f)?;
        for m in table.models() {
            let scored = table.scored(&m)?;
            let r = report(&scored)?;
            let mut fold_ap = Vec::new();
            let col = table.column(&m);
            let k = col.iter().map(|r| r.fold).max().map_or(0, |v| v + 1);
            for fold in 0..k {
                let rows: Vec<_> = col.iter().filter(|r| r.fold == fold).collect();
                let s = ScoredSet::new(rows.iter().map(|r| r.probability).collect(), rows.iter().map(|r| r.label).collect());
                if let Ok(ap) = s.and_then(|s| average_precision(&s)) {
                    fold_ap.push(ap);
                }
            }
            let ap_fold = fold_mean_ci(&fold_ap).ok();
            let roc = out.join(format!("roc_{m}.csv"));
            let pr = out.join(format!("pr_{m}.csv"));
            write_roc_csv(&roc, &roc_points(&scored)?)?;
            write_pr_csv(&pr, &pr_points(&scored)?)?;
            manifest.output(&ctx.run, &roc)?;
            manifest.output(&ctx.run, &pr)?;
            if models
                .insert(
                    m.clone(),
                    ModelReport {
                        n: scored.len(),
                        n_pos: r.n_pos,
                        n_neg: r.n_neg,
                        auc: r.auc,
                        auc_ci: r.auc_ci,
                        ap: r.ap,
                        ap_fold_mean: ap_fold.map(|v| v.0),
                        ap_fold_ci: ap_fold.map(|v| (v.1, v.2)),
                        brier: r.brier,
                    },
                )
                .is_some()
            {
                return Err(CliError::Usage(format!("model {m} appears in more than one file")));
            }
        }
    }
    let report_path = out.join("report.json");
    let doc = json!({ "models": models });
    write_json(&report_path, &doc)?;
    manifest.output(&ctx.run, &report_path)?;
    manifest.write(&ctx.run, "eval")?;
    match ctx.format {
        Format::Json => print_json(&doc),
        Format::Csv => {
            say!("model,auc,auc_lo,auc_hi,ap,brier");
            for (m, r) in &models {
                say!("{m},{},{},{},{},{}", r.auc, r.auc_ci.0, r.auc_ci.1, r.ap, r.brier);
            }
            Ok(())
        }
    }
}

pub fn compare(ctx: &Context, cfg: &RunConfig, a: &Path, b: &Path) -> CliResult<()> {
    let (ma, mb, pairs) = paired(a, b)?;
    let sa: Vec<f64> = pairs.iter().map(|p| p.0.probability).collect();
    let sb: Vec<f64> = pairs.iter().map(|p| p.1.probability).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.0.label).collect();
    let d = delong_test(&sa, &sb, &labels)?;
    let c = d.covariance;
    let sd = (c[0][0] + c[1][1] - 2.0 * c[0][1]).max(0.0).sqrt();
    let diff = d.auc_a - d.auc_b;
    let doc = json!({
        "model_a": ma,
        "model_b": mb,
        "n": labels.len(),
        "auc_a": d.auc_a,
        "auc_b": d.auc_b,
        "auc_diff": diff,
        "auc_diff_ci": [diff - 1.959963984540054 * sd, diff + 1.959963984540054 * sd],
        "covariance": d.covariance,
        "z": d.z,
        "p_value": d.p_value,
    });
    let out = ctx.subdir("eval")?;
    let path = out.join(format!("compare_{ma}_vs_{mb}.json"));
    write_json(&path, &doc)?;
    let mut manifest = RunManifest::new("compare", cfg);
    manifest.input(&ctx.run, a)?;
    manifest.input(&ctx.run, b)?;
    manifest.output(&ctx.run, &path)?;
    manifest.write(&ctx.run, &format!("compare_{ma}_vs_{mb}"))?;
    match ctx.format {
        Format::Json => print_json(&doc),
        Format::Csv => {
            say!("model_a,model_b,auc_a,auc_b,z,p_value\n{ma},{mb},{},{},{},{}", d.auc_a, d.auc_b, d.z, d.p_value);
            Ok(())
        }
    }
}

pub fn stack(ctx: &Context, cfg: &RunConfig, clinical: &Path, image: &Path, name: &str) -> CliResult<()> {
    cfg.stack.gbm.validate()?;
    let (_, _, pairs) = paired(clinical, image)?;
    for (x, y) in &pairs {
        if x.fold != y.fold {
            return Err(CliError::Usage(format!(
                "knee {}: fold {} in {} but {} in {}; base models must share one fold assignment",
                x.knee_id,
                x.fold,
                clinical.display(),
                y.fold,
                image.display()
            )));
        }
    }
    let pc: Vec<f64> = pairs.iter().map(|p| p.0.probability).collect();
    let pi: Vec<f64> = pairs.iter().map(|p| p.1.probability).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.0.label).collect();
    let knee_folds: Vec<usize> = pairs.iter().map(|p| p.0.fold).collect();
    let k = knee_folds.iter().max().map_or(0, |v| v + 1);
    let stacked = stack_second_layer(&pc, &pi, &labels, &knee_folds, k, &cfg.stack.gbm, cfg.stack.fusion)?;
    let table = PredictionTable {
        rows: pairs
            .iter()
            .zip(stacked)
            .map(|((x, _), p)| PredictionRow {
                knee_id: x.knee_id.clone(),
                fold: x.fold,
                model: name.to_string(),
                probability: p,
                label: x.label,
            })
            .collect(),
    };
    let path = ctx.predictions(name);
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    table.write_csv(&path)?;
    let r = report(&table.scored(name)?)?;
    let mut manifest = RunManifest::new("stack", cfg);
    manifest.seeds.insert("stack".into(), cfg.stack.gbm.seed);
    manifest.input(&ctx.run, clinical)?;
    manifest.input(&ctx.run, image)?;
    manifest.output(&ctx.run, &path)?;
    manifest.write(&ctx.run, &format!("stack_{name}"))?;
    let doc = json!({ "model": name, "auc": r.auc, "predictions": path });
    match ctx.format {
        Format::Json => print_json(&doc),
        Format::Csv => {
            say!("model,auc\n{name},{}", r.auc);
            Ok(())
        }
    }
}

pub fn explain(ctx: &Context, cfg: &RunConfig, kind: ModelKind) -> CliResult<()> {
    let cm = clinical_model(kind)
        .ok_or_else(|| CliError::Usage(format!("explain needs a clinical model (gbm1|gbm2|gbm3), got {}", kind.name())))?;
    let rows = load_clinical(ctx)?;
    let folds = load_folds(ctx)?;
    let x = cm.matrix(&rows)?;
    let knee_folds = folds.knee_folds(&rows.iter().map(|r| r.subject_id.as_str()).collect::<Vec<_>>())?;
    let dir = ctx.models(kind.name());
    let mut manifest = RunManifest::new("explain", cfg);
    let mut models = Vec::with_capacity(folds.k);
    let mut backgrounds = Vec::with_capacity(folds.k);
    for f in 0..folds.k {
        let path = dir.join(format!("fold{f}.json"));
        if !path.exists() {
            return Err(missing(&path, &format!("train --model {}", kind.name())));
        }
        manifest.input(&ctx.run, &path)?;
        let text = std::fs::read_to_string(&path)?;
        models.push(GbmModel::from_json(&text)?);
        let bg: Vec<usize> = (0..rows.len()).filter(|&i| knee_folds[i] != f).take(SHAP_BACKGROUND).collect();
        backgrounds.push(x.select_rows(&bg));
    }
    let shap: Vec<(f64, Vec<f64>, f64)> = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let f = knee_folds[i];
            let row = x.row(i);
            let (base, phi) = exact_shap_with_base(&models[f], row, &backgrounds[f])?;
            Ok((base, phi, models[f].margin_row(row)))
        })
        .collect::<pfoa_core::Result<_>>()?;
    let out = ctx.subdir("explain")?;
    let name = kind.name();
    let shap_path = out.join(format!("shap_{name}.csv"));
    let mut w = csv::Writer::from_path(&shap_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut header = vec!["knee_id".to_string(), "fold".into(), "base_value".into()];
    header.extend(x.names().iter().map(|n| format!("shap_{n}")));
    header.push("margin".into());
    w.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut total = vec![0.0; x.n_cols()];
    for (i, (base, phi, margin)) in shap.iter().enumerate() {
        let mut rec = vec![rows[i].knee_id(), knee_folds[i].to_string(), base.to_string()];
        rec.extend(phi.iter().map(|v| v.to_string()));
        rec.push(margin.to_string());
        w.write_record(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (t, p) in total.iter_mut().zip(phi) {
            *t += p.abs();
        }
    }
    w.flush()?;
    let mut importance: Vec<(String, f64)> = x
        .names()
        .iter()
        .cloned()
        .zip(total.iter().map(|t| t / rows.len() as f64))
        .collect();
    importance.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let imp_path = out.join(format!("importance_{name}.csv"));
    let mut text = String::from("rank,feature,mean_abs_shap\n");
    for (r, (f, v)) in importance.iter().enumerate() {
        text.push_str(&format!("{},{f},{v}\n", r + 1));
    }
    std::fs::write(&imp_path, text)?;
    manifest.output(&ctx.run, &shap_path)?;
    manifest.output(&ctx.run, &imp_path)?;
    manifest.write(&ctx.run, &format!("explain_{name}"))?;
    let doc = json!({ "model": name, "importance": importance, "shap": shap_path });
    match ctx.format {
        Format::Json => print_json(&doc),
        Format::Csv => {
            say!("rank,feature,mean_abs_shap");
            for (r, (f, v)) in importance.iter().enumerate() {
                say!("{},{f},{v}", r + 1);
            }
            Ok(())
        }
    }
}

pub fn attn(ctx: &Context, cfg: &RunConfig, kind: ModelKind, knees: &[String], tap: Option<usize>) -> CliResult<()> {
    if kind != ModelKind::CnnAttn {
        return Err(CliError::Usage(format!("{} has no attention blocks; use cnn-attn", kind.name())));
    }
    let rows = load_clinical(ctx)?;
    let folds = load_folds(ctx)?;
    let subject_of: BTreeMap<String, &str> = rows.iter().map(|r| (r.knee_id(), r.subject_id.as_str())).collect();
    let dir = ctx.models(kind.name());
    let out = ctx.subdir("attn")?;
    let mut manifest = RunManifest::new("attn", cfg);
    let mut nets: BTreeMap<usize, AttentionNet> = BTreeMap::new();
    let mut summary = Vec::new();
    for knee in knees {
        let subject = subject_of
            .get(knee)
            .ok_or_else(|| CliError::Usage(format!("unknown knee id {knee}")))?;
        let fold = folds.fold_of(subject)?;
        if !nets.contains_key(&fold) {
            let path = dir.join(format!("fold{fold}.ckpt"));
            if !path.exists() {
                return Err(missing(&path, "train --model cnn-attn"));
            }
            manifest.input(&ctx.run, &path)?;
            nets.insert(fold, AttentionNet::load(&path)?);
        }
        let net = &nets[&fold];
        let roi_path = ctx.rois().join(format!("{knee}.f32"));
        if !roi_path.exists() {
            return Err(missing(&roi_path, "preprocess"));
        }
        let roi = read_roi_tensor(&ctx.rois(), knee)?;
        let overlay = export_attention_overlay(net, &roi, &cfg.preprocess, tap)?;
        write_overlay(&out, knee, &overlay)?;
        manifest.output(&ctx.run, &out.join(format!("{knee}.png")))?;
        let crop = pfoa_core::roi::resize_and_crop(&roi, &cfg.preprocess, pfoa_core::roi::CropMode::Eval);
        let probability = net.predict_proba(std::slice::from_ref(&crop))?[0];
        let lesions = ctx.rois().join(format!("{knee}.lesions.json"));
        let fractions = if lesions.exists() {
            let boxes: LesionFile = serde_json::from_slice(&std::fs::read(&lesions)?)?;
            let (mass, area) = lesion_mass_fraction(&overlay.raw, &boxes.boxes);
            Some(json!({ "mass_fraction": mass, "area_fraction": area }))
        } else {
            None
        };
        summary.push(json!({ "knee_id": knee, "fold": fold, "probability": probability, "lesions": fractions }));
    }
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    manifest.output(&ctx.run, &path)?;
    manifest.write(&ctx.run, "attn")?;
    match ctx.format {
        Format::Json => print_json(&summary),
        Format::Csv => {
            say!("knee_id,fold,probability");
            for s in &summary {
                say!("{},{},{}", s["knee_id"].as_str().unwrap_or_default(), s["fold"], s["probability"]);
            }
            Ok(())
        }
    }
}
