//! Subject-wise stratified cross-validation, out-of-fold prediction tables
//! and the second-layer stacker.
//!
//! One [`FoldAssignment`] is shared by every model so pooled out-of-fold
//! predictions are paired on the same knees.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{train_model, BackboneConfig, RoiDataset, TrainConfig};
use crate::error::{Error, Result};
use crate::gbm::{fit_gbm, FeatureMatrix, GbmConfig, GbmModel};
use crate::metrics::{auc, ScoredSet};
use crate::rng::{derive_seed, rng_for};
use crate::roi::PreprocessConfig;
use crate::synth::ClinicalRow;

/// Subject to fold mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of_subject: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Result<usize> {
        self.fold_of_subject
            .get(subject)
            .copied()
            .ok_or_else(|| Error::Validation(format!("subject {subject} has no fold")))
    }

    /// Fold index for each knee, given the knee's subject.
    pub fn knee_folds(&self, subjects: &[impl AsRef<str>]) -> Result<Vec<usize>> {
        subjects.iter().map(|s| self.fold_of(s.as_ref())).collect()
    }

    /// Hex SHA-256 over `k` and the sorted `subject\tfold` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("k={}\n", self.k));
        for (s, f) in &self.fold_of_subject {
            h.update(format!("{s}\t{f}\n"));
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Self = serde_json::from_str(&s)?;
        if f.fold_of_subject.values().any(|&v| v >= f.k) {
            return Err(Error::Validation(format!("{}: fold index out of range", path.display())));
        }
        Ok(f)
    }
}

/// Greedy stratified assignment on subject-level positive-knee counts.
///
/// Subjects are shuffled with `seed`, ordered by descending positive count
/// (stable), and each goes to the fold with the fewest positive knees, then
/// the fewest knees, then the lowest index.
pub fn make_folds(subjects: &[impl AsRef<str>], labels: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config("folds", "k must be at least 2"));
    }
    if subjects.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} subject ids for {} labels",
            subjects.len(),
            labels.len()
        )));
    }
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (s, &y) in subjects.iter().zip(labels) {
        let e = stats.entry(s.as_ref()).or_default();
        e.0 += usize::from(y == 1);
        e.1 += 1;
    }
    let positive_subjects = stats.values().filter(|v| v.0 > 0).count();
    if positive_subjects < k {
        return Err(Error::Validation(format!(
            "{positive_subjects} subjects with positive knees; need at least {k}"
        )));
    }
    let mut order: Vec<(&str, usize, usize)> = stats.into_iter().map(|(s, (p, n))| (s, p, n)).collect();
    order.shuffle(&mut rng_for(seed, 0xF01D));
    order.sort_by(|a, b| b.1.cmp(&a.1));
    let mut pos = vec![0usize; k];
    let mut knees = vec![0usize; k];
    let mut fold_of_subject = BTreeMap::new();
    for (s, p, n) in order {
        let f = (0..k)
            .min_by_key(|&f| if p > 0 { (pos[f], knees[f]) } else { (0, knees[f]) })
            .expect("k >= 2");
        pos[f] += p;
        knees[f] += n;
        fold_of_subject.insert(s.to_string(), f);
    }
    Ok(FoldAssignment {
        k,
        seed,
        fold_of_subject,
    })
}

/// One out-of-fold prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub knee_id: String,
    pub fold: usize,
    pub model: String,
    pub probability: f64,
    pub label: u8,
}

/// Out-of-fold probabilities, one row per (knee, model).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Rows of `model` in table order.
    pub fn column(&self, model: &str) -> Vec<&PredictionRow> {
        self.rows.iter().filter(|r| r.model == model).collect()
    }

    /// Scores and labels of the single model in the table.
    pub fn scored(&self, model: &str) -> Result<ScoredSet> {
        let col = self.column(model);
        if col.is_empty() {
            return Err(Error::Validation(format!("no predictions for model {model}")));
        }
        let ids = col.iter().map(|r| r.knee_id.clone()).collect();
        ScoredSet::new(
            col.iter().map(|r| r.probability).collect(),
            col.iter().map(|r| r.label).collect(),
        )?
        .with_ids(ids)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        for col in ["knee_id", "fold", "model", "probability", "label"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Validation(format!(
                    "{} is missing column `{col}`",
                    path.display()
                )));
            }
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<PredictionRow>, _>>()?;
        for row in &rows {
            if row.label > 1 {
                return Err(Error::Validation(format!("knee {}: label {} is not 0/1", row.knee_id, row.label)));
            }
            if !(0.0..=1.0).contains(&row.probability) {
                return Err(Error::Validation(format!(
                    "knee {}: probability {} outside [0,1]",
                    row.knee_id, row.probability
                )));
            }
        }
        Ok(Self { rows })
    }
}

/// Learner trained once per fold.
pub trait FoldLearner: Sync {
    /// Fit on `train` (knee indices) and return probabilities for `test`.
    fn fit_predict(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<Vec<f64>>;
}

/// Per-fold test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub table: PredictionTable,
    pub fold_metrics: Vec<FoldMetric>,
}

/// The knees a cross-validated learner sees.
#[derive(Debug, Clone, Copy)]
pub struct CvKnees<'a> {
    pub knee_ids: &'a [String],
    pub subjects: &'a [String],
    pub labels: &'a [u8],
}

impl CvKnees<'_> {
    fn check(&self) -> Result<()> {
        if self.knee_ids.len() != self.subjects.len() || self.labels.len() != self.subjects.len() {
            return Err(Error::Validation("knee ids, subjects and labels differ in length".into()));
        }
        Ok(())
    }
}

/// Train `k` models, each without one fold, and assemble out-of-fold
/// probabilities. Folds run in parallel on the current rayon pool; results
/// do not depend on execution order.
pub fn run_cv(learner: &dyn FoldLearner, model: &str, knees: CvKnees<'_>, folds: &FoldAssignment) -> Result<CvOutcome> {
    knees.check()?;
    let knee_folds = folds.knee_folds(knees.subjects)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.k)
        .map(|f| (0..knee_folds.len()).partition(|&i| knee_folds[i] != f))
        .collect();
    for (f, (train, test)) in splits.iter().enumerate() {
        audit_split(knees.subjects, train, test)?;
        let pos = train.iter().filter(|&&i| knees.labels[i] == 1).count();
        if pos == 0 || pos == train.len() {
            return Err(Error::Validation(format!("training portion of fold {f} has a single class")));
        }
    }
    let preds: Vec<Vec<f64>> = splits
        .par_iter()
        .enumerate()
        .map(|(f, (train, test))| learner.fit_predict(f, train, test))
        .collect::<Result<_>>()?;
    let mut slot: Vec<Option<(usize, f64)>> = vec![None; knees.labels.len()];
    let mut fold_metrics = Vec::with_capacity(folds.k);
    for (f, ((train, test), p)) in splits.iter().zip(&preds).enumerate() {
        if p.len() != test.len() {
            return Err(Error::Validation(format!(
                "fold {f}: learner returned {} predictions for {} knees",
                p.len(),
                test.len()
            )));
        }
        for (&i, &v) in test.iter().zip(p) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("fold {f}: probability {v} outside [0,1]")));
            }
            slot[i] = Some((f, v));
        }
        let labels: Vec<u8> = test.iter().map(|&i| knees.labels[i]).collect();
        let a = ScoredSet::new(p.clone(), labels).ok().and_then(|s| auc(&s).ok());
        fold_metrics.push(FoldMetric {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            auc: a,
        });
    }
    let rows = slot
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let (fold, probability) = s.expect("every knee is in exactly one test fold");
            PredictionRow {
                knee_id: knees.knee_ids[i].clone(),
                fold,
                model: model.to_string(),
                probability,
                label: knees.labels[i],
            }
        })
        .collect();
    Ok(CvOutcome {
        table: PredictionTable { rows },
        fold_metrics,
    })
}

/// No training subject may appear in the test portion.
pub fn audit_split(subjects: &[String], train: &[usize], test: &[usize]) -> Result<()> {
    let train_subjects: BTreeSet<&str> = train.iter().map(|&i| subjects[i].as_str()).collect();
    if let Some(&i) = test.iter().find(|&&i| train_subjects.contains(subjects[i].as_str())) {
        return Err(Error::Validation(format!(
            "subject {} appears in both training and test portions",
            subjects[i]
        )));
    }
    Ok(())
}

/// Check that each prediction came from the fold that holds its subject
/// and that each knee is predicted exactly once per model.
pub fn audit_predictions(table: &PredictionTable, folds: &FoldAssignment, subject_of: &BTreeMap<String, String>) -> Result<()> {
    for model in table.models() {
        let mut seen = BTreeSet::new();
        for r in table.column(&model) {
            if !seen.insert(r.knee_id.as_str()) {
                return Err(Error::Validation(format!("{model}: knee {} predicted twice", r.knee_id)));
            }
            let s = subject_of
                .get(&r.knee_id)
                .ok_or_else(|| Error::Validation(format!("unknown knee {}", r.knee_id)))?;
            let f = folds.fold_of(s)?;
            if f != r.fold {
                return Err(Error::Validation(format!(
                    "{model}: knee {} predicted in fold {} but its subject is in fold {f}",
                    r.knee_id, r.fold
                )));
            }
        }
        if seen.len() != subject_of.len() {
            return Err(Error::Validation(format!(
                "{model}: {} of {} knees predicted",
                seen.len(),
                subject_of.len()
            )));
        }
    }
    Ok(())
}

/// Clinical reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClinicalModel {
    /// Age, sex, BMI.
    Gbm1,
    /// Model 1 plus WOMAC.
    Gbm2,
    /// Model 2 plus KL grade.
    Gbm3,
}

impl ClinicalModel {
    pub const ALL: [ClinicalModel; 3] = [ClinicalModel::Gbm1, ClinicalModel::Gbm2, ClinicalModel::Gbm3];

    pub fn name(self) -> &'static str {
        match self {
            ClinicalModel::Gbm1 => "gbm1",
            ClinicalModel::Gbm2 => "gbm2",
            ClinicalModel::Gbm3 => "gbm3",
        }
    }

    pub fn features(self) -> &'static [&'static str] {
        const ALL: [&str; 5] = ["age", "sex", "bmi", "womac", "kl"];
        match self {
            ClinicalModel::Gbm1 => &ALL[..3],
            ClinicalModel::Gbm2 => &ALL[..4],
            ClinicalModel::Gbm3 => &ALL,
        }
    }

    pub fn matrix(self, rows: &[ClinicalRow]) -> Result<FeatureMatrix> {
        let columns: Vec<Vec<f64>> = self
            .features()
            .iter()
            .map(|&f| {
                rows.iter()
                    .map(|r| match f {
                        "age" => r.age,
                        "sex" => r.sex as f64,
                        "bmi" => r.bmi,
                        "womac" => r.womac,
                        _ => r.kl as f64,
                    })
                    .collect()
            })
            .collect();
        FeatureMatrix::from_columns(self.features().iter().map(|s| s.to_string()).collect(), &columns)
    }
}

/// GBM on a fixed feature matrix; the fold index perturbs the seed.
pub struct GbmLearner<'a> {
    pub x: &'a FeatureMatrix,
    pub labels: &'a [u8],
    pub config: GbmConfig,
}

impl GbmLearner<'_> {
    pub fn fit_fold(&self, fold: usize, train: &[usize]) -> Result<GbmModel> {
        let y: Vec<u8> = train.iter().map(|&i| self.labels[i]).collect();
        let cfg = GbmConfig {
            seed: derive_seed(self.config.seed, fold as u64),
            ..self.config.clone()
        };
        fit_gbm(&self.x.select_rows(train), &y, &cfg)
    }
}

impl FoldLearner for GbmLearner<'_> {
    fn fit_predict(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
        self.fit_fold(fold, train)?.predict_proba(&self.x.select_rows(test))
    }
}

/// Attention (or plain) CNN trained from scratch per fold.
pub struct CnnLearner<'a> {
    pub data: &'a RoiDataset,
    pub backbone: BackboneConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub with_attention: bool,
    /// Called with each fold's trained network, e.g. to save a checkpoint.
    pub on_model: Option<&'a (dyn Fn(usize, &crate::attention::AttentionNet) -> Result<()> + Sync)>,
}

impl FoldLearner for CnnLearner<'_> {
    fn fit_predict(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
        let cfg = TrainConfig {
            seed: derive_seed(self.train.seed, fold as u64),
            ..self.train.clone()
        };
        let out = train_model(
            &self.data.subset(train),
            None,
            &self.backbone,
            &self.preprocess,
            &cfg,
            self.with_attention,
        )?;
        if let Some(hook) = self.on_model {
            hook(fold, &out.model)?;
        }
        out.model.predict_proba(&self.data.subset(test).eval_crops(&self.preprocess))
    }
}

/// How the second layer combines two base predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Two-feature GBM trained on the other folds' out-of-fold predictions.
    Gbm,
    /// Average of the two probabilities.
    Mean,
}

/// Defaults for the second-layer GBM: shallow trees over two inputs.
pub fn stacker_config(seed: u64) -> GbmConfig {
    GbmConfig {
        max_leaves: 4,
        seed,
        ..GbmConfig::default()
    }
}

/// Stacked out-of-fold probabilities. For fold `f` the second layer is fit
/// on the knees of every other fold and applied to fold `f`.
pub fn stack_second_layer(
    preds_clinical: &[f64],
    preds_cnn: &[f64],
    labels: &[u8],
    knee_folds: &[usize],
    k: usize,
    cfg: &GbmConfig,
    fusion: Fusion,
) -> Result<Vec<f64>> {
    let n = labels.len();
    if preds_clinical.len() != n || preds_cnn.len() != n || knee_folds.len() != n {
        return Err(Error::Validation(format!(
            "prediction columns of length {} and {} for {n} labelled knees",
            preds_clinical.len(),
            preds_cnn.len()
        )));
    }
    if let Some(v) = preds_clinical
        .iter()
        .chain(preds_cnn)
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Validation(format!("base prediction {v} missing or outside [0,1]")));
    }
    if let Some(&f) = knee_folds.iter().find(|&&f| f >= k) {
        return Err(Error::Validation(format!("fold index {f} out of range for k = {k}")));
    }
    if fusion == Fusion::Mean {
        return Ok(preds_clinical.iter().zip(preds_cnn).map(|(a, b)| 0.5 * (a + b)).collect());
    }
    let x = FeatureMatrix::from_columns(
        vec!["p_clinical".into(), "p_image".into()],
        &[preds_clinical.to_vec(), preds_cnn.to_vec()],
    )?;
    let mut out = vec![f64::NAN; n];
    for f in 0..k {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| knee_folds[i] != f);
        if test.is_empty() {
            continue;
        }
        let y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::Validation(format!("stacking fold {f}: training portion has a single class")));
        }
        let fold_cfg = GbmConfig {
            seed: derive_seed(cfg.seed, f as u64),
            ..cfg.clone()
        };
        let model = fit_gbm(&x.select_rows(&train), &y, &fold_cfg)?;
        for (&i, p) in test.iter().zip(model.predict_proba(&x.select_rows(&test))?) {
            out[i] = p;
        }
    }
    Ok(out)
}
