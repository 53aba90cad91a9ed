//! Evaluation metrics and DeLong's test for correlated ROC curves.
//!
//! Ties are handled by grouping equal scores (curves, AP) and by midranks
//! (AUC, DeLong structural components), so every function is a pure,
//! deterministic function of its input.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Scores with binary labels and optional knee ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    ids: Option<Vec<String>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("labels must be 0 or 1, got {l}")));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Validation(format!("scores must be finite, got {s}")));
        }
        Ok(Self {
            scores,
            labels,
            ids: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.scores.len() {
            return Err(Error::Validation(format!(
                "{} ids for {} scores",
                ids.len(),
                self.scores.len()
            )));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = self.class_counts();
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!(
                "need both classes, got {p} positives and {n} negatives"
            )));
        }
        Ok((p, n))
    }

    /// Groups of tied scores in descending score order, as
    /// `(score, positives, negatives)`.
    fn descending_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            let pos = usize::from(self.labels[i] == 1);
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += pos;
                    g.2 += 1 - pos;
                }
                _ => groups.push((s, pos, 1 - pos)),
            }
        }
        groups
    }
}

/// Midranks (1-based, ties averaged).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// DeLong structural components: for each positive, its placement among
/// negatives (`v10`); for each negative, its placement among positives
/// (`v01`). Ties count one half. The AUC is the mean of either vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralComponents {
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

pub fn structural_components(scored: &ScoredSet) -> Result<StructuralComponents> {
    let (m, n) = scored.require_both_classes()?;
    let all = midranks(&scored.scores);
    let pos: Vec<f64> = scored.positives().collect();
    let neg: Vec<f64> = scored.negatives().collect();
    let rp = midranks(&pos);
    let rn = midranks(&neg);
    let (mut pi, mut ni) = (0, 0);
    let mut v10 = Vec::with_capacity(m);
    let mut v01 = Vec::with_capacity(n);
    for (k, &l) in scored.labels.iter().enumerate() {
        if l == 1 {
            v10.push((all[k] - rp[pi]) / n as f64);
            pi += 1;
        } else {
            v01.push(1.0 - (all[k] - rn[ni]) / m as f64);
            ni += 1;
        }
    }
    Ok(StructuralComponents { v10, v01 })
}

impl ScoredSet {
    fn positives(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s)
    }

    fn negatives(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s)
    }
}

/// Mann-Whitney AUC: probability a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scored: &ScoredSet) -> Result<f64> {
    let (m, n) = scored.require_both_classes()?;
    let ranks = midranks(&scored.scores);
    let rank_sum: f64 = ranks.iter().zip(&scored.labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - (m * (m + 1)) as f64 / 2.0) / (m * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC curve with one point per distinct score (predict positive when
/// `score >= threshold`), anchored at (0, 0) with threshold `+inf`.
pub fn roc_points(scored: &ScoredSet) -> Result<Vec<RocPoint>> {
    let (p, n) = scored.require_both_classes()?;
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for (s, gp, gn) in scored.descending_groups() {
        tp += gp;
        fp += gn;
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(pts)
}

/// Area under a polyline of ROC points by the trapezoid rule.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Precision-recall curve with one point per distinct score.
pub fn pr_points(scored: &ScoredSet) -> Result<Vec<PrPoint>> {
    let (p, _) = scored.require_both_classes()?;
    let (mut tp, mut fp) = (0, 0);
    Ok(scored
        .descending_groups()
        .into_iter()
        .map(|(s, gp, gn)| {
            tp += gp;
            fp += gn;
            PrPoint {
                threshold: s,
                recall: tp as f64 / p as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

/// Step-wise average precision `sum_k (R_k - R_{k-1}) P_k`.
pub fn average_precision(scored: &ScoredSet) -> Result<f64> {
    let (p, _) = scored.class_counts();
    if p == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0, 0);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, gp, gn) in scored.descending_groups() {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean squared error of probabilistic predictions.
pub fn brier(scored: &ScoredSet) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Metric("brier score of an empty set".into()));
    }
    if let Some(s) = scored.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Validation(format!("brier needs probabilities in [0, 1], got {s}")));
    }
    Ok(scored
        .scores
        .iter()
        .zip(&scored.labels)
        .map(|(s, &l)| (s - l as f64).powi(2))
        .sum::<f64>()
        / scored.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Covariance of `(auc_a, auc_b)`.
    pub covariance: [[f64; 2]; 2],
    pub z: f64,
    pub p_value: f64,
}

fn sample_cov(a: &[f64], b: &[f64], ma: f64, mb: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn require_delong_sizes(scored: &ScoredSet) -> Result<()> {
    let (p, n) = scored.require_both_classes()?;
    if p < 2 || n < 2 {
        return Err(Error::Metric(format!(
            "DeLong variance needs at least 2 of each class, got {p} positives and {n} negatives"
        )));
    }
    Ok(())
}

/// AUC and its DeLong variance for a single model.
pub fn delong_variance(scored: &ScoredSet) -> Result<(f64, f64)> {
    require_delong_sizes(scored)?;
    let sc = structural_components(scored)?;
    let a = auc(scored)?;
    let (m, n) = (sc.v10.len() as f64, sc.v01.len() as f64);
    let var = sample_cov(&sc.v10, &sc.v10, a, a) / m + sample_cov(&sc.v01, &sc.v01, a, a) / n;
    Ok((a, var))
}

/// Two-sided two-sample normal p-value for `z`.
fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// DeLong's test for two correlated AUCs evaluated on the same knees.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLongResult> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::Validation(format!(
            "delong_test length mismatch: {} / {} scores, {} labels",
            scores_a.len(),
            scores_b.len(),
            labels.len()
        )));
    }
    let sa = ScoredSet::new(scores_a.to_vec(), labels.to_vec())?;
    let sb = ScoredSet::new(scores_b.to_vec(), labels.to_vec())?;
    require_delong_sizes(&sa)?;
    let ca = structural_components(&sa)?;
    let cb = structural_components(&sb)?;
    let (auc_a, auc_b) = (auc(&sa)?, auc(&sb)?);
    let (m, n) = (ca.v10.len() as f64, ca.v01.len() as f64);
    let s = |x10: &[f64], y10: &[f64], mx: f64, x01: &[f64], y01: &[f64], my: f64| {
        sample_cov(x10, y10, mx, my) / m + sample_cov(x01, y01, mx, my) / n
    };
    let vaa = s(&ca.v10, &ca.v10, auc_a, &ca.v01, &ca.v01, auc_a);
    let vbb = s(&cb.v10, &cb.v10, auc_b, &cb.v01, &cb.v01, auc_b);
    let vab = s(&ca.v10, &cb.v10, auc_a, &ca.v01, &cb.v01, auc_b);
    let diff = auc_a - auc_b;
    let var = vaa + vbb - 2.0 * vab;
    let (z, p_value) = if diff == 0.0 {
        (0.0, 1.0)
    } else if var <= 0.0 {
        (diff.signum() * f64::INFINITY, 0.0)
    } else {
        let z = diff / var.sqrt();
        (z, two_sided_p(z))
    };
    Ok(DeLongResult {
        auc_a,
        auc_b,
        covariance: [[vaa, vab], [vab, vbb]],
        z,
        p_value,
    })
}

fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `auc +- z_{(1+level)/2} * sqrt(var)` clipped to [0, 1].
pub fn delong_ci(scored: &ScoredSet, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let (a, var) = delong_variance(scored)?;
    let half = normal_quantile((1.0 + level) / 2.0) * var.max(0.0).sqrt();
    Ok(((a - half).max(0.0), (a + half).min(1.0)))
}

/// Secondary interval from per-fold values: mean +- 1.96 * sample std.
pub fn fold_mean_ci(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Metric("fold interval needs at least two folds".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt();
    Ok((mean, mean - 1.96 * sd, mean + 1.96 * sd))
}

/// Summary written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub ap: f64,
    pub brier: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn report(scored: &ScoredSet) -> Result<MetricsReport> {
    let (n_pos, n_neg) = scored.require_both_classes()?;
    Ok(MetricsReport {
        auc: auc(scored)?,
        auc_ci: delong_ci(scored, 0.95)?,
        ap: average_precision(scored)?,
        brier: brier(scored)?,
        n_pos,
        n_neg,
    })
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    write_file(path, out.as_bytes())
}

pub fn write_pr_csv(path: &Path, points: &[PrPoint]) -> Result<()> {
    let mut out = String::from("threshold,recall,precision\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    fn pair_count_auc(s: &ScoredSet) -> f64 {
        let pos: Vec<f64> = s.positives().collect();
        let neg: Vec<f64> = s.negatives().collect();
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0])).unwrap(), 0.75);
        assert_eq!(auc(&set(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.3; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
        assert!(matches!(auc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::Metric(_))));
    }

    #[test]
    fn perfect_roc_passes_through_top_left() {
        let pts = roc_points(&set(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn tied_scores_collapse_to_one_point() {
        let pts = roc_points(&set(&[0.5, 0.5, 0.5, 0.1], &[1, 0, 1, 0])).unwrap();
        assert_eq!(pts.len(), 3);
    }

    #[test]
    fn pr_endpoint_precision_is_prevalence() {
        let s = set(&[0.9, 0.3, 0.5, 0.2, 0.7], &[1, 0, 0, 0, 1]);
        let last = *pr_points(&s).unwrap().last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert!((last.precision - 0.4).abs() < 1e-15);
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&set(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&set(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert!(matches!(average_precision(&set(&[0.9], &[0])), Err(Error::Metric(_))));
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&set(&[1.0, 0.0], &[1, 0])).unwrap(), 0.0);
        assert!((brier(&set(&[0.8, 0.2], &[1, 0])).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(brier(&set(&[0.5; 4], &[1, 0, 0, 1])).unwrap(), 0.25);
        assert!(matches!(brier(&set(&[1.5], &[1])), Err(Error::Validation(_))));
    }

    #[test]
    fn structural_components_match_enumeration() {
        let s = set(&[0.9, 0.4, 0.6, 0.6, 0.2, 0.4], &[1, 1, 1, 0, 0, 0]);
        let sc = structural_components(&s).unwrap();
        let pos = [0.9, 0.4, 0.6];
        let neg = [0.6, 0.2, 0.4];
        let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        for (i, &x) in pos.iter().enumerate() {
            let want = neg.iter().map(|&y| psi(x, y)).sum::<f64>() / 3.0;
            assert_eq!(sc.v10[i], want);
        }
        for (j, &y) in neg.iter().enumerate() {
            let want = pos.iter().map(|&x| psi(x, y)).sum::<f64>() / 3.0;
            assert!((sc.v01[j] - want).abs() < 1e-15);
        }
        let a = auc(&s).unwrap();
        assert_eq!(a, pair_count_auc(&s));
        assert!((sc.v10.iter().sum::<f64>() / 3.0 - a).abs() < 1e-15);
    }

    #[test]
    fn identical_models_give_p_one() {
        let s = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2];
        let l = [0, 1, 0, 1, 1, 0];
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(delong_test(&s, &s[..5], &l).is_err());
    }

    #[test]
    fn delong_is_antisymmetric() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2, 0.45, 0.6];
        let b = [0.3, 0.4, 0.1, 0.8, 0.2, 0.25, 0.7, 0.5];
        let l = [0, 1, 0, 1, 1, 0, 0, 1];
        let ab = delong_test(&a, &b, &l).unwrap();
        let ba = delong_test(&b, &a, &l).unwrap();
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        let c = ab.covariance;
        assert_eq!(c[0][1], c[1][0]);
        assert!(c[0][0] >= 0.0 && c[1][1] >= 0.0 && c[0][0] * c[1][1] >= c[0][1] * c[0][1] - 1e-15);
        assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn separated_ci_is_clipped_at_one() {
        let scores: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let labels: Vec<u8> = (0..400).map(|i| u8::from(i >= 200)).collect();
        let (lo, hi) = delong_ci(&set(&scores, &labels), 0.95).unwrap();
        assert_eq!(hi, 1.0);
        assert!(lo > 0.99);
    }

    #[test]
    fn fold_interval_is_symmetric() {
        let (m, lo, hi) = fold_mean_ci(&[0.7, 0.8, 0.75]).unwrap();
        assert!((m - 0.75).abs() < 1e-12);
        assert!((hi - m - (m - lo)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_equals_trapezoid_and_pair_count(
            raw in prop::collection::vec((0u8..6, 0u8..2), 2..50)
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 5.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            labels[1] = 0;
            scores[0] = scores[0].min(1.0);
            let s = set(&scores, &labels);
            let a = auc(&s).unwrap();
            prop_assert!((a - pair_count_auc(&s)).abs() < 1e-12);
            prop_assert!((a - trapezoid_auc(&roc_points(&s).unwrap())).abs() < 1e-12);
        }

        #[test]
        fn auc_and_ap_invariant_under_monotone_transform(
            raw in prop::collection::vec((-3.0f64..3.0, 0u8..2), 2..40)
        ) {
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mapped: Vec<f64> = scores.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
            let a = set(&scores, &labels);
            let b = set(&mapped, &labels);
            prop_assert_eq!(auc(&a).unwrap(), auc(&b).unwrap());
            prop_assert_eq!(average_precision(&a).unwrap(), average_precision(&b).unwrap());
        }
    }
}
