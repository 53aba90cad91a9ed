//! Histogram gradient boosting for binary classification, with exact
//! interventional Shapley attributions.
//!
//! Trees are grown best-first (leaf-wise) by default; breadth-first growth
//! is available through [`Growth::DepthWise`]. Missing values are `NaN` and
//! follow a per-split default direction learned during training.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Missing-value sentinel.
pub const MISSING: f64 = f64::NAN;

/// Widest model accepted by [`exact_shap`].
pub const MAX_SHAP_FEATURES: usize = 12;

/// Dense row-major feature table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    n_rows: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = names.len();
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::Schema(format!(
                    "row {i} has {} values for {n_cols} columns",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(names, rows.len(), data)
    }

    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        if let Some(c) = columns.iter().find(|c| c.len() != n_rows) {
            return Err(Error::Schema(format!(
                "column lengths differ ({} vs {n_rows})",
                c.len()
            )));
        }
        let mut data = Vec::with_capacity(n_rows * columns.len());
        for i in 0..n_rows {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self::from_row_major(names, n_rows, data)
    }

    fn from_row_major(names: Vec<String>, n_rows: usize, data: Vec<f64>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate column name {n}")));
            }
        }
        if let Some(v) = data.iter().find(|v| v.is_infinite()) {
            return Err(Error::Validation(format!("feature values must be finite or missing, got {v}")));
        }
        Ok(Self { names, n_rows, data })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            names: self.names.clone(),
            n_rows: rows.len(),
            data,
        }
    }

    /// Columns reordered to `schema`. The column sets must match exactly.
    pub fn align_to(&self, schema: &[String]) -> Result<Self> {
        if let Some(extra) = self.names.iter().find(|n| !schema.contains(n)) {
            return Err(Error::Schema(format!(
                "unknown feature column {extra}; model expects [{}]",
                schema.join(", ")
            )));
        }
        let idx = schema
            .iter()
            .map(|s| {
                self.column_index(s).ok_or_else(|| {
                    Error::Schema(format!("missing feature column {s}; got [{}]", self.names.join(", ")))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.n_rows {
            data.extend(idx.iter().map(|&j| self.get(i, j)));
        }
        Ok(Self {
            names: schema.to_vec(),
            n_rows: self.n_rows,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// Always split the leaf with the largest gain.
    LeafWise,
    /// Split leaves in breadth-first order.
    DepthWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub n_bins: usize,
    pub lambda_l2: f64,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
    pub growth: Growth,
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            learning_rate: 0.05,
            max_leaves: 15,
            min_samples_leaf: 20,
            n_bins: 64,
            lambda_l2: 1.0,
            subsample: 1.0,
            growth: Growth::LeafWise,
            seed: 0,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.max_leaves < 2 {
            return bad("max_leaves", "must be at least 2");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf", "must be positive");
        }
        if self.n_bins < 2 || self.n_bins > u16::MAX as usize - 1 {
            return bad("n_bins", "must lie in [2, 65534]");
        }
        if !(self.lambda_l2 >= 0.0) {
            return bad("lambda_l2", "must be non-negative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample", "must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Per-feature split thresholds. A value goes left at bin `b` when
/// `v <= thresholds[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    thresholds: Vec<Vec<f64>>,
}

const MISSING_BIN: u16 = u16::MAX;

impl Binning {
    /// With at most `n_bins` distinct values, thresholds sit midway between
    /// consecutive distinct values; otherwise at distinct sample quantiles.
    pub fn fit(x: &FeatureMatrix, n_bins: usize) -> Self {
        let thresholds = (0..x.n_cols())
            .map(|j| {
                let mut v: Vec<f64> = x.column(j).into_iter().filter(|v| !v.is_nan()).collect();
                v.sort_by(f64::total_cmp);
                let mut distinct = v.clone();
                distinct.dedup();
                if distinct.len() <= n_bins {
                    distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
                } else {
                    let mut t: Vec<f64> = (1..n_bins).map(|k| v[k * v.len() / n_bins]).collect();
                    t.dedup();
                    let max = *distinct.last().expect("non-empty");
                    t.retain(|&q| q < max);
                    t
                }
            })
            .collect();
        Self { thresholds }
    }

    pub fn thresholds(&self, feature: usize) -> &[f64] {
        &self.thresholds[feature]
    }

    fn bin(&self, feature: usize, v: f64) -> u16 {
        if v.is_nan() {
            MISSING_BIN
        } else {
            self.thresholds[feature].partition_point(|&t| t < v) as u16
        }
    }
}

/// Column-major binned copy of a feature matrix.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    binning: Binning,
    n_rows: usize,
    bins: Vec<u16>,
}

impl BinnedMatrix {
    pub fn new(x: &FeatureMatrix, binning: Binning) -> Self {
        let n = x.n_rows();
        let mut bins = Vec::with_capacity(n * x.n_cols());
        for j in 0..x.n_cols() {
            bins.extend((0..n).map(|i| binning.bin(j, x.get(i, j))));
        }
        Self {
            binning,
            n_rows: n,
            bins,
        }
    }

    fn n_features(&self) -> usize {
        self.binning.thresholds.len()
    }

    fn bin(&self, row: usize, feature: usize) -> u16 {
        self.bins[feature * self.n_rows + row]
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }
}

/// Best split found for a set of rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    /// Rows with bin `<= bin` go left.
    pub bin: usize,
    pub threshold: f64,
    pub default_left: bool,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stat {
    g: f64,
    h: f64,
    n: usize,
}

impl Stat {
    fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1;
    }

    fn plus(self, o: Stat) -> Stat {
        Stat {
            g: self.g + o.g,
            h: self.h + o.h,
            n: self.n + o.n,
        }
    }

    fn minus(self, o: Stat) -> Stat {
        Stat {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }

    fn score(self, lambda: f64) -> f64 {
        self.g * self.g / (self.h + lambda)
    }
}

/// `0.5 * [GL^2/(HL+l) + GR^2/(HR+l) - G^2/(H+l)]`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr).powi(2) / (hl + hr + lambda))
}

/// Histogram search for the highest-gain split over `rows`. Ties keep the
/// first candidate in (feature, bin, missing-right-then-left) order.
pub fn best_split(
    data: &BinnedMatrix,
    rows: &[usize],
    g: &[f64],
    h: &[f64],
    min_samples_leaf: usize,
    lambda: f64,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for f in 0..data.n_features() {
        let nb = data.binning.thresholds[f].len();
        if nb == 0 {
            continue;
        }
        let mut hist = vec![Stat::default(); nb + 1];
        let mut missing = Stat::default();
        for &r in rows {
            match data.bin(r, f) {
                MISSING_BIN => missing.add(g[r], h[r]),
                b => hist[b as usize].add(g[r], h[r]),
            }
        }
        let present = hist.iter().fold(Stat::default(), |a, &s| a.plus(s));
        let mut left = Stat::default();
        for (b, &bin_stat) in hist.iter().enumerate().take(nb) {
            left = left.plus(bin_stat);
            let right = present.minus(left);
            for default_left in [false, true] {
                let (l, r) = if default_left {
                    (left.plus(missing), right)
                } else {
                    (left, right.plus(missing))
                };
                if l.n < min_samples_leaf || r.n < min_samples_leaf {
                    continue;
                }
                let gain = 0.5 * (l.score(lambda) + r.score(lambda) - l.plus(r).score(lambda));
                if best.is_none_or(|c| gain > c.gain) {
                    best = Some(SplitCandidate {
                        feature: f,
                        bin: b,
                        threshold: data.binning.thresholds[f][b],
                        default_left,
                        gain,
                    });
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Output for a row in schema column order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v <= *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub feature_names: Vec<String>,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub config: GbmConfig,
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// Mean logistic loss of margins against labels.
pub fn logistic_loss(margins: &[f64], y: &[u8]) -> f64 {
    margins
        .iter()
        .zip(y)
        .map(|(&m, &l)| {
            let sp = |t: f64| t.max(0.0) + (-t.abs()).exp().ln_1p();
            if l == 1 {
                sp(-m)
            } else {
                sp(m)
            }
        })
        .sum::<f64>()
        / margins.len() as f64
}

struct PendingLeaf {
    node: usize,
    rows: Vec<usize>,
    split: Option<SplitCandidate>,
}

fn leaf_value(rows: &[usize], g: &[f64], h: &[f64], cfg: &GbmConfig) -> f64 {
    let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + g[r], b + h[r]));
    -gs / (hs + cfg.lambda_l2) * cfg.learning_rate
}

fn grow_tree(data: &BinnedMatrix, rows: Vec<usize>, g: &[f64], h: &[f64], cfg: &GbmConfig) -> Tree {
    let find = |rows: &[usize]| {
        best_split(data, rows, g, h, cfg.min_samples_leaf, cfg.lambda_l2).filter(|s| s.gain > 0.0)
    };
    let mut nodes = vec![TreeNode::Leaf {
        value: leaf_value(&rows, g, h, cfg),
    }];
    let split = find(&rows);
    let mut open = VecDeque::from([PendingLeaf { node: 0, rows, split }]);
    let mut n_leaves = 1;
    while n_leaves < cfg.max_leaves {
        let pick = match cfg.growth {
            Growth::DepthWise => open.iter().position(|l| l.split.is_some()),
            Growth::LeafWise => {
                let mut best: Option<(usize, f64)> = None;
                for (i, l) in open.iter().enumerate() {
                    if let Some(s) = l.split {
                        if best.is_none_or(|(_, g)| s.gain > g) {
                            best = Some((i, s.gain));
                        }
                    }
                }
                best.map(|(i, _)| i)
            }
        };
        let Some(i) = pick else { break };
        let leaf = open.remove(i).expect("index from iteration");
        let s = leaf.split.expect("picked leaves have a split");
        let (lrows, rrows): (Vec<usize>, Vec<usize>) = leaf.rows.iter().partition(|&&r| match data.bin(r, s.feature) {
            MISSING_BIN => s.default_left,
            b => (b as usize) <= s.bin,
        });
        let li = nodes.len();
        nodes.push(TreeNode::Leaf {
            value: leaf_value(&lrows, g, h, cfg),
        });
        nodes.push(TreeNode::Leaf {
            value: leaf_value(&rrows, g, h, cfg),
        });
        nodes[leaf.node] = TreeNode::Split {
            feature: s.feature,
            threshold: s.threshold,
            default_left: s.default_left,
            left: li,
            right: li + 1,
        };
        n_leaves += 1;
        for (node, rows) in [(li, lrows), (li + 1, rrows)] {
            let split = find(&rows);
            open.push_back(PendingLeaf { node, rows, split });
        }
    }
    Tree { nodes }
}

/// Fit a boosted ensemble on `x` with binary labels `y`.
pub fn fit_gbm(x: &FeatureMatrix, y: &[u8], cfg: &GbmConfig) -> Result<GbmModel> {
    cfg.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::Validation(format!(
            "{} rows but {} labels",
            x.n_rows(),
            y.len()
        )));
    }
    if let Some(l) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("labels must be 0 or 1, got {l}")));
    }
    let pos = y.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Validation("gbm training needs both classes".into()));
    }
    if x.n_rows() < 2 * cfg.min_samples_leaf {
        return Err(Error::Validation(format!(
            "gbm training needs at least 2 * min_samples_leaf = {} rows, got {}",
            2 * cfg.min_samples_leaf,
            x.n_rows()
        )));
    }
    let n = x.n_rows();
    let p_bar = pos as f64 / n as f64;
    let base_score = (p_bar / (1.0 - p_bar)).ln();
    let data = BinnedMatrix::new(x, Binning::fit(x, cfg.n_bins));
    let mut margin = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            g[i] = p - y[i] as f64;
            h[i] = p * (1.0 - p);
        }
        let rows: Vec<usize> = if cfg.subsample < 1.0 {
            let mut rng = rng_for(cfg.seed, t as u64);
            let k = ((n as f64 * cfg.subsample).round() as usize).max(2 * cfg.min_samples_leaf).min(n);
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..n).collect()
        };
        let tree = grow_tree(&data, rows, &g, &h, cfg);
        for (i, m) in margin.iter_mut().enumerate() {
            *m += tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Ok(GbmModel {
        feature_names: x.names().to_vec(),
        base_score,
        trees,
        config: cfg.clone(),
    })
}

impl GbmModel {
    /// Margin of one row given in schema column order.
    pub fn margin_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict_margin(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let x = x.align_to(&self.feature_names)?;
        Ok((0..x.n_rows()).map(|i| self.margin_row(x.row(i))).collect())
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    /// A copy keeping only the first `n` trees.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        let n = m.feature_names.len();
        for t in &m.trees {
            for node in &t.nodes {
                match node {
                    TreeNode::Split { feature, left, right, .. }
                        if *feature >= n || *left >= t.nodes.len() || *right >= t.nodes.len() =>
                    {
                        return Err(Error::Load("tree references a missing node or feature".into()));
                    }
                    TreeNode::Leaf { value } if !value.is_finite() => {
                        return Err(Error::Load("non-finite leaf value".into()));
                    }
                    _ => {}
                }
            }
        }
        Ok(m)
    }
}

/// Adds `value` into `acc[S]` for every subset `S` containing all of
/// `inside` and none of `outside`.
fn add_to_consistent(acc: &mut [f64], inside: u32, outside: u32, value: f64, n: usize) {
    let free = ((1u32 << n) - 1) & !inside & !outside;
    // Enumerate subsets of `free`.
    let mut sub = free;
    loop {
        acc[(inside | sub) as usize] += value;
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & free;
    }
}

fn hybrid_walk(tree: &Tree, node: usize, x: &[f64], b: &[f64], inside: u32, outside: u32, acc: &mut [f64], n: usize) {
    match &tree.nodes[node] {
        TreeNode::Leaf { value } => add_to_consistent(acc, inside, outside, *value, n),
        TreeNode::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
        } => {
            let route = |v: f64| {
                if if v.is_nan() { *default_left } else { v <= *threshold } {
                    *left
                } else {
                    *right
                }
            };
            let (rx, rb) = (route(x[*feature]), route(b[*feature]));
            let bit = 1u32 << feature;
            if rx == rb {
                hybrid_walk(tree, rx, x, b, inside, outside, acc, n);
                return;
            }
            // Feature already fixed higher up the path keeps its side.
            if inside & bit == 0 {
                hybrid_walk(tree, rb, x, b, inside, outside | bit, acc, n);
            }
            if outside & bit == 0 {
                hybrid_walk(tree, rx, x, b, inside | bit, outside, acc, n);
            }
        }
    }
}

/// `v(S)` for every feature subset `S` (bitmask index): the mean margin over
/// background rows with the features in `S` set to the values of `x`.
pub fn coalition_values(model: &GbmModel, x: &[f64], background: &FeatureMatrix) -> Result<Vec<f64>> {
    let n = model.feature_names.len();
    if n > MAX_SHAP_FEATURES {
        return Err(Error::Validation(format!(
            "exact SHAP enumerates 2^n coalitions and is limited to {MAX_SHAP_FEATURES} features, model has {n}; \
             use a feature subset"
        )));
    }
    if x.len() != n {
        return Err(Error::Schema(format!("row has {} values, model expects {n}", x.len())));
    }
    let bg = background.align_to(&model.feature_names)?;
    if bg.n_rows() == 0 {
        return Err(Error::Validation("exact SHAP needs a non-empty background set".into()));
    }
    let mut acc = vec![0.0; 1 << n];
    for r in 0..bg.n_rows() {
        for t in &model.trees {
            hybrid_walk(t, 0, x, bg.row(r), 0, 0, &mut acc, n);
        }
    }
    let scale = 1.0 / bg.n_rows() as f64;
    Ok(acc.into_iter().map(|v| model.base_score + v * scale).collect())
}

/// Exact interventional Shapley values of one row (schema column order).
/// `sum(phi) + v(empty) == margin(x)`.
pub fn exact_shap(model: &GbmModel, x: &[f64], background: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(exact_shap_with_base(model, x, background)?.1)
}

/// `(v(empty), phi)`: the background expectation of the margin together
/// with the Shapley values of `x`.
pub fn exact_shap_with_base(model: &GbmModel, x: &[f64], background: &FeatureMatrix) -> Result<(f64, Vec<f64>)> {
    let v = coalition_values(model, x, background)?;
    let n = model.feature_names.len();
    let fact: Vec<f64> = (0..=n).scan(1.0, |f, k| {
        let out = *f;
        *f *= (k + 1) as f64;
        Some(out)
    }).collect();
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let phi = (0..n)
        .map(|j| {
            let bit = 1usize << j;
            (0..1usize << n)
                .filter(|s| s & bit == 0)
                .map(|s| weight[s.count_ones() as usize] * (v[s | bit] - v[s]))
                .sum()
        })
        .collect();
    Ok((v[0], phi))
}

/// Mean |phi_j| over the rows of `x`, in schema column order.
pub fn mean_abs_shap(model: &GbmModel, x: &FeatureMatrix, background: &FeatureMatrix) -> Result<Vec<f64>> {
    let x = x.align_to(&model.feature_names)?;
    if x.n_rows() == 0 {
        return Err(Error::Validation("mean_abs_shap over zero rows".into()));
    }
    let mut total = vec![0.0; x.n_cols()];
    for i in 0..x.n_rows() {
        for (t, p) in total.iter_mut().zip(exact_shap(model, x.row(i), background)?) {
            *t += p.abs();
        }
    }
    Ok(total.into_iter().map(|t| t / x.n_rows() as f64).collect())
}
