//! From-scratch classifiers used for execution profiles: k-nearest
//! neighbours, CART decision trees, and multinomial logistic regression,
//! plus stratified cross-validation and the hyperparameter grid search.
//!
//! Every tie is broken deterministically: distance ties by lower training
//! row, vote and argmax ties by the lexicographically smallest label, split
//! ties by lower feature index then lower threshold, and grid ties by family
//! order (tree, logistic, kNN) then hyperparameter index.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<String>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<String>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!("{} rows but {} labels", x.len(), y.len())));
        }
        if let Some(first) = x.first() {
            if x.iter().any(|r| r.len() != first.len()) {
                return Err(Error::invalid("rows have inconsistent dimensions"));
            }
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Distinct labels, sorted.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.y.clone();
        c.sort();
        c.dedup();
        c
    }

    pub fn class_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for label in &self.y {
            *counts.entry(label.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }
}

/// Majority label; count ties go to the lexicographically smallest label.
pub fn majority<'a>(labels: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (label, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best.map(|(l, _)| l.to_string())
}

/// Per-feature z-score standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| self.transform_row(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Tree,
    Logistic,
    Knn,
}

/// A classifier family together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Tree {
        max_depth: Option<usize>,
    },
    #[serde(rename = "logistic")]
    LogReg {
        l2_lambda: f64,
    },
    Knn {
        k: usize,
    },
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Tree { .. } => Family::Tree,
            ModelConfig::LogReg { .. } => Family::Logistic,
            ModelConfig::Knn { .. } => Family::Knn,
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelConfig::Tree { max_depth: Some(d) } => write!(f, "tree(max_depth={d})"),
            ModelConfig::Tree { max_depth: None } => write!(f, "tree(max_depth=inf)"),
            ModelConfig::LogReg { l2_lambda } => write!(f, "logistic(lambda={l2_lambda})"),
            ModelConfig::Knn { k } => write!(f, "knn(k={k})"),
        }
    }
}

/// The search grid in tie-break order.
pub fn default_grid() -> Vec<ModelConfig> {
    vec![
        ModelConfig::Tree { max_depth: Some(2) },
        ModelConfig::Tree { max_depth: Some(4) },
        ModelConfig::Tree { max_depth: Some(8) },
        ModelConfig::Tree { max_depth: None },
        ModelConfig::LogReg { l2_lambda: 0.0 },
        ModelConfig::LogReg { l2_lambda: 0.1 },
        ModelConfig::LogReg { l2_lambda: 1.0 },
        ModelConfig::Knn { k: 1 },
        ModelConfig::Knn { k: 3 },
        ModelConfig::Knn { k: 5 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        label: String,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelParams {
    Knn {
        k: usize,
        train_x: Vec<Vec<f64>>,
        train_y: Vec<String>,
    },
    LogReg {
        /// `C × d`, row-major.
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
        /// Sorted lexicographically; row `c` of `weights` belongs to `classes[c]`.
        classes: Vec<String>,
    },
    Tree {
        root: TreeNode,
    },
}

/// A fitted model as stored inside an execution profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub family: Family,
    pub hyperparams: ModelConfig,
    pub params: ModelParams,
}

impl TrainedModel {
    pub fn fit(config: ModelConfig, data: &Dataset) -> Result<Self> {
        let params = match config {
            ModelConfig::Knn { k } => fit_knn(data, k)?,
            ModelConfig::Tree { max_depth } => fit_tree(data, max_depth, 2)?,
            ModelConfig::LogReg { l2_lambda } => fit_logreg(data, l2_lambda, LOGREG_ITERATIONS, LOGREG_LEARNING_RATE)?,
        };
        Ok(Self { family: config.family(), hyperparams: config, params })
    }

    pub fn predict(&self, x: &[f64]) -> String {
        predict(&self.params, x)
    }

    /// Input dimension the model expects, if it can be determined.
    pub fn input_dim(&self) -> Option<usize> {
        match &self.params {
            ModelParams::Knn { train_x, .. } => train_x.first().map(Vec::len),
            ModelParams::LogReg { weights, .. } => weights.first().map(Vec::len),
            ModelParams::Tree { .. } => None,
        }
    }
}

pub fn predict(model: &ModelParams, x: &[f64]) -> String {
    match model {
        ModelParams::Knn { .. } => predict_knn(model, x),
        ModelParams::Tree { .. } => predict_tree(model, x),
        ModelParams::LogReg { .. } => predict_logreg(model, x),
    }
}

// ---------------------------------------------------------------- kNN

pub fn fit_knn(data: &Dataset, k: usize) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(ModelParams::Knn { k, train_x: data.x.clone(), train_y: data.y.clone() })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Majority of the `k` nearest rows (Euclidean). `k` larger than the
/// training set uses every row.
pub fn predict_knn(model: &ModelParams, x: &[f64]) -> String {
    let ModelParams::Knn { k, train_x, train_y } = model else {
        panic!("predict_knn called with a non-kNN model");
    };
    let mut order: Vec<(f64, usize)> =
        train_x.iter().enumerate().map(|(i, row)| (squared_distance(row, x), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours = order.iter().take(*k).map(|&(_, i)| train_y[i].as_str());
    majority(neighbours).expect("non-empty training set")
}

// ---------------------------------------------------------------- CART

struct LabelIndex {
    classes: Vec<String>,
    codes: Vec<usize>,
}

impl LabelIndex {
    fn new(data: &Dataset) -> Self {
        let classes = data.classes();
        let codes = data.y.iter().map(|l| classes.binary_search(l).expect("known label")).collect();
        Self { classes, codes }
    }
}

/// Split quality `Σ_k cL_k²/nL + Σ_k cR_k²/nR` as an exact fraction
/// `(num, den)`; larger is better (equivalent to smaller weighted Gini).
fn split_score(left: &[u64], right: &[u64]) -> (u128, u128) {
    let n_l: u64 = left.iter().sum();
    let n_r: u64 = right.iter().sum();
    let s_l: u128 = left.iter().map(|&c| u128::from(c) * u128::from(c)).sum();
    let s_r: u128 = right.iter().map(|&c| u128::from(c) * u128::from(c)).sum();
    (s_l * u128::from(n_r) + s_r * u128::from(n_l), u128::from(n_l) * u128::from(n_r))
}

fn better(a: (u128, u128), b: (u128, u128)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

/// Midpoint threshold that keeps `lo` on the left and `hi` on the right.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Greedy CART with Gini impurity. `max_depth = None` means unbounded.
///
/// A node becomes a leaf when it is pure, at the depth limit, smaller than
/// `min_samples_split`, or when every feature is constant. Otherwise the
/// best split is taken even if it does not reduce impurity, which lets the
/// tree solve XOR-like data.
pub fn fit_tree(data: &Dataset, max_depth: Option<usize>, min_samples_split: usize) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let labels = LabelIndex::new(data);
    let indices: Vec<usize> = (0..data.len()).collect();
    let root = grow(data, &labels, &indices, 0, max_depth, min_samples_split.max(2));
    Ok(ModelParams::Tree { root })
}

fn grow(
    data: &Dataset,
    labels: &LabelIndex,
    indices: &[usize],
    depth: usize,
    max_depth: Option<usize>,
    min_samples_split: usize,
) -> TreeNode {
    let mut counts = vec![0u64; labels.classes.len()];
    for &i in indices {
        counts[labels.codes[i]] += 1;
    }
    let leaf = || TreeNode::Leaf {
        label: majority(indices.iter().map(|&i| data.y[i].as_str())).expect("non-empty node"),
    };
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if pure || max_depth.is_some_and(|m| depth >= m) || indices.len() < min_samples_split {
        return leaf();
    }

    let mut best: Option<(usize, f64, (u128, u128))> = None;
    for feature in 0..data.dim() {
        let mut sorted = indices.to_vec();
        sorted.sort_by(|&a, &b| data.x[a][feature].total_cmp(&data.x[b][feature]));
        let mut left = vec![0u64; counts.len()];
        for pos in 0..sorted.len() - 1 {
            left[labels.codes[sorted[pos]]] += 1;
            let lo = data.x[sorted[pos]][feature];
            let hi = data.x[sorted[pos + 1]][feature];
            if lo == hi {
                continue;
            }
            let right: Vec<u64> = counts.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = split_score(&left, &right);
            if best.as_ref().is_none_or(|(_, _, s)| better(score, *s)) {
                best = Some((feature, midpoint(lo, hi), score));
            }
        }
    }

    let Some((feature, threshold, _)) = best else {
        return leaf();
    };
    let (left, right): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| data.x[i][feature] <= threshold);
    TreeNode::Split {
        feature,
        threshold,
        left: Box::new(grow(data, labels, &left, depth + 1, max_depth, min_samples_split)),
        right: Box::new(grow(data, labels, &right, depth + 1, max_depth, min_samples_split)),
    }
}

pub fn predict_tree(model: &ModelParams, x: &[f64]) -> String {
    let ModelParams::Tree { root } = model else {
        panic!("predict_tree called with a non-tree model");
    };
    let mut node = root;
    loop {
        match node {
            TreeNode::Leaf { label } => return label.clone(),
            TreeNode::Split { feature, threshold, left, right } => {
                node = if x.get(*feature).copied().unwrap_or(0.0) <= *threshold { left } else { right };
            }
        }
    }
}

// ------------------------------------------------------ logistic regression

pub const LOGREG_ITERATIONS: usize = 500;
pub const LOGREG_LEARNING_RATE: f64 = 0.1;

/// Softmax-regression parameters: `weights` is `C × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl SoftmaxParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { weights: vec![vec![0.0; dim]; classes], biases: vec![0.0; classes] }
    }
}

fn scores(params: &SoftmaxParams, x: &[f64]) -> Vec<f64> {
    params
        .weights
        .iter()
        .zip(&params.biases)
        .map(|(w, b)| b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy plus `(λ/2)·‖W‖²` (biases unregularized) and its
/// analytic gradient. `targets[i]` is the class index of row `i`.
pub fn loss_and_gradient(
    params: &SoftmaxParams,
    x: &[Vec<f64>],
    targets: &[usize],
    l2_lambda: f64,
) -> (f64, SoftmaxParams) {
    let n = x.len() as f64;
    let classes = params.biases.len();
    let dim = params.weights.first().map_or(0, Vec::len);
    let mut grad = SoftmaxParams::zeros(classes, dim);
    let mut loss = 0.0;
    for (row, &target) in x.iter().zip(targets) {
        let z = scores(params, row);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_sum - z[target];
        let p = softmax(&z);
        for c in 0..classes {
            let err = p[c] - if c == target { 1.0 } else { 0.0 };
            grad.biases[c] += err / n;
            for (g, xi) in grad.weights[c].iter_mut().zip(row) {
                *g += err * xi / n;
            }
        }
    }
    loss /= n;
    let mut norm = 0.0;
    for (gw, w) in grad.weights.iter_mut().zip(&params.weights) {
        for (g, wi) in gw.iter_mut().zip(w) {
            *g += l2_lambda * wi;
            norm += wi * wi;
        }
    }
    (loss + 0.5 * l2_lambda * norm, grad)
}

/// Full-batch gradient descent from zero; returns the model and the loss at
/// every iterate (`iterations + 1` values).
pub fn fit_logreg_with_trace(
    data: &Dataset,
    l2_lambda: f64,
    iterations: usize,
    learning_rate: f64,
) -> Result<(ModelParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let classes = data.classes();
    if data.len() < classes.len() {
        return Err(Error::invalid("fewer samples than classes"));
    }
    let targets: Vec<usize> = data.y.iter().map(|l| classes.binary_search(l).expect("known label")).collect();
    let mut params = SoftmaxParams::zeros(classes.len(), data.dim());
    let mut trace = Vec::with_capacity(iterations + 1);
    for step in 0..=iterations {
        let (loss, grad) = loss_and_gradient(&params, &data.x, &targets, l2_lambda);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        trace.push(loss);
        if step == iterations {
            break;
        }
        for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= learning_rate * gi;
            }
        }
        for (b, g) in params.biases.iter_mut().zip(&grad.biases) {
            *b -= learning_rate * g;
        }
    }
    Ok((ModelParams::LogReg { weights: params.weights, biases: params.biases, classes }, trace))
}

pub fn fit_logreg(data: &Dataset, l2_lambda: f64, iterations: usize, learning_rate: f64) -> Result<ModelParams> {
    fit_logreg_with_trace(data, l2_lambda, iterations, learning_rate).map(|(m, _)| m)
}

pub fn predict_logreg(model: &ModelParams, x: &[f64]) -> String {
    let ModelParams::LogReg { weights, biases, classes } = model else {
        panic!("predict_logreg called with a non-logistic model");
    };
    let params = SoftmaxParams { weights: weights.clone(), biases: biases.clone() };
    let z = scores(&params, x);
    let mut best = 0;
    for (c, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = c;
        }
    }
    classes[best].clone()
}

// ------------------------------------------------------ model selection

/// Stratified folds as lists of held-out row indices.
///
/// Rows of each class (classes in sorted order, rows ascending) are shuffled
/// with one SplitMix64 stream seeded by `seed`, then dealt round-robin with
/// a position counter that carries over between classes.
pub fn stratified_folds(y: &[String], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in y.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = vec![Vec::new(); folds];
    let mut position = 0;
    for rows in by_class.values_mut() {
        rng.shuffle(rows);
        for &row in rows.iter() {
            out[position % folds].push(row);
            position += 1;
        }
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    out
}

/// Fold plan for `requested` folds: reduced to the smallest class count,
/// and leave-one-out when that drops below 2.
pub fn plan_folds(y: &[String], requested: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in y {
        *counts.entry(l).or_insert(0) += 1;
    }
    let smallest = counts.values().copied().min().unwrap_or(0);
    let k = requested.min(smallest);
    if k >= 2 {
        stratified_folds(y, k, seed)
    } else {
        (0..y.len()).map(|i| vec![i]).collect()
    }
}

/// Mean held-out accuracy over the fold plan. Features are standardized
/// with statistics of each training split only.
pub fn cross_validate(config: ModelConfig, data: &Dataset, folds: usize, seed: u64) -> Result<f64> {
    if data.classes().len() < 2 {
        return Err(Error::DegenerateData);
    }
    let plan = plan_folds(&data.y, folds.max(2), seed);
    evaluate_plan(config, data, &plan)
}

fn evaluate_plan(config: ModelConfig, data: &Dataset, plan: &[Vec<usize>]) -> Result<f64> {
    let mut in_test = vec![usize::MAX; data.len()];
    for (f, fold) in plan.iter().enumerate() {
        for &i in fold {
            in_test[i] = f;
        }
    }
    let mut total = 0.0;
    for (f, fold) in plan.iter().enumerate() {
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| in_test[i] != f).collect();
        let train = data.subset(&train_idx);
        let scaler = Standardizer::fit(&train.x);
        let scaled = Dataset { x: scaler.transform(&train.x), y: train.y };
        let model = TrainedModel::fit(config, &scaled)?;
        let correct = fold.iter().filter(|&&i| model.predict(&scaler.transform_row(&data.x[i])) == data.y[i]).count();
        total += correct as f64 / fold.len() as f64;
    }
    Ok(total / plan.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub config: ModelConfig,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: ModelConfig,
    pub accuracy: f64,
    pub entries: Vec<GridEntry>,
}

/// Evaluates every configuration of [`default_grid`] on the same fold plan
/// and picks the highest mean accuracy; earlier grid entries win ties. A
/// configuration whose fit fails scores 0.
pub fn grid_search(data: &Dataset, folds: usize, seed: u64) -> Result<GridResult> {
    if data.classes().len() < 2 {
        return Err(Error::DegenerateData);
    }
    let plan = plan_folds(&data.y, folds.max(2), seed);
    let mut entries = Vec::new();
    for config in default_grid() {
        let entry = match evaluate_plan(config, data, &plan) {
            Ok(accuracy) => GridEntry { config, accuracy, error: None },
            Err(e) => {
                tracing::warn!("grid configuration {config} failed: {e}");
                GridEntry { config, accuracy: 0.0, error: Some(e.to_string()) }
            }
        };
        entries.push(entry);
    }
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.accuracy.partial_cmp(&entries[best].accuracy) == Some(Ordering::Greater) {
            best = i;
        }
    }
    Ok(GridResult { best: entries[best].config, accuracy: entries[best].accuracy, entries })
}
