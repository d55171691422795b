//! Prediction rules fitted on the leading `d` score coordinates, and inner
//! cross-validated selection among a candidate list.
//!
//! A fitted [`Predictor`] only ever reads its first `d` input columns.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CenterScale, Response};
use crate::error::{PodError, Result};
use crate::losses::{mean, Loss, Predictions};
use crate::numerics::ols_solve;
use crate::rng::{derive_seed, permutation, rng_from_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LearnerSpec {
    /// Constant rule: mean response or class frequencies.
    Mean,
    Ols { ridge: f64 },
    /// `k = None` uses `⌈n^0.4⌉` for the training size `n`.
    Knn { k: Option<usize> },
    Tree { max_depth: usize, min_leaf: usize },
    Mlp {
        hidden: usize,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    },
}

impl LearnerSpec {
    pub const DEFAULT_TREE: LearnerSpec = LearnerSpec::Tree {
        max_depth: 4,
        min_leaf: 10,
    };
    pub const DEFAULT_MLP: LearnerSpec = LearnerSpec::Mlp {
        hidden: 5,
        epochs: 500,
        learning_rate: 0.05,
        seed: 0,
    };

    /// Same spec with the stochastic seed replaced; a no-op for deterministic
    /// learners.
    pub fn with_seed(self, new_seed: u64) -> Self {
        match self {
            LearnerSpec::Mlp {
                hidden,
                epochs,
                learning_rate,
                ..
            } => LearnerSpec::Mlp {
                hidden,
                epochs,
                learning_rate,
                seed: new_seed,
            },
            other => other,
        }
    }

    /// Default candidate list for a loss.
    pub fn default_candidates(loss: &Loss) -> Vec<LearnerSpec> {
        if loss.is_classification() {
            vec![LearnerSpec::Knn { k: None }, LearnerSpec::DEFAULT_TREE]
        } else {
            vec![
                LearnerSpec::Ols { ridge: 0.0 },
                LearnerSpec::DEFAULT_TREE,
                LearnerSpec::Knn { k: None },
            ]
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<LearnerSpec>> {
        let list: Vec<LearnerSpec> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(PodError::Config("empty learner list".into()));
        }
        Ok(list)
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::Mean => write!(f, "mean"),
            LearnerSpec::Ols { ridge } if *ridge == 0.0 => write!(f, "ols"),
            LearnerSpec::Ols { ridge } => write!(f, "ols:{ridge}"),
            LearnerSpec::Knn { k: None } => write!(f, "knn"),
            LearnerSpec::Knn { k: Some(k) } => write!(f, "knn:{k}"),
            LearnerSpec::Tree {
                max_depth,
                min_leaf,
            } => write!(f, "tree:{max_depth}:{min_leaf}"),
            LearnerSpec::Mlp {
                hidden,
                epochs,
                learning_rate,
                ..
            } => write!(f, "mlp:{hidden}:{epochs}:{learning_rate}"),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = PodError;

    /// `mean`, `ols[:ridge]`, `knn[:k]`, `tree[:depth[:min_leaf]]`,
    /// `mlp[:hidden[:epochs[:lr]]]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || PodError::Config(format!("cannot parse learner {s:?}"));
        let arg = |i: usize| parts.get(i).copied();
        fn num<T: FromStr>(v: Option<&str>, default: T, bad: impl Fn() -> PodError) -> Result<T> {
            v.map_or(Ok(default), |t| t.parse().map_err(|_| bad()))
        }
        let max_args = match parts[0] {
            "mean" => 1,
            "ols" | "knn" => 2,
            "tree" => 3,
            "mlp" => 4,
            other => {
                return Err(PodError::Config(format!(
                    "unknown learner {other:?} (expected mean, ols, knn, tree or mlp)"
                )))
            }
        };
        if parts.len() > max_args {
            return Err(bad());
        }
        let spec = match parts[0] {
            "mean" => LearnerSpec::Mean,
            "ols" => LearnerSpec::Ols {
                ridge: num(arg(1), 0.0, bad)?,
            },
            "knn" => LearnerSpec::Knn {
                k: arg(1).map(|t| t.parse().map_err(|_| bad())).transpose()?,
            },
            "tree" => LearnerSpec::Tree {
                max_depth: num(arg(1), 4, bad)?,
                min_leaf: num(arg(2), 10, bad)?,
            },
            _ => LearnerSpec::Mlp {
                hidden: num(arg(1), 5, bad)?,
                epochs: num(arg(2), 500, bad)?,
                learning_rate: num(arg(3), 0.05, bad)?,
                seed: 0,
            },
        };
        match spec {
            LearnerSpec::Knn { k: Some(0) }
            | LearnerSpec::Tree { min_leaf: 0, .. }
            | LearnerSpec::Mlp { hidden: 0, .. } => Err(bad()),
            LearnerSpec::Ols { ridge } if !(ridge >= 0.0) => Err(bad()),
            _ => Ok(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Regression { outputs: usize },
    Classification { classes: usize },
}

/// Training targets in the form the learners consume.
#[derive(Debug, Clone, PartialEq)]
enum Targets {
    Real(Array2<f64>),
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    fn new(y: &Response, loss: &Loss) -> Result<Self> {
        loss.check_response(y)?;
        Ok(match y {
            Response::Continuous(m) => Targets::Real(m.clone()),
            Response::Categorical { labels, classes } => Targets::Labels {
                labels: labels.clone(),
                classes: *classes,
            },
        })
    }

    fn task(&self) -> Task {
        match self {
            Targets::Real(m) => Task::Regression { outputs: m.ncols() },
            Targets::Labels { classes, .. } => Task::Classification { classes: *classes },
        }
    }

    fn len(&self) -> usize {
        match self {
            Targets::Real(m) => m.nrows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }
}

/// A leaf / constant output: a mean vector, or class counts.
#[derive(Debug, Clone, PartialEq)]
enum Output {
    Mean(Array1<f64>),
    Class { label: usize, probabilities: Array1<f64> },
}

impl Output {
    fn from_rows(targets: &Targets, rows: impl Iterator<Item = usize> + Clone) -> Output {
        match targets {
            Targets::Real(m) => {
                let mut acc = Array1::<f64>::zeros(m.ncols());
                let mut count = 0usize;
                for i in rows {
                    acc += &m.row(i);
                    count += 1;
                }
                Output::Mean(acc / count.max(1) as f64)
            }
            Targets::Labels { labels, classes } => {
                let mut counts = vec![0usize; *classes];
                for i in rows {
                    counts[labels[i]] += 1;
                }
                Output::from_counts(&counts)
            }
        }
    }

    /// Majority label (ties to the lowest class) with Laplace-smoothed
    /// frequencies `(c + 1) / (n + M)`.
    fn from_counts(counts: &[usize]) -> Output {
        let total: usize = counts.iter().sum();
        let m = counts.len();
        let mut label = 0;
        for (c, &v) in counts.iter().enumerate() {
            if v > counts[label] {
                label = c;
            }
        }
        let probabilities = counts
            .iter()
            .map(|&c| (c as f64 + 1.0) / (total + m) as f64)
            .collect();
        Output::Class {
            label,
            probabilities,
        }
    }
}

fn collect_outputs(task: Task, outputs: Vec<Output>) -> Predictions {
    let n = outputs.len();
    match task {
        Task::Regression { outputs: q } => {
            let mut m = Array2::zeros((n, q));
            for (i, o) in outputs.into_iter().enumerate() {
                if let Output::Mean(v) = o {
                    m.row_mut(i).assign(&v);
                }
            }
            Predictions::Continuous(m)
        }
        Task::Classification { classes } => {
            let mut labels = Vec::with_capacity(n);
            let mut probabilities = Array2::zeros((n, classes));
            for (i, o) in outputs.into_iter().enumerate() {
                if let Output::Class {
                    label,
                    probabilities: p,
                } = o
                {
                    labels.push(label);
                    probabilities.row_mut(i).assign(&p);
                }
            }
            Predictions::Classes {
                labels,
                probabilities,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Constant(Output),
    Linear { coef: Array2<f64> },
    Knn(KnnModel),
    Tree(Vec<TreeNode>),
    Mlp(MlpModel),
}

/// A fitted prediction rule that reads only the first `d` score columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    spec: LearnerSpec,
    d: usize,
    task: Task,
    scaling: Option<CenterScale>,
    model: Model,
}

impl Predictor {
    pub fn spec(&self) -> LearnerSpec {
        self.spec
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn predict(&self, r: &Array2<f64>) -> Result<Predictions> {
        if r.ncols() < self.d {
            return Err(PodError::Dimension(format!(
                "predictor uses {} coordinates, input has {}",
                self.d,
                r.ncols()
            )));
        }
        let n = r.nrows();
        if let Model::Constant(out) = &self.model {
            return Ok(collect_outputs(self.task, vec![out.clone(); n]));
        }
        let mut x = r.slice(s![.., ..self.d]).to_owned();
        if let Some(cs) = &self.scaling {
            x = cs.apply(&x);
        }
        Ok(match &self.model {
            Model::Constant(_) => unreachable!("handled above"),
            Model::Linear { coef } => {
                let raw = with_intercept(&x).dot(coef);
                match self.task {
                    Task::Regression { .. } => Predictions::Continuous(raw),
                    Task::Classification { classes } => linear_probabilities(raw, classes),
                }
            }
            Model::Knn(knn) => collect_outputs(self.task, knn.predict(&x)),
            Model::Tree(nodes) => collect_outputs(
                self.task,
                x.axis_iter(Axis(0)).map(|row| tree_predict(nodes, row)).collect(),
            ),
            Model::Mlp(net) => net.predict(&x, self.task),
        })
    }
}

/// Fits `spec` on the first `d` columns of `r`.
pub fn fit(spec: &LearnerSpec, r: &Array2<f64>, d: usize, y: &Response, loss: &Loss) -> Result<Predictor> {
    let targets = Targets::new(y, loss)?;
    let n = targets.len();
    if n == 0 {
        return Err(PodError::Data("cannot fit a learner on zero rows".into()));
    }
    if r.nrows() != n {
        return Err(PodError::Dimension(format!(
            "{} score rows but {} responses",
            r.nrows(),
            n
        )));
    }
    if d > r.ncols() {
        return Err(PodError::Dimension(format!(
            "d = {d} exceeds the {} available coordinates",
            r.ncols()
        )));
    }
    let task = targets.task();
    let constant = |spec| Predictor {
        spec,
        d,
        task,
        scaling: None,
        model: Model::Constant(Output::from_rows(&targets, 0..n)),
    };
    if d == 0 || matches!(spec, LearnerSpec::Mean) {
        return Ok(constant(*spec));
    }
    let x = r.slice(s![.., ..d]).to_owned();
    match *spec {
        LearnerSpec::Mean => unreachable!("handled above"),
        LearnerSpec::Ols { ridge } => {
            let design = with_intercept(&x);
            let rhs = match &targets {
                Targets::Real(m) => m.clone(),
                Targets::Labels { labels, classes } => one_hot(labels, *classes),
            };
            let coef = match ols_solve(&design, &rhs, ridge) {
                Err(PodError::Singular(_)) if ridge == 0.0 => {
                    // rank-deficient scores: fall back to a tiny ridge
                    ols_solve(&design, &rhs, 1e-8 * n as f64)?
                }
                other => other?,
            };
            Ok(Predictor {
                spec: *spec,
                d,
                task,
                scaling: None,
                model: Model::Linear { coef },
            })
        }
        LearnerSpec::Knn { k } => {
            let k = k.unwrap_or_else(|| default_k(n));
            if k > n {
                return Err(PodError::Config(format!("knn with k = {k} needs at least {k} rows, got {n}")));
            }
            let cs = CenterScale::fit_lenient(&x);
            let train = cs.apply(&x);
            Ok(Predictor {
                spec: *spec,
                d,
                task,
                scaling: Some(cs),
                model: Model::Knn(KnnModel { train, targets, k }),
            })
        }
        LearnerSpec::Tree {
            max_depth,
            min_leaf,
        } => {
            if min_leaf == 0 {
                return Err(PodError::Config("tree min_leaf must be >= 1".into()));
            }
            let nodes = grow_tree(&x, &targets, max_depth, min_leaf);
            Ok(Predictor {
                spec: *spec,
                d,
                task,
                scaling: None,
                model: Model::Tree(nodes),
            })
        }
        LearnerSpec::Mlp {
            hidden,
            epochs,
            learning_rate,
            seed,
        } => {
            if hidden == 0 || !(learning_rate > 0.0) {
                return Err(PodError::Config("mlp needs hidden >= 1 and a positive learning rate".into()));
            }
            let cs = CenterScale::fit_lenient(&x);
            let xs = cs.apply(&x);
            let net = MlpModel::train(&xs, &targets, hidden, epochs, learning_rate, seed)?;
            Ok(Predictor {
                spec: *spec,
                d,
                task,
                scaling: Some(cs),
                model: Model::Mlp(net),
            })
        }
    }
}

/// `⌈n^0.4⌉`.
pub fn default_k(n: usize) -> usize {
    ((n as f64).powf(0.4).ceil() as usize).max(1)
}

impl CenterScale {
    /// Like [`CenterScale::fit`] but a single row gets unit scale instead of
    /// an error.
    fn fit_lenient(x: &Array2<f64>) -> CenterScale {
        CenterScale::fit(x).unwrap_or_else(|_| CenterScale {
            mean: x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols())),
            scale: Array1::ones(x.ncols()),
            degenerate: vec![true; x.ncols()],
        })
    }
}

fn with_intercept(x: &Array2<f64>) -> Array2<f64> {
    let mut design = Array2::ones((x.nrows(), x.ncols() + 1));
    design.slice_mut(s![.., 1..]).assign(x);
    design
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

/// Linear-probability scores clipped to `[0, 1]`, smoothed and renormalized.
fn linear_probabilities(raw: Array2<f64>, classes: usize) -> Predictions {
    let n = raw.nrows();
    let mut labels = Vec::with_capacity(n);
    let mut probabilities = Array2::zeros((n, classes));
    let eps = 1e-3;
    for (i, row) in raw.axis_iter(Axis(0)).enumerate() {
        labels.push(argmax(row));
        let clipped = row.mapv(|v| v.clamp(0.0, 1.0) + eps);
        let total = clipped.sum();
        probabilities.row_mut(i).assign(&(clipped / total));
    }
    Predictions::Classes {
        labels,
        probabilities,
    }
}

/// Index of the largest entry, ties to the lowest index.
fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
struct KnnModel {
    train: Array2<f64>,
    targets: Targets,
    k: usize,
}

impl KnnModel {
    fn predict(&self, x: &Array2<f64>) -> Vec<Output> {
        let n = self.train.nrows();
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        x.axis_iter(Axis(0))
            .map(|q| {
                dist.clear();
                for (i, t) in self.train.axis_iter(Axis(0)).enumerate() {
                    let d2: f64 = t.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    dist.push((d2, i));
                }
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if self.k < n {
                    dist.select_nth_unstable_by(self.k - 1, cmp);
                }
                let nearest = dist[..self.k].iter().map(|&(_, i)| i);
                Output::from_rows(&self.targets, nearest)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Output),
}

fn tree_predict(nodes: &[TreeNode], row: ArrayView1<'_, f64>) -> Output {
    let mut at = 0;
    loop {
        match &nodes[at] {
            TreeNode::Leaf(out) => return out.clone(),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => at = if row[*feature] <= *threshold { *left } else { *right },
        }
    }
}

fn grow_tree(x: &Array2<f64>, targets: &Targets, max_depth: usize, min_leaf: usize) -> Vec<TreeNode> {
    let mut nodes = Vec::new();
    let rows: Vec<usize> = (0..x.nrows()).collect();
    grow_node(x, targets, rows, 0, max_depth, min_leaf, &mut nodes);
    nodes
}

fn grow_node(
    x: &Array2<f64>,
    targets: &Targets,
    rows: Vec<usize>,
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let id = nodes.len();
    nodes.push(TreeNode::Leaf(Output::from_rows(targets, rows.iter().copied())));
    if depth >= max_depth || rows.len() < 2 * min_leaf {
        return id;
    }
    let Some(split) = best_split(x.view(), targets, &rows, min_leaf) else {
        return id;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| x[[i, split.feature]] <= split.threshold);
    let left = grow_node(x, targets, left_rows, depth + 1, max_depth, min_leaf, nodes);
    let right = grow_node(x, targets, right_rows, depth + 1, max_depth, min_leaf, nodes);
    nodes[id] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    id
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
}

/// Exhaustive scan over midpoints between consecutive distinct values.
/// Impurity is the within-node sum of squares (regression) or the
/// size-weighted Gini index (classification). Ties keep the lowest feature,
/// then the lowest threshold.
fn best_split(x: ArrayView2<'_, f64>, targets: &Targets, rows: &[usize], min_leaf: usize) -> Option<Split> {
    let m = rows.len();
    let parent = impurity_of(targets, rows);
    if parent <= 1e-12 {
        return None;
    }
    let mut best: Option<(f64, Split)> = None;
    let mut sorted = rows.to_vec();
    for feature in 0..x.ncols() {
        sorted.sort_by(|&a, &b| x[[a, feature]].total_cmp(&x[[b, feature]]).then(a.cmp(&b)));
        let mut scan = ImpurityScan::new(targets, &sorted);
        for i in 1..m {
            scan.move_left(sorted[i - 1]);
            if i < min_leaf || m - i < min_leaf {
                continue;
            }
            let (lo, hi) = (x[[sorted[i - 1], feature]], x[[sorted[i], feature]]);
            if lo >= hi {
                continue;
            }
            let imp = scan.impurity();
            if imp < parent - 1e-12 * parent.max(1.0) && best.is_none_or(|(b, _)| imp < b) {
                best = Some((
                    imp,
                    Split {
                        feature,
                        threshold: 0.5 * (lo + hi),
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

fn impurity_of(targets: &Targets, rows: &[usize]) -> f64 {
    let mut scan = ImpurityScan::new(targets, rows);
    for &i in rows {
        scan.move_left(i);
    }
    scan.impurity()
}

/// Running left/right sufficient statistics while rows move left.
struct ImpurityScan<'a> {
    targets: &'a Targets,
    n_left: f64,
    n_right: f64,
    sum_left: Vec<f64>,
    sum_right: Vec<f64>,
    sq_left: f64,
    sq_right: f64,
}

impl<'a> ImpurityScan<'a> {
    fn new(targets: &'a Targets, rows: &[usize]) -> Self {
        let width = match targets {
            Targets::Real(m) => m.ncols(),
            Targets::Labels { classes, .. } => *classes,
        };
        let mut sum_right = vec![0.0; width];
        let mut sq_right = 0.0;
        for &i in rows {
            match targets {
                Targets::Real(m) => {
                    for (j, v) in m.row(i).iter().enumerate() {
                        sum_right[j] += v;
                        sq_right += v * v;
                    }
                }
                Targets::Labels { labels, .. } => sum_right[labels[i]] += 1.0,
            }
        }
        Self {
            targets,
            n_left: 0.0,
            n_right: rows.len() as f64,
            sum_left: vec![0.0; width],
            sum_right,
            sq_left: 0.0,
            sq_right,
        }
    }

    fn move_left(&mut self, i: usize) {
        self.n_left += 1.0;
        self.n_right -= 1.0;
        match self.targets {
            Targets::Real(m) => {
                for (j, v) in m.row(i).iter().enumerate() {
                    self.sum_left[j] += v;
                    self.sum_right[j] -= v;
                    self.sq_left += v * v;
                    self.sq_right -= v * v;
                }
            }
            Targets::Labels { labels, .. } => {
                self.sum_left[labels[i]] += 1.0;
                self.sum_right[labels[i]] -= 1.0;
            }
        }
    }

    fn impurity(&self) -> f64 {
        let side = |n: f64, sums: &[f64], sq: f64| -> f64 {
            if n == 0.0 {
                return 0.0;
            }
            let ss: f64 = sums.iter().map(|s| s * s).sum();
            match self.targets {
                Targets::Real(_) => (sq - ss / n).max(0.0),
                // n · Gini = n − Σ c² / n
                Targets::Labels { .. } => n - ss / n,
            }
        };
        side(self.n_left, &self.sum_left, self.sq_left)
            + side(self.n_right, &self.sum_right, self.sq_right)
    }
}

/// One hidden tanh layer, trained by full-batch gradient descent on the
/// squared error (regression, standardized targets) or the softmax
/// cross-entropy (classification).
#[derive(Debug, Clone, PartialEq)]
struct MlpModel {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    target_mean: Array1<f64>,
    target_scale: Array1<f64>,
}

impl MlpModel {
    fn train(
        x: &Array2<f64>,
        targets: &Targets,
        hidden: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        let (t, outputs, mean, scale) = match targets {
            Targets::Real(m) => {
                let mean = m.mean_axis(Axis(0)).expect("n >= 1");
                let scale = m
                    .axis_iter(Axis(1))
                    .zip(mean.iter())
                    .map(|(c, mu)| {
                        let sd = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
                        if sd > 0.0 { sd } else { 1.0 }
                    })
                    .collect::<Array1<f64>>();
                ((m - &mean) / &scale, m.ncols(), mean, scale)
            }
            Targets::Labels { labels, classes } => (
                one_hot(labels, *classes),
                *classes,
                Array1::zeros(*classes),
                Array1::ones(*classes),
            ),
        };
        let classify = matches!(targets, Targets::Labels { .. });
        let mut rng = rng_from_seed(seed);
        let mut init = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() - 0.5)
        };
        let mut w1 = init(d, hidden);
        let mut b1 = init(1, hidden).remove_axis(Axis(0));
        let mut w2 = init(hidden, outputs);
        let mut b2 = init(1, outputs).remove_axis(Axis(0));
        let inv_n = 1.0 / n as f64;
        for _ in 0..epochs {
            let h = (x.dot(&w1) + &b1).mapv(f64::tanh);
            let out = h.dot(&w2) + &b2;
            let grad_out = if classify {
                (softmax_rows(out) - &t) * inv_n
            } else {
                (out - &t) * inv_n
            };
            let grad_h = grad_out.dot(&w2.t()) * h.mapv(|v| 1.0 - v * v);
            let gw2 = h.t().dot(&grad_out);
            let gb2 = grad_out.sum_axis(Axis(0));
            let gw1 = x.t().dot(&grad_h);
            let gb1 = grad_h.sum_axis(Axis(0));
            w2.scaled_add(-lr, &gw2);
            b2.scaled_add(-lr, &gb2);
            w1.scaled_add(-lr, &gw1);
            b1.scaled_add(-lr, &gb1);
        }
        if w1.iter().chain(w2.iter()).any(|v| !v.is_finite()) {
            return Err(PodError::Numerical("mlp training diverged".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            target_mean: mean,
            target_scale: scale,
        })
    }

    fn predict(&self, x: &Array2<f64>, task: Task) -> Predictions {
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let out = h.dot(&self.w2) + &self.b2;
        match task {
            Task::Regression { .. } => Predictions::Continuous(out * &self.target_scale + &self.target_mean),
            Task::Classification { .. } => {
                let probabilities = softmax_rows(out);
                let labels = probabilities.axis_iter(Axis(0)).map(argmax).collect();
                Predictions::Classes {
                    labels,
                    probabilities,
                }
            }
        }
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    z
}

/// Picks the candidate with the smallest inner cross-validated risk; ties go
/// to the earlier candidate. Candidates that fail to fit are skipped.
pub fn select_learner(
    candidates: &[LearnerSpec],
    r: &Array2<f64>,
    d: usize,
    y: &Response,
    loss: &Loss,
    inner_folds: usize,
    seed: u64,
) -> Result<LearnerSpec> {
    match candidates {
        [] => return Err(PodError::Config("no learner candidates".into())),
        [only] => return Ok(*only),
        [first, ..] if d == 0 => return Ok(*first),
        _ => {}
    }
    let n = y.len();
    if inner_folds < 2 || n < 2 * inner_folds {
        return Err(PodError::Data(format!(
            "inner cross-validation with {inner_folds} folds needs at least {} rows, got {n}",
            2 * inner_folds.max(2)
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::INNER_CV]));
    let perm = permutation(n, &mut rng);
    let folds: Vec<&[usize]> = (0..inner_folds)
        .map(|f| &perm[f * n / inner_folds..(f + 1) * n / inner_folds])
        .collect();

    let mut best: Option<(f64, LearnerSpec)> = None;
    for (c, spec) in candidates.iter().enumerate() {
        let mut fold_risks = Vec::with_capacity(inner_folds);
        for (f, test) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, rows)| rows.iter().copied())
                .collect();
            let spec = spec.with_seed(derive_seed(seed, &[stream::LEARNER, c as u64, f as u64]));
            let risk = fit(&spec, &r.select(Axis(0), &train), d, &y.select(&train), loss)
                .and_then(|p| p.predict(&r.select(Axis(0), test)))
                .and_then(|pred| loss.mean_risk(&y.select(test), &pred))
                .map(|(risk, _)| risk);
            match risk {
                Ok(v) if v.is_finite() => fold_risks.push(v),
                _ => break,
            }
        }
        if fold_risks.len() != inner_folds {
            continue;
        }
        let risk = mean(&fold_risks);
        if best.is_none_or(|(b, _)| risk < b) {
            best = Some((risk, *spec));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| PodError::Numerical("every learner candidate failed to fit".into()))
}

/// Selects among `candidates` by inner cross-validation, then refits the
/// winner on all rows with a fresh seed derived from `seed`.
pub fn fit_selected(
    candidates: &[LearnerSpec],
    r: &Array2<f64>,
    d: usize,
    y: &Response,
    loss: &Loss,
    inner_folds: usize,
    seed: u64,
) -> Result<Predictor> {
    let spec = select_learner(candidates, r, d, y, loss, inner_folds, seed)?;
    fit(&spec.with_seed(derive_seed(seed, &[stream::REFIT])), r, d, y, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Gaussian;
    use ndarray::array;

    fn normals(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut g = Gaussian::from_seed(seed);
        Array2::from_shape_fn((n, p), |_| g.sample())
    }

    fn column(p: &Predictions) -> Vec<f64> {
        match p {
            Predictions::Continuous(m) => m.column(0).to_vec(),
            _ => panic!("expected continuous"),
        }
    }

    fn labels(p: &Predictions) -> Vec<usize> {
        match p {
            Predictions::Classes { labels, .. } => labels.clone(),
            _ => panic!("expected classes"),
        }
    }

    #[test]
    fn zero_dimension_collapses_to_constant() {
        let r = Array2::zeros((3, 2));
        let y = Response::scalar(vec![1.0, 2.0, 3.0]);
        let p = fit(&LearnerSpec::DEFAULT_TREE, &r, 0, &y, &Loss::Squared).unwrap();
        assert_eq!(column(&p.predict(&normals(5, 2, 1)).unwrap()), vec![2.0; 5]);

        let y = Response::Categorical {
            labels: vec![0, 0, 1],
            classes: 2,
        };
        let p = fit(&LearnerSpec::Knn { k: Some(1) }, &r, 0, &y, &Loss::ZeroOne).unwrap();
        let out = p.predict(&r).unwrap();
        assert_eq!(labels(&out), vec![0, 0, 0]);
        if let Predictions::Classes { probabilities, .. } = out {
            assert!((probabilities[[0, 0]] - 0.6).abs() < 1e-15);
            assert!((probabilities[[0, 1]] - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn ols_reproduces_exact_line() {
        let r = Array2::from_shape_fn((20, 3), |(i, j)| (i as f64) * 0.3 + j as f64 * (i % 3) as f64);
        let y: Vec<f64> = (0..20).map(|i| 2.0 * r[[i, 0]] + 1.0).collect();
        let p = fit(&LearnerSpec::Ols { ridge: 0.0 }, &r, 1, &Response::scalar(y.clone()), &Loss::Squared).unwrap();
        let pred = column(&p.predict(&r).unwrap());
        assert!(pred.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn knn_one_memorizes() {
        let r = normals(30, 2, 2);
        let y = normals(30, 1, 3).column(0).to_vec();
        let p = fit(&LearnerSpec::Knn { k: Some(1) }, &r, 2, &Response::scalar(y.clone()), &Loss::Squared).unwrap();
        assert_eq!(column(&p.predict(&r).unwrap()), y);
        assert!(fit(&LearnerSpec::Knn { k: Some(31) }, &r, 2, &Response::scalar(y), &Loss::Squared).is_err());
    }

    /// Brute-force oracle: fraction misclassified by the best single
    /// threshold rule over all cut positions and both orientations.
    fn best_stump_error(x: &[f64], y: &[usize]) -> f64 {
        let mut best = 1.0f64;
        for &t in x {
            for flip in [false, true] {
                let wrong = x
                    .iter()
                    .zip(y)
                    .filter(|&(&v, &l)| ((v <= t) ^ flip) as usize != l)
                    .count();
                best = best.min(wrong as f64 / x.len() as f64);
            }
        }
        best
    }

    #[test]
    fn depth_one_tree_separates_classes() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.37 - 3.0).collect();
        let y: Vec<usize> = x.iter().map(|&v| usize::from(v > 2.0)).collect();
        assert_eq!(best_stump_error(&x, &y), 0.0);
        let r = Array2::from_shape_vec((40, 1), x).unwrap();
        let resp = Response::Categorical {
            labels: y.clone(),
            classes: 2,
        };
        let tree = LearnerSpec::Tree {
            max_depth: 1,
            min_leaf: 1,
        };
        let p = fit(&tree, &r, 1, &resp, &Loss::ZeroOne).unwrap();
        assert_eq!(labels(&p.predict(&r).unwrap()), y);
    }

    #[test]
    fn tree_split_tie_breaks_low_feature() {
        // both features separate perfectly; feature 0 must win
        let r = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = Response::scalar(vec![0.0, 0.0, 5.0, 5.0]);
        let p = fit(
            &LearnerSpec::Tree {
                max_depth: 1,
                min_leaf: 1,
            },
            &r,
            2,
            &y,
            &Loss::Squared,
        )
        .unwrap();
        match &p.model {
            Model::Tree(nodes) => match nodes[0] {
                TreeNode::Split {
                    feature, threshold, ..
                } => {
                    assert_eq!(feature, 0);
                    assert_eq!(threshold, 1.5);
                }
                _ => panic!("expected a split"),
            },
            _ => unreachable!(),
        }
    }

    #[test]
    fn predictions_ignore_trailing_columns() {
        let r = normals(60, 4, 4);
        let y: Vec<f64> = (0..60).map(|i| r[[i, 0]].sin() + r[[i, 1]]).collect();
        let yc = Response::Categorical {
            labels: (0..60).map(|i| usize::from(r[[i, 0]] > 0.0)).collect(),
            classes: 2,
        };
        let mut garbage = r.clone();
        garbage.slice_mut(s![.., 2..]).assign(&normals(60, 2, 99));
        let specs = [
            LearnerSpec::Ols { ridge: 0.0 },
            LearnerSpec::Knn { k: Some(3) },
            LearnerSpec::DEFAULT_TREE,
            LearnerSpec::Mlp {
                hidden: 3,
                epochs: 20,
                learning_rate: 0.05,
                seed: 1,
            },
        ];
        for spec in specs {
            let p = fit(&spec, &r, 2, &Response::scalar(y.clone()), &Loss::Squared).unwrap();
            assert_eq!(p.predict(&r).unwrap(), p.predict(&garbage).unwrap(), "{spec}");
            let p = fit(&spec, &r, 2, &yc, &Loss::cross_entropy()).unwrap();
            assert_eq!(p.predict(&r).unwrap(), p.predict(&garbage).unwrap(), "{spec}");
        }
    }

    #[test]
    fn ols_training_risk_nested() {
        let r = normals(80, 5, 5);
        let y: Vec<f64> = (0..80).map(|i| r[[i, 0]] + 0.5 * r[[i, 2]] + 0.1 * r[[i, 4]]).collect();
        let y = Response::scalar(y);
        let risk = |d| {
            let p = fit(&LearnerSpec::Ols { ridge: 0.0 }, &r, d, &y, &Loss::Squared).unwrap();
            Loss::Squared.mean_risk(&y, &p.predict(&r).unwrap()).unwrap().0
        };
        for d in 0..5 {
            assert!(risk(d + 1) <= risk(d) + 1e-8);
        }
    }

    #[test]
    fn mlp_is_deterministic_and_probabilities_sum_to_one() {
        let r = normals(50, 2, 6);
        let y = Response::Categorical {
            labels: (0..50).map(|i| usize::from(r[[i, 0]] + r[[i, 1]] > 0.0) + usize::from(r[[i, 0]] > 1.0)).collect(),
            classes: 3,
        };
        let spec = LearnerSpec::Mlp {
            hidden: 5,
            epochs: 200,
            learning_rate: 0.1,
            seed: 7,
        };
        let a = fit(&spec, &r, 2, &y, &Loss::cross_entropy()).unwrap();
        let b = fit(&spec, &r, 2, &y, &Loss::cross_entropy()).unwrap();
        assert_eq!(a, b);
        for spec in [spec, LearnerSpec::Knn { k: Some(4) }, LearnerSpec::DEFAULT_TREE, LearnerSpec::Ols { ridge: 0.0 }] {
            match fit(&spec, &r, 2, &y, &Loss::cross_entropy()).unwrap().predict(&r).unwrap() {
                Predictions::Classes { probabilities, .. } => {
                    for row in probabilities.axis_iter(Axis(0)) {
                        assert!((row.sum() - 1.0).abs() < 1e-8);
                    }
                }
                _ => panic!(),
            }
        }
    }

    #[test]
    fn mlp_learns_a_smooth_function() {
        let r = normals(200, 1, 8);
        let y: Vec<f64> = r.column(0).mapv(|v| v.tanh()).to_vec();
        let y = Response::scalar(y);
        let p = fit(&LearnerSpec::DEFAULT_MLP, &r, 1, &y, &Loss::Squared).unwrap();
        let (risk, _) = Loss::Squared.mean_risk(&y, &p.predict(&r).unwrap()).unwrap();
        let base = fit(&LearnerSpec::Mean, &r, 1, &y, &Loss::Squared).unwrap();
        let (null, _) = Loss::Squared.mean_risk(&y, &base.predict(&r).unwrap()).unwrap();
        assert!(risk < 0.2 * null, "{risk} vs {null}");
    }

    #[test]
    fn select_single_candidate_and_errors() {
        let r = normals(10, 1, 9);
        let y = Response::scalar(vec![0.0; 10]);
        let only = [LearnerSpec::DEFAULT_TREE];
        assert_eq!(select_learner(&only, &r, 1, &y, &Loss::Squared, 2, 0).unwrap(), only[0]);
        let two = [LearnerSpec::Ols { ridge: 0.0 }, LearnerSpec::Knn { k: Some(1) }];
        let small = normals(3, 1, 1);
        assert!(select_learner(&two, &small, 1, &Response::scalar(vec![1.0; 3]), &Loss::Squared, 2, 0).is_err());
        let bad = [LearnerSpec::Knn { k: Some(50) }, LearnerSpec::Knn { k: Some(60) }];
        assert!(select_learner(&bad, &r, 1, &y, &Loss::Squared, 2, 0).is_err());
    }

    fn selection_rate(quadratic: bool, runs: u64) -> (usize, usize) {
        let cands = [LearnerSpec::Ols { ridge: 0.0 }, LearnerSpec::Knn { k: Some(5) }, LearnerSpec::DEFAULT_TREE];
        let mut ols = 0;
        for seed in 0..runs {
            let r = normals(500, 1, 1000 + seed);
            let e = normals(500, 1, 5000 + seed);
            let y: Vec<f64> = (0..500)
                .map(|i| {
                    let v = r[[i, 0]];
                    (if quadratic { v * v } else { 2.0 * v }) + 0.5 * e[[i, 0]]
                })
                .collect();
            let s = select_learner(&cands, &r, 1, &Response::scalar(y), &Loss::Squared, 2, seed).unwrap();
            if matches!(s, LearnerSpec::Ols { .. }) {
                ols += 1;
            }
        }
        (ols, runs as usize)
    }

    #[test]
    fn selection_prefers_ols_on_linear_data() {
        let (ols, runs) = selection_rate(false, 100);
        assert!(ols as f64 >= 0.9 * runs as f64, "{ols}/{runs}");
    }

    #[test]
    fn selection_avoids_ols_on_quadratic_data() {
        let (ols, runs) = selection_rate(true, 100);
        assert!((runs - ols) as f64 >= 0.9 * runs as f64, "{ols}/{runs}");
    }

    #[test]
    fn parse_learner_lists() {
        let list = LearnerSpec::parse_list("ols,knn:5,tree:4:10,mlp:5").unwrap();
        assert_eq!(
            list,
            vec![
                LearnerSpec::Ols { ridge: 0.0 },
                LearnerSpec::Knn { k: Some(5) },
                LearnerSpec::DEFAULT_TREE,
                LearnerSpec::DEFAULT_MLP,
            ]
        );
        assert!(LearnerSpec::parse_list("svm").is_err());
        assert!(LearnerSpec::parse_list("knn:0").is_err());
        assert!(LearnerSpec::parse_list("tree:1:2:3").is_err());
        assert_eq!(default_k(500), 13);
    }
}
