//! Random forest of CART classification trees (Gini impurity, bootstrap
//! rows, per-node random feature subsets).

use std::cmp::Ordering;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::stats;

pub const FOREST_MODEL_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    Fraction(f64),
    All,
}

impl MaxFeatures {
    /// Number of columns searched at each node, at least 1.
    pub fn resolve(self, n_features: usize) -> usize {
        let p = n_features as f64;
        let k = match self {
            MaxFeatures::Sqrt => p.sqrt().floor(),
            MaxFeatures::Log2 => p.log2().floor(),
            MaxFeatures::Fraction(f) => (f * p).floor(),
            MaxFeatures::All => p,
        };
        (k as usize).clamp(1, n_features.max(1))
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "sqrt" => Some(MaxFeatures::Sqrt),
            "log2" => Some(MaxFeatures::Log2),
            "all" => Some(MaxFeatures::All),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|f| *f > 0.0 && *f <= 1.0)
                .map(MaxFeatures::Fraction),
        }
    }
}

impl fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxFeatures::Sqrt => f.write_str("sqrt"),
            MaxFeatures::Log2 => f.write_str("log2"),
            MaxFeatures::Fraction(x) => write!(f, "{x}"),
            MaxFeatures::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            min_samples_leaf: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class proportions `[P(0), P(1)]` of the training rows in the leaf.
    Leaf { proportions: [f64; 2], n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { proportions, .. } => return proportions[1],
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    /// Total Gini decrease per column, normalized to sum to 1.
    pub importances: Vec<f64>,
    /// Out-of-bag accuracy at the 0.5 threshold, when every row was out of
    /// bag for at least one tree.
    pub oob_accuracy: Option<f64>,
}

/// Exact comparison key for a candidate split: the split maximizing
/// `(l0^2 + l1^2) / nl + (r0^2 + r1^2) / nr` minimizes weighted Gini impurity.
/// Stored as a fraction so ties compare exactly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplitScore {
    num: u128,
    den: u128,
}

impl SplitScore {
    fn new(l: [u64; 2], r: [u64; 2]) -> Self {
        let (nl, nr) = ((l[0] + l[1]) as u128, (r[0] + r[1]) as u128);
        let a = (l[0] as u128).pow(2) + (l[1] as u128).pow(2);
        let b = (r[0] as u128).pow(2) + (r[1] as u128).pow(2);
        Self {
            num: a * nr + b * nl,
            den: nl * nr,
        }
    }

    fn parent(c: [u64; 2]) -> Self {
        let n = (c[0] + c[1]) as u128;
        Self {
            num: (c[0] as u128).pow(2) + (c[1] as u128).pow(2),
            den: n,
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub n_left: usize,
    /// Impurity decrease times node size.
    pub gain: f64,
}

/// Best split of `rows` over `features` (searched in ascending order).
/// Thresholds are midpoints between consecutive distinct values; ties go to
/// the lowest feature index, then the lowest threshold. Returns `None` when no
/// split leaves `min_leaf` rows on both sides and lowers impurity.
pub(crate) fn best_split(cols: &[Vec<f64>], y: &[bool], rows: &[usize], features: &[usize], min_leaf: usize) -> Option<Split> {
    let n = rows.len();
    let total = [
        rows.iter().filter(|&&i| !y[i]).count() as u64,
        rows.iter().filter(|&&i| y[i]).count() as u64,
    ];
    let parent = SplitScore::parent(total);
    let mut best: Option<(SplitScore, Split)> = None;
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n);
    for &f in features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (cols[f][i], y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u64; 2];
        for i in 0..n - 1 {
            left[usize::from(pairs[i].1)] += 1;
            let (x0, x1) = (pairs[i].0, pairs[i + 1].0);
            if x0 == x1 {
                continue;
            }
            let nl = i + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let score = SplitScore::new(left, right);
            if best.as_ref().is_none_or(|(b, _)| score.cmp(b) == Ordering::Greater) {
                let mut threshold = x0 + (x1 - x0) / 2.0;
                if threshold >= x1 || threshold < x0 {
                    threshold = x0;
                }
                best = Some((
                    score,
                    Split {
                        feature: f,
                        threshold,
                        n_left: nl,
                        gain: 0.0,
                    },
                ));
            }
        }
    }
    let (score, mut split) = best?;
    if score.cmp(&parent) != Ordering::Greater {
        return None;
    }
    split.gain = score.value() - parent.value();
    Some(split)
}

struct TreeBuilder<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [bool],
    n_try: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
    importances: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let pos = rows.iter().filter(|&&i| self.y[i]).count();
        let p1 = pos as f64 / rows.len() as f64;
        self.nodes.push(Node::Leaf {
            proportions: [1.0 - p1, p1],
            n: rows.len(),
        });
        self.nodes.len() - 1
    }

    fn build<R: Rng>(&mut self, rows: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let pos = rows.iter().filter(|&&i| self.y[i]).count();
        let pure = pos == 0 || pos == rows.len();
        let too_small = rows.len() < 2 * self.min_leaf;
        let too_deep = self.max_depth.is_some_and(|d| depth >= d);
        if pure || too_small || too_deep {
            return self.leaf(&rows);
        }
        let n_features = self.cols.len();
        let mut features = index::sample(rng, n_features, self.n_try).into_vec();
        features.sort_unstable();
        let Some(split) = best_split(self.cols, self.y, &rows, &features, self.min_leaf) else {
            return self.leaf(&rows);
        };
        self.importances[split.feature] += split.gain;
        let col = &self.cols[split.feature];
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| col[i] <= split.threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf {
            proportions: [0.0, 0.0],
            n: 0,
        });
        let left = self.build(l_rows, depth + 1, rng);
        let right = self.build(r_rows, depth + 1, rng);
        self.nodes[me] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        me
    }
}

/// Fits one tree on `rows` (which may repeat, as in a bootstrap sample).
pub(crate) fn fit_tree<R: Rng>(cols: &[Vec<f64>], y: &[bool], rows: Vec<usize>, cfg: &ForestConfig, rng: &mut R) -> (Tree, Vec<f64>) {
    let mut b = TreeBuilder {
        cols,
        y,
        n_try: cfg.max_features.resolve(cols.len()),
        min_leaf: cfg.min_samples_leaf.max(1),
        max_depth: cfg.max_depth,
        nodes: Vec::new(),
        importances: vec![0.0; cols.len()],
    };
    b.build(rows, 0, rng);
    (Tree { nodes: b.nodes }, b.importances)
}

fn columns_of(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..m.n_cols()).map(|j| m.column(j)).collect()
}

pub fn fit_forest(m: &FeatureMatrix, y: &[bool], cfg: &ForestConfig) -> Result<ForestModel> {
    if y.len() != m.n_rows() {
        return Err(Error::RowMisalignment(format!("{} outcomes for {} rows", y.len(), m.n_rows())));
    }
    if cfg.n_trees == 0 || cfg.min_samples_leaf == 0 {
        return Err(Error::InvalidArgument("n_trees and min_samples_leaf must be >= 1".into()));
    }
    if m.n_cols() == 0 {
        return Err(Error::InvalidArgument("forest needs at least one feature".into()));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos < 2 || y.len() - pos < 2 {
        return Err(Error::DegenerateOutcome("forest needs at least 2 rows per class".into()));
    }
    let cols = columns_of(m);
    let n = y.len();
    let fitted: Vec<(Tree, Vec<f64>, Vec<bool>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stats::rng(stats::derive_seed_index(cfg.seed, t as u64));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            for &r in &rows {
                in_bag[r] = true;
            }
            let (tree, imp) = fit_tree(&cols, y, rows, cfg, &mut rng);
            (tree, imp, in_bag)
        })
        .collect();

    let mut importances = vec![0.0; cols.len()];
    let mut oob_sum = vec![0.0; n];
    let mut oob_cnt = vec![0usize; n];
    let mut trees = Vec::with_capacity(fitted.len());
    for (tree, imp, in_bag) in fitted {
        for (a, b) in importances.iter_mut().zip(&imp) {
            *a += b;
        }
        for i in (0..n).filter(|&i| !in_bag[i]) {
            let row: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            oob_sum[i] += tree.predict_row(&row);
            oob_cnt[i] += 1;
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    let oob_accuracy = oob_cnt.iter().all(|&c| c > 0).then(|| {
        let correct = (0..n).filter(|&i| (oob_sum[i] / oob_cnt[i] as f64 >= 0.5) == y[i]).count();
        correct as f64 / n as f64
    });
    Ok(ForestModel {
        format_version: FOREST_MODEL_FORMAT,
        columns: m.columns.clone(),
        config: *cfg,
        trees,
        importances,
        oob_accuracy,
    })
}

/// Mean over trees of the leaf probability of class 1.
pub fn predict_forest(model: &ForestModel, m: &FeatureMatrix) -> Result<Vec<f64>> {
    let idx: Vec<usize> = model
        .columns
        .iter()
        .map(|c| m.column_index(c).ok_or_else(|| Error::MissingColumn(c.clone())))
        .collect::<Result<_>>()?;
    Ok(m.rows
        .par_iter()
        .map(|r| {
            let row: Vec<f64> = idx.iter().map(|&j| r[j]).collect();
            let sum: f64 = model.trees.iter().map(|t| t.predict_row(&row)).sum();
            sum / model.trees.len() as f64
        })
        .collect())
}

impl ForestModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ForestModel = serde_json::from_str(s)?;
        if m.format_version != FOREST_MODEL_FORMAT {
            return Err(Error::SchemaMismatch(format!("forest model format {}", m.format_version)));
        }
        Ok(m)
    }
}
