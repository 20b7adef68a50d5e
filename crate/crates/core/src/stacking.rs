//! F-test screening of intraoperative features, forest grid search with
//! fold-local screening, and the four models compared on held-out data.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::evaluation::{auroc, MODEL_FULL, MODEL_INTRAOP, MODEL_PREOP, MODEL_PROPOSED};
use crate::features::FeatureMatrix;
use crate::folds;
use crate::forest::{fit_forest, predict_forest, ForestConfig, ForestModel, MaxFeatures};
use crate::preop::{predict_preop, PreopModel};
use crate::stats;

/// Column holding the stacked preoperative score.
pub const PREOP_SCORE_COLUMN: &str = "stack.preop_score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    #[serde(with = "crate::stats::extended_f64")]
    pub f_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub alpha: f64,
    pub tests: Vec<FeatureTest>,
    pub selected: Vec<String>,
}

/// One-way ANOVA of `values` across the two outcome groups:
/// `F = SSB / (SSW / (n - 2))` with its upper-tail p-value from F(1, n - 2).
/// Zero within-group variance gives `F = inf, p = 0` when the group means
/// differ and `F = 0, p = 1` otherwise.
pub fn f_statistic(values: &[f64], y: &[bool]) -> (f64, f64) {
    let n = values.len();
    let (mut s, mut c) = ([0.0f64; 2], [0usize; 2]);
    for (&v, &g) in values.iter().zip(y) {
        s[usize::from(g)] += v;
        c[usize::from(g)] += 1;
    }
    let means = [s[0] / c[0] as f64, s[1] / c[1] as f64];
    let grand = (s[0] + s[1]) / n as f64;
    let ssb: f64 = (0..2).map(|g| c[g] as f64 * (means[g] - grand).powi(2)).sum();
    let ssw: f64 = values
        .iter()
        .zip(y)
        .map(|(&v, &g)| (v - means[usize::from(g)]).powi(2))
        .sum();
    let scale: f64 = values.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let ssb_zero = ssb <= 1e-14 * scale;
    if ssw <= 1e-14 * scale {
        return if ssb_zero { (0.0, 1.0) } else { (f64::INFINITY, 0.0) };
    }
    if ssb_zero {
        return (0.0, 1.0);
    }
    let df2 = (n - 2) as f64;
    let f = ssb / (ssw / df2);
    let p = FisherSnedecor::new(1.0, df2).map_or(f64::NAN, |d| d.sf(f));
    (f, p)
}

/// Tests every column against the outcome and keeps those with `p < alpha`.
pub fn f_test_screen(m: &FeatureMatrix, y: &[bool], alpha: f64) -> Result<ScreeningResult> {
    if y.len() != m.n_rows() {
        return Err(Error::RowMisalignment(format!("{} outcomes for {} rows", y.len(), m.n_rows())));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() || y.len() < 3 {
        return Err(Error::DegenerateOutcome("F-test screening needs both classes".into()));
    }
    let tests: Vec<FeatureTest> = (0..m.n_cols())
        .map(|j| {
            let (f_stat, p_value) = f_statistic(&m.column(j), y);
            FeatureTest {
                feature: m.columns[j].clone(),
                f_stat,
                p_value,
            }
        })
        .collect();
    let selected = tests.iter().filter(|t| t.p_value < alpha).map(|t| t.feature.clone()).collect();
    Ok(ScreeningResult { alpha, tests, selected })
}

/// Screened columns plus `keep`. An empty screen falls back to the single
/// column with the largest F so the forest always has an input.
fn screened_columns(m: &FeatureMatrix, y: &[bool], alpha: f64, keep: &[String]) -> Result<(ScreeningResult, Vec<String>)> {
    let candidates: Vec<String> = m.columns.iter().filter(|c| !keep.contains(c)).cloned().collect();
    let mut cols = keep.to_vec();
    if candidates.is_empty() {
        return Ok((
            ScreeningResult {
                alpha,
                tests: Vec::new(),
                selected: Vec::new(),
            },
            cols,
        ));
    }
    let screen = f_test_screen(&m.select_columns(&candidates)?, y, alpha)?;
    if screen.selected.is_empty() && cols.is_empty() {
        let best = screen
            .tests
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.f_stat.total_cmp(&b.f_stat).then(j.cmp(i)))
            .map(|(_, t)| t.feature.clone())
            .expect("non-empty candidates");
        cols.push(best);
    } else {
        cols.extend(screen.selected.iter().cloned());
    }
    // keep the matrix's column order
    cols.sort_by_key(|c| m.column_index(c));
    Ok((screen, cols))
}

/// Lattice of forest hyperparameters and screening levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestGrid {
    pub n_trees: Vec<usize>,
    pub max_features: Vec<MaxFeatures>,
    pub min_samples_leaf: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub alpha: Vec<f64>,
}

impl Default for ForestGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![100, 300],
            max_features: vec![MaxFeatures::Sqrt, MaxFeatures::Fraction(0.3)],
            min_samples_leaf: vec![1, 5, 20],
            max_depth: vec![None],
            alpha: vec![0.05],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub alpha: f64,
}

impl GridCell {
    pub fn forest_config(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_features: self.max_features,
            min_samples_leaf: self.min_samples_leaf,
            max_depth: self.max_depth,
            seed,
        }
    }
}

impl ForestGrid {
    /// Cells in lexicographic axis order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &n_trees in &self.n_trees {
            for &max_features in &self.max_features {
                for &min_samples_leaf in &self.min_samples_leaf {
                    for &max_depth in &self.max_depth {
                        for &alpha in &self.alpha {
                            out.push(GridCell {
                                n_trees,
                                max_features,
                                min_samples_leaf,
                                max_depth,
                                alpha,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub cell: usize,
    pub params: GridCell,
    pub mean_auc: f64,
    pub fold_aucs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: usize,
    pub table: Vec<CvRow>,
    /// Out-of-fold scores of the best cell, one per training row.
    pub oof_scores: Vec<f64>,
}

impl GridSearchResult {
    pub fn best_cell(&self) -> GridCell {
        self.table[self.best].params
    }

    /// CSV `cell,n_trees,max_features,min_samples_leaf,max_depth,alpha,mean_auc,fold_aucs`
    /// with fold AUROCs separated by `;`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,n_trees,max_features,min_samples_leaf,max_depth,alpha,mean_auc,fold_aucs\n");
        for r in &self.table {
            let p = &r.params;
            let depth = p.max_depth.map_or("none".to_string(), |d| d.to_string());
            let folds: Vec<String> = r.fold_aucs.iter().map(f64::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.cell,
                p.n_trees,
                p.max_features,
                p.min_samples_leaf,
                depth,
                p.alpha,
                r.mean_auc,
                folds.join(";")
            );
        }
        s
    }
}

/// Stratified K-fold search over `grid`. Screening is refit on each training
/// fold; columns in `keep` bypass it. Best cell = highest mean AUROC, then
/// fewer trees, then larger `min_samples_leaf`, then earlier cell.
pub fn grid_search(
    m: &FeatureMatrix,
    y: &[bool],
    grid: &ForestGrid,
    keep: &[String],
    n_folds: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("empty forest grid".into()));
    }
    let assignment = folds::stratified_folds(y, n_folds, stats::derive_seed(seed, "grid-folds"))?;
    let forest_seed = stats::derive_seed(seed, "grid-forest");
    let tasks: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..n_folds).map(move |f| (c, f))).collect();
    let results: Vec<(Vec<usize>, Vec<f64>, f64)> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let cell = &cells[c];
            let (tr, held) = folds::fold_rows(&assignment, f);
            let train = m.select_rows(&tr);
            let ytr: Vec<bool> = tr.iter().map(|&i| y[i]).collect();
            let (_, cols) = screened_columns(&train, &ytr, cell.alpha, keep)?;
            let cfg = cell.forest_config(stats::derive_seed_index(forest_seed, f as u64));
            let model = fit_forest(&train.select_columns(&cols)?, &ytr, &cfg)?;
            let scores = predict_forest(&model, &m.select_rows(&held))?;
            let yh: Vec<bool> = held.iter().map(|&i| y[i]).collect();
            let auc = auroc(&scores, &yh)?;
            Ok((held, scores, auc))
        })
        .collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(cells.len());
    let mut oof = vec![vec![f64::NAN; y.len()]; cells.len()];
    for (c, cell) in cells.iter().enumerate() {
        let mut fold_aucs = Vec::with_capacity(n_folds);
        for (held, scores, auc) in &results[c * n_folds..(c + 1) * n_folds] {
            fold_aucs.push(*auc);
            for (&i, &s) in held.iter().zip(scores) {
                oof[c][i] = s;
            }
        }
        table.push(CvRow {
            cell: c,
            params: *cell,
            mean_auc: stats::mean(&fold_aucs),
            fold_aucs,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            b.mean_auc
                .total_cmp(&a.mean_auc)
                .then(a.params.n_trees.cmp(&b.params.n_trees))
                .then(b.params.min_samples_leaf.cmp(&a.params.min_samples_leaf))
                .then(a.cell.cmp(&b.cell))
        })
        .expect("non-empty grid")
        .cell;
    Ok(GridSearchResult {
        best,
        table,
        oof_scores: std::mem::take(&mut oof[best]),
    })
}

/// A forest tuned by [`grid_search`] and refit on all training rows with the
/// screen of the winning cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedForest {
    pub screening: ScreeningResult,
    pub columns: Vec<String>,
    pub forest: ForestModel,
    pub cv: GridSearchResult,
}

pub fn fit_screened_forest(
    m: &FeatureMatrix,
    y: &[bool],
    grid: &ForestGrid,
    keep: &[String],
    n_folds: usize,
    seed: u64,
) -> Result<ScreenedForest> {
    let cv = grid_search(m, y, grid, keep, n_folds, seed)?;
    let cell = cv.best_cell();
    let (screening, columns) = screened_columns(m, y, cell.alpha, keep)?;
    let forest = fit_forest(
        &m.select_columns(&columns)?,
        y,
        &cell.forest_config(stats::derive_seed(seed, "final-forest")),
    )?;
    Ok(ScreenedForest {
        screening,
        columns,
        forest,
        cv,
    })
}

impl ScreenedForest {
    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        predict_forest(&self.forest, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub grid: ForestGrid,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            grid: ForestGrid::default(),
            folds: 5,
            seed: 0,
        }
    }
}

/// Scores of the four compared models on one set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteScores {
    pub intraop_only: Vec<f64>,
    pub preop_only: Vec<f64>,
    pub proposed: Vec<f64>,
    pub full: Vec<f64>,
}

impl SuiteScores {
    pub fn named(&self) -> [(&'static str, &[f64]); 4] {
        [
            (MODEL_INTRAOP, &self.intraop_only),
            (MODEL_PREOP, &self.preop_only),
            (MODEL_PROPOSED, &self.proposed),
            (MODEL_FULL, &self.full),
        ]
    }
}

/// The intraoperative-only forest, the preoperative model, the proposed
/// stacked forest and the forest on all features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSuite {
    pub intraop_only: ScreenedForest,
    pub preop: PreopModel,
    pub proposed: ScreenedForest,
    pub full: ScreenedForest,
    pub train_ids: Vec<String>,
    /// Out-of-fold preoperative scores stacked into the proposed model.
    pub preop_oof: Vec<f64>,
}

/// Fits the comparison models. `preop_oof` must be out-of-fold scores of
/// `preop_model` on the training rows, aligned with both matrices.
pub fn train_comparison_suite(
    preop_train: &FeatureMatrix,
    intraop_train: &FeatureMatrix,
    preop_model: &PreopModel,
    preop_oof: &[f64],
    y: &[bool],
    cfg: &SuiteConfig,
) -> Result<ComparisonSuite> {
    preop_train.check_aligned(intraop_train)?;
    if preop_oof.len() != y.len() || y.len() != intraop_train.n_rows() {
        return Err(Error::RowMisalignment(format!(
            "{} preoperative scores and {} outcomes for {} rows",
            preop_oof.len(),
            y.len(),
            intraop_train.n_rows()
        )));
    }
    let seed = |k: &str| stats::derive_seed(cfg.seed, k);
    let intraop_only = fit_screened_forest(intraop_train, y, &cfg.grid, &[], cfg.folds, seed("intraop_only"))?;

    let stacked = intraop_train.clone().with_column(PREOP_SCORE_COLUMN, preop_oof)?;
    let keep = [PREOP_SCORE_COLUMN.to_string()];
    let proposed = fit_screened_forest(&stacked, y, &cfg.grid, &keep, cfg.folds, seed("proposed"))?;

    let combined = hstack(intraop_train, preop_train)?;
    let full = fit_screened_forest(&combined, y, &cfg.grid, &preop_train.columns, cfg.folds, seed("full"))?;

    Ok(ComparisonSuite {
        intraop_only,
        preop: preop_model.clone(),
        proposed,
        full,
        train_ids: intraop_train.ids.clone(),
        preop_oof: preop_oof.to_vec(),
    })
}

fn hstack(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    a.check_aligned(b)?;
    let mut out = a.clone();
    for (j, name) in b.columns.iter().enumerate() {
        out = out.with_column(name, &b.column(j))?;
    }
    Ok(out)
}

impl ComparisonSuite {
    /// Training-row scores used to fix cutoffs: out-of-fold everywhere.
    pub fn train_scores(&self) -> SuiteScores {
        SuiteScores {
            intraop_only: self.intraop_only.cv.oof_scores.clone(),
            preop_only: self.preop_oof.clone(),
            proposed: self.proposed.cv.oof_scores.clone(),
            full: self.full.cv.oof_scores.clone(),
        }
    }

    /// Scores new rows; the stacked feature comes from the preoperative model
    /// fitted on all training rows.
    pub fn score(&self, preop: &FeatureMatrix, intraop: &FeatureMatrix) -> Result<SuiteScores> {
        preop.check_aligned(intraop)?;
        let preop_only = predict_preop(&self.preop, preop)?;
        let stacked = intraop.clone().with_column(PREOP_SCORE_COLUMN, &preop_only)?;
        Ok(SuiteScores {
            intraop_only: self.intraop_only.predict(intraop)?,
            proposed: self.proposed.predict(&stacked)?,
            full: self.full.predict(&hstack(intraop, preop)?)?,
            preop_only,
        })
    }
}
