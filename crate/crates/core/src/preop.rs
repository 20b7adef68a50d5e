//! Preoperative risk model: an additive logistic model in which every
//! continuous feature enters through a natural cubic spline with
//! quantile-placed knots, fitted by ridge-penalized IRLS. The penalty is
//! chosen by stratified K-fold cross-validated AUROC.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::auroc;
use crate::features::FeatureMatrix;
use crate::folds;
use crate::stats;

pub const PREOP_MODEL_FORMAT: u32 = 1;
const MAX_IRLS_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreopConfig {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    /// Spline degrees of freedom per continuous feature (knots = df + 1).
    pub df: usize,
    pub seed: u64,
}

impl Default for PreopConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.1, 1.0, 10.0, 100.0],
            folds: 5,
            df: 4,
            seed: 0,
        }
    }
}

/// How one feature is expanded into design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// 0/1 feature used as is.
    Binary,
    /// `(x - center) / scale`.
    Linear { center: f64, scale: f64 },
    /// Natural cubic spline on `u = (x - knots[0]) / (knots[K-1] - knots[0])`.
    NaturalCubic { knots: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineTerm {
    pub feature: String,
    pub basis: Basis,
    pub coefficients: Vec<f64>,
}

impl Basis {
    pub fn n_columns(&self) -> usize {
        match self {
            Basis::Binary | Basis::Linear { .. } => 1,
            Basis::NaturalCubic { knots } => knots.len() - 1,
        }
    }

    /// Appends the basis values of `x` to `out`.
    pub fn expand(&self, x: f64, out: &mut Vec<f64>) {
        match self {
            Basis::Binary => out.push(x),
            Basis::Linear { center, scale } => out.push((x - center) / scale),
            Basis::NaturalCubic { knots } => {
                let k0 = knots[0];
                let width = knots[knots.len() - 1] - k0;
                let u = (x - k0) / width;
                let xi: Vec<f64> = knots.iter().map(|k| (k - k0) / width).collect();
                natural_cubic_row(u, &xi, out);
            }
        }
    }
}

/// Truncated-power natural cubic spline basis (linear beyond the boundary
/// knots): `u`, then `d_k(u) - d_{K-2}(u)` for `k = 0..K-2` with
/// `d_k(u) = ((u - xi_k)^3_+ - (u - xi_{K-1})^3_+) / (xi_{K-1} - xi_k)`.
fn natural_cubic_row(u: f64, xi: &[f64], out: &mut Vec<f64>) {
    let k = xi.len();
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let last = xi[k - 1];
    let d = |j: usize| (cube(u - xi[j]) - cube(u - last)) / (last - xi[j]);
    out.push(u);
    let d_ref = d(k - 2);
    for j in 0..k - 2 {
        out.push(d(j) - d_ref);
    }
}

/// Chooses the basis for one training column; `None` for constant columns.
fn choose_basis(values: &[f64], df: usize) -> Option<Basis> {
    let sorted = stats::sorted_finite(values);
    let (min, max) = (*sorted.first()?, *sorted.last()?);
    if min == max {
        return None;
    }
    if sorted.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Some(Basis::Binary);
    }
    let n_knots = df.max(1) + 1;
    let mut knots: Vec<f64> = (0..n_knots)
        .map(|i| {
            let q = 0.05 + 0.90 * i as f64 / (n_knots - 1) as f64;
            stats::quantile_sorted(&sorted, q)
        })
        .collect();
    knots.dedup();
    if knots.len() >= 3 {
        return Some(Basis::NaturalCubic { knots });
    }
    let center = stats::mean(values);
    let scale = stats::std_dev(values);
    Some(Basis::Linear {
        center,
        scale: if scale > 0.0 { scale } else { 1.0 },
    })
}

/// Design matrix with a leading intercept column.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
}

fn build_design(rows: &[Vec<f64>], col_idx: &[usize], bases: &[Basis]) -> Design {
    let p = 1 + bases.iter().map(Basis::n_columns).sum::<usize>();
    let mut data = Vec::with_capacity(rows.len() * p);
    let mut buf = Vec::with_capacity(p);
    for r in rows {
        buf.clear();
        buf.push(1.0);
        for (&j, b) in col_idx.iter().zip(bases) {
            b.expand(r[j], &mut buf);
        }
        data.extend_from_slice(&buf);
    }
    Design {
        x: DMatrix::from_row_slice(rows.len(), p, &data),
    }
}

/// Penalized negative log-likelihood
/// `-sum[y log p + (1 - y) log(1 - p)] + lambda / 2 * |beta[1..]|^2`.
pub fn penalized_objective(x: &DMatrix<f64>, y: &[bool], beta: &[f64], lambda: f64) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    let nll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + exp(e)) - y e, evaluated stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            softplus - if yi { e } else { 0.0 }
        })
        .sum();
    nll + 0.5 * lambda * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Analytic gradient of [`penalized_objective`]: `-X^T (y - p) + lambda * beta`
/// (intercept unpenalized).
pub fn penalized_gradient(x: &DMatrix<f64>, y: &[bool], beta: &[f64], lambda: f64) -> Vec<f64> {
    let eta = x * DVector::from_column_slice(beta);
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| stats::logistic(e) - f64::from(u8::from(yi))));
    let mut g: Vec<f64> = (x.transpose() * resid).iter().copied().collect();
    for (gj, bj) in g.iter_mut().zip(beta).skip(1) {
        *gj += lambda * bj;
    }
    g
}

/// Newton/IRLS minimization of [`penalized_objective`] with step halving.
pub fn fit_irls(x: &DMatrix<f64>, y: &[bool], lambda: f64) -> Result<Vec<f64>> {
    let (n, p) = x.shape();
    let prev = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let mut beta = vec![0.0; p];
    beta[0] = (prev / (1.0 - prev)).ln();
    let mut obj = penalized_objective(x, y, &beta, lambda);
    for _ in 0..MAX_IRLS_ITER {
        let eta = x * DVector::from_column_slice(&beta);
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut wx = x.clone();
        for (i, &e) in eta.iter().enumerate() {
            let mu = stats::logistic(e);
            let w = (mu * (1.0 - mu)).max(1e-10);
            wx.row_mut(i).scale_mut(w);
        }
        h.gemm_tr(1.0, x, &wx, 0.0);
        for j in 1..p {
            h[(j, j)] += lambda;
        }
        // tiny ridge on the intercept keeps H positive definite under separation
        h[(0, 0)] += 1e-10;
        let g = DVector::from_vec(penalized_gradient(x, y, &beta, lambda));
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let mut hj = h;
                for j in 0..p {
                    hj[(j, j)] += 1e-6;
                }
                hj.lu().solve(&g).ok_or(Error::NonConvergence {
                    iterations: 0,
                    deviance: 2.0 * obj,
                })?
            }
        };

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            let cand_obj = penalized_objective(x, y, &cand, lambda);
            if cand_obj.is_finite() && cand_obj <= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            // no descent direction left: at the optimum to machine precision
            return Ok(beta);
        };
        let rel = (obj - cand_obj).abs() / (cand_obj.abs() + 0.1);
        beta = cand;
        obj = cand_obj;
        if rel < IRLS_TOL {
            return Ok(beta);
        }
    }
    if !obj.is_finite() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonConvergence {
            iterations: MAX_IRLS_ITER,
            deviance: 2.0 * obj,
        });
    }
    // cap reached with a still-decreasing objective (e.g. separation at tiny
    // lambda): keep the last iterate
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreopModel {
    pub format_version: u32,
    pub intercept: f64,
    pub lambda: f64,
    pub terms: Vec<SplineTerm>,
    /// Training columns; prediction needs every one of them.
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCv {
    pub lambda: f64,
    pub mean_auc: f64,
    pub fold_aucs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreopFit {
    pub model: PreopModel,
    pub cv: Vec<LambdaCv>,
}

fn check_outcome(m: &FeatureMatrix, y: &[bool]) -> Result<()> {
    if y.len() != m.n_rows() {
        return Err(Error::RowMisalignment(format!("{} outcomes for {} rows", y.len(), m.n_rows())));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateOutcome("preoperative model".into()));
    }
    Ok(())
}

/// Fits at a fixed penalty on the given rows.
pub fn fit_preop_fixed(train: &FeatureMatrix, y: &[bool], lambda: f64, df: usize) -> Result<PreopModel> {
    check_outcome(train, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut col_idx = Vec::new();
    let mut bases = Vec::new();
    let mut names = Vec::new();
    for j in 0..train.n_cols() {
        if let Some(b) = choose_basis(&train.column(j), df) {
            col_idx.push(j);
            bases.push(b);
            names.push(train.columns[j].clone());
        }
    }
    let design = build_design(&train.rows, &col_idx, &bases);
    let beta = fit_irls(&design.x, y, lambda)?;
    let mut terms = Vec::with_capacity(bases.len());
    let mut offset = 1;
    for (name, basis) in names.into_iter().zip(bases) {
        let k = basis.n_columns();
        terms.push(SplineTerm {
            feature: name,
            basis,
            coefficients: beta[offset..offset + k].to_vec(),
        });
        offset += k;
    }
    Ok(PreopModel {
        format_version: PREOP_MODEL_FORMAT,
        intercept: beta[0],
        lambda,
        terms,
        columns: train.columns.clone(),
    })
}

/// Selects the penalty by stratified K-fold AUROC (ties go to the larger
/// penalty), then refits on all rows.
pub fn fit_preop(train: &FeatureMatrix, y: &[bool], cfg: &PreopConfig) -> Result<PreopFit> {
    check_outcome(train, y)?;
    if cfg.lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if train.n_rows() < cfg.folds * 10 {
        return Err(Error::InvalidArgument(format!(
            "{} rows is too few for {}-fold CV",
            train.n_rows(),
            cfg.folds
        )));
    }
    let assignment = folds::stratified_folds(y, cfg.folds, cfg.seed)?;
    let tasks: Vec<(usize, usize)> = (0..cfg.lambda_grid.len())
        .flat_map(|l| (0..cfg.folds).map(move |f| (l, f)))
        .collect();
    let aucs: Vec<f64> = tasks
        .par_iter()
        .map(|&(l, f)| {
            let (tr, held) = folds::fold_rows(&assignment, f);
            let m = fit_preop_fixed(&train.select_rows(&tr), &subset(y, &tr), cfg.lambda_grid[l], cfg.df)?;
            let scores = predict_preop(&m, &train.select_rows(&held))?;
            auroc(&scores, &subset(y, &held))
        })
        .collect::<Result<_>>()?;

    let cv: Vec<LambdaCv> = cfg
        .lambda_grid
        .iter()
        .enumerate()
        .map(|(l, &lambda)| {
            let fold_aucs = aucs[l * cfg.folds..(l + 1) * cfg.folds].to_vec();
            LambdaCv {
                lambda,
                mean_auc: stats::mean(&fold_aucs),
                fold_aucs,
            }
        })
        .collect();
    let best = cv
        .iter()
        .max_by(|a, b| a.mean_auc.total_cmp(&b.mean_auc).then(a.lambda.total_cmp(&b.lambda)))
        .expect("non-empty grid")
        .lambda;
    let model = fit_preop_fixed(train, y, best, cfg.df)?;
    Ok(PreopFit { model, cv })
}

/// Out-of-fold scores at a fixed penalty: each row is scored by a model that
/// never saw it.
pub fn out_of_fold_scores(train: &FeatureMatrix, y: &[bool], lambda: f64, cfg: &PreopConfig) -> Result<Vec<f64>> {
    check_outcome(train, y)?;
    let assignment = folds::stratified_folds(y, cfg.folds, stats::derive_seed(cfg.seed, "preop-oof"))?;
    let parts: Vec<(Vec<usize>, Vec<f64>)> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let (tr, held) = folds::fold_rows(&assignment, f);
            let m = fit_preop_fixed(&train.select_rows(&tr), &subset(y, &tr), lambda, cfg.df)?;
            let s = predict_preop(&m, &train.select_rows(&held))?;
            Ok((held, s))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![f64::NAN; y.len()];
    for (held, s) in parts {
        for (i, v) in held.into_iter().zip(s) {
            out[i] = v;
        }
    }
    Ok(out)
}

fn subset<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Logistic of the additive predictor for every row.
pub fn predict_preop(model: &PreopModel, m: &FeatureMatrix) -> Result<Vec<f64>> {
    for c in &model.columns {
        if m.column_index(c).is_none() {
            return Err(Error::MissingColumn(c.clone()));
        }
    }
    let idx: Vec<usize> = model
        .terms
        .iter()
        .map(|t| m.column_index(&t.feature).expect("checked above"))
        .collect();
    let mut buf = Vec::new();
    Ok(m.rows
        .iter()
        .map(|r| {
            let mut eta = model.intercept;
            for (t, &j) in model.terms.iter().zip(&idx) {
                buf.clear();
                t.basis.expand(r[j], &mut buf);
                eta += buf.iter().zip(&t.coefficients).map(|(a, b)| a * b).sum::<f64>();
            }
            stats::logistic(eta)
        })
        .collect())
}

impl PreopModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PreopModel = serde_json::from_str(s)?;
        if m.format_version != PREOP_MODEL_FORMAT {
            return Err(Error::SchemaMismatch(format!("preop model format {}", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: &[&str], rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("p{i}")).collect();
        FeatureMatrix::new(ids, cols.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    fn separable() -> (FeatureMatrix, Vec<bool>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let pos = i % 2 == 0;
            let x = if pos { 10.0 + (i as f64) * 0.1 } else { -(i as f64) * 0.1 };
            rows.push(vec![x]);
            y.push(pos);
        }
        (matrix(&["pre.x"], rows), y)
    }

    #[test]
    fn separable_fixture_is_ranked_perfectly() {
        let (m, y) = separable();
        let cfg = PreopConfig {
            lambda_grid: vec![0.01, 1.0],
            ..Default::default()
        };
        let fit = fit_preop(&m, &y, &cfg).unwrap();
        let s = predict_preop(&fit.model, &m).unwrap();
        assert!(auroc(&s, &y).unwrap() >= 0.99);
    }

    #[test]
    fn constant_features_give_prevalence() {
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![3.0, 1.0]).collect();
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let m = matrix(&["pre.a", "pre.b"], rows);
        let fit = fit_preop(&m, &y, &PreopConfig::default()).unwrap();
        assert!(fit.model.terms.is_empty());
        for s in predict_preop(&fit.model, &m).unwrap() {
            assert!((s - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_lambda_grid() {
        let (m, y) = separable();
        let cfg = PreopConfig {
            lambda_grid: vec![2.5],
            ..Default::default()
        };
        assert_eq!(fit_preop(&m, &y, &cfg).unwrap().model.lambda, 2.5);
    }

    #[test]
    fn zero_model_predicts_half() {
        let model = PreopModel {
            format_version: PREOP_MODEL_FORMAT,
            intercept: 0.0,
            lambda: 1.0,
            terms: vec![SplineTerm {
                feature: "pre.x".into(),
                basis: Basis::Binary,
                coefficients: vec![0.0],
            }],
            columns: vec!["pre.x".into()],
        };
        let m = matrix(&["pre.x"], vec![vec![0.0], vec![1.0]]);
        assert_eq!(predict_preop(&model, &m).unwrap(), vec![0.5, 0.5]);

        let other = matrix(&["pre.y"], vec![vec![0.0]]);
        assert!(matches!(predict_preop(&model, &other), Err(Error::MissingColumn(c)) if c == "pre.x"));
    }

    #[test]
    fn large_coefficient_drives_score_up_monotonically() {
        let model = PreopModel {
            format_version: PREOP_MODEL_FORMAT,
            intercept: 0.0,
            lambda: 0.0,
            terms: vec![SplineTerm {
                feature: "pre.x".into(),
                basis: Basis::Linear { center: 0.0, scale: 1.0 },
                coefficients: vec![5.0],
            }],
            columns: vec!["pre.x".into()],
        };
        let rows = (0..20).map(|i| vec![i as f64]).collect();
        let s = predict_preop(&model, &matrix(&["pre.x"], rows)).unwrap();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(s[19] > 1.0 - 1e-12);
    }

    #[test]
    fn natural_spline_is_linear_beyond_boundary() {
        let xi = [0.0, 0.25, 0.5, 0.75, 1.0];
        let row = |u: f64| {
            let mut v = Vec::new();
            natural_cubic_row(u, &xi, &mut v);
            v
        };
        let (a, b, c) = (row(2.0), row(3.0), row(4.0));
        for j in 0..a.len() {
            assert!(((c[j] - b[j]) - (b[j] - a[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip() {
        let (m, y) = separable();
        let model = fit_preop_fixed(&m, &y, 1.0, 4).unwrap();
        let back = PreopModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
    }
}
