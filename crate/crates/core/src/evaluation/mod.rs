//! Discrimination and reclassification metrics.
//!
//! Threshold convention everywhere: a patient is high-risk iff
//! `score >= threshold`.

mod bootstrap;
mod report;

pub use bootstrap::{bootstrap_ci, BootstrapCi, MAX_RESAMPLE_RETRIES, MIN_RESAMPLES};
pub use report::{
    build_report, evaluate_outcome, BootstrapConfig, EvaluationReport, ModelMetrics, NriReport, OutcomeReport,
    Quadrants, Reclassification, ScoredModel, MODEL_FULL, MODEL_INTRAOP, MODEL_PREOP, MODEL_PROPOSED, REPORT_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::RowMisalignment(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(score+ > score-) + P(tie) / 2`, computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "crate::stats::extended_f64")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the unique scores, from `(0, 0)` at `+inf` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let auc = auroc(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(RocCurve { points, auc })
}

/// Threshold maximizing `J = sensitivity + specificity - 1` over the observed
/// scores; ties go to the smallest threshold.
pub fn youden_cutoff(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ascending sweep: at candidate t, everything before it is called low-risk
    let (p, n) = (pos as i128, neg as i128);
    let (mut below_pos, mut below_neg) = (0i128, 0i128);
    let mut best: Option<(i128, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // J * P * N, exact in integers
        let j = (p - below_pos) * n + below_neg * p - p * n;
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, t));
        }
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
    }
    Ok(best.expect("non-empty").1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationTable {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassificationTable {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.n())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn npv(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fn_)
    }
}

pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> ClassificationTable {
    let mut t = ClassificationTable::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, false) => t.tn += 1,
            (false, true) => t.fn_ += 1,
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NriResult {
    pub event_up: usize,
    pub event_down: usize,
    pub nonevent_up: usize,
    pub nonevent_down: usize,
    pub n_events: usize,
    pub n_nonevents: usize,
    pub nri: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-category net reclassification improvement of `new_high` over
/// `old_high`, with the asymptotic normal test:
/// `var = (up_e + down_e) / n_e^2 + (up_n + down_n) / n_n^2`.
pub fn nri(labels: &[bool], old_high: &[bool], new_high: &[bool]) -> Result<NriResult> {
    if labels.len() != old_high.len() || labels.len() != new_high.len() {
        return Err(Error::RowMisalignment("NRI inputs differ in length".into()));
    }
    let (mut eu, mut ed, mut nu, mut nd) = (0usize, 0usize, 0usize, 0usize);
    let mut n_events = 0usize;
    for ((&y, &o), &n) in labels.iter().zip(old_high).zip(new_high) {
        if y {
            n_events += 1;
        }
        match (y, o, n) {
            (true, false, true) => eu += 1,
            (true, true, false) => ed += 1,
            (false, false, true) => nu += 1,
            (false, true, false) => nd += 1,
            _ => {}
        }
    }
    let n_nonevents = labels.len() - n_events;
    if n_events == 0 || n_nonevents == 0 {
        return Err(Error::SingleClass);
    }
    let (ne, nn) = (n_events as f64, n_nonevents as f64);
    let nri = (eu as f64 - ed as f64) / ne + (nd as f64 - nu as f64) / nn;
    let var = (eu + ed) as f64 / (ne * ne) + (nu + nd) as f64 / (nn * nn);
    let (z, p_value) = if var > 0.0 {
        let z = nri / var.sqrt();
        let phi = Normal::standard().cdf(z.abs());
        (z, (2.0 * (1.0 - phi)).clamp(0.0, 1.0))
    } else {
        (0.0, 1.0)
    };
    Ok(NriResult {
        event_up: eu,
        event_down: ed,
        nonevent_up: nu,
        nonevent_down: nd,
        n_events,
        n_nonevents,
        nri,
        z,
        p_value,
    })
}
