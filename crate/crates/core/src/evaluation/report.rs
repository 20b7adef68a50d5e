//! Table-shaped evaluation report: per outcome and model, discrimination and
//! classification metrics with bootstrap intervals, NRI of the proposed model
//! over the preoperative model, reclassification flows and ROC points.

use serde::{Deserialize, Serialize};

use super::{auroc, bootstrap_ci, classification_metrics, nri, roc_curve, youden_cutoff, BootstrapCi, ClassificationTable, NriResult, RocPoint};
use crate::error::{Error, Result};
use crate::outcome::Outcome;
use crate::stats;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const MODEL_INTRAOP: &str = "intraop_only";
pub const MODEL_PREOP: &str = "preop_only";
pub const MODEL_PROPOSED: &str = "proposed";
pub const MODEL_FULL: &str = "full";

/// Scores of one model: training scores (out-of-fold) fix the cutoff,
/// test scores are evaluated.
#[derive(Debug, Clone)]
pub struct ScoredModel {
    pub name: String,
    pub train_ids: Vec<String>,
    pub train_scores: Vec<f64>,
    pub test_ids: Vec<String>,
    pub test_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub cutoff: f64,
    pub table: ClassificationTable,
    pub auc: BootstrapCi,
    pub accuracy: BootstrapCi,
    pub sensitivity: BootstrapCi,
    pub specificity: BootstrapCi,
    pub ppv: BootstrapCi,
    pub npv: BootstrapCi,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrants {
    pub low_to_low: usize,
    pub low_to_high: usize,
    pub high_to_low: usize,
    pub high_to_high: usize,
}

impl Quadrants {
    pub fn total(&self) -> usize {
        self.low_to_low + self.low_to_high + self.high_to_low + self.high_to_high
    }
}

/// Risk-group movement from the preoperative model to the proposed model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reclassification {
    pub events: Quadrants,
    pub nonevents: Quadrants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NriReport {
    pub new_model: String,
    pub old_model: String,
    pub result: NriResult,
    pub ci: BootstrapCi,
    pub p_value_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub outcome: Outcome,
    pub n_test: usize,
    pub n_test_events: usize,
    pub models: Vec<ModelMetrics>,
    pub nri: NriReport,
    pub reclassification: Reclassification,
}

impl OutcomeReport {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.model == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub outcomes: Vec<OutcomeReport>,
}

impl EvaluationReport {
    pub fn outcome(&self, o: Outcome) -> Option<&OutcomeReport> {
        self.outcomes.iter().find(|r| r.outcome == o)
    }

    /// Parses and validates a report produced by [`build_report`].
    pub fn from_json(s: &str) -> Result<Self> {
        let report: EvaluationReport =
            serde_json::from_str(s).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

fn table_ci<F>(scores: &[f64], labels: &[bool], cutoff: f64, n_resamples: usize, seed: u64, f: F) -> Result<BootstrapCi>
where
    F: Fn(&ClassificationTable) -> Option<f64> + Sync,
{
    bootstrap_ci(labels, n_resamples, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        f(&classification_metrics(&s, &y, cutoff)).unwrap_or(f64::NAN)
    })
}

fn model_metrics(m: &ScoredModel, train_labels: &[bool], test_labels: &[bool], boot: &BootstrapConfig) -> Result<ModelMetrics> {
    let cutoff = youden_cutoff(&m.train_scores, train_labels)?;
    let scores = &m.test_scores;
    let roc = roc_curve(scores, test_labels)?;
    // one resample stream shared by all metrics of all models
    let seed = stats::derive_seed(boot.seed, "test-resamples");
    let auc = bootstrap_ci(test_labels, boot.n_resamples, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<bool> = idx.iter().map(|&i| test_labels[i]).collect();
        auroc(&s, &y).unwrap_or(f64::NAN)
    })?;
    let ci = |f: fn(&ClassificationTable) -> Option<f64>| table_ci(scores, test_labels, cutoff, boot.n_resamples, seed, f);
    Ok(ModelMetrics {
        model: m.name.clone(),
        cutoff,
        table: classification_metrics(scores, test_labels, cutoff),
        auc,
        accuracy: ci(ClassificationTable::accuracy)?,
        sensitivity: ci(ClassificationTable::sensitivity)?,
        specificity: ci(ClassificationTable::specificity)?,
        ppv: ci(ClassificationTable::ppv)?,
        npv: ci(ClassificationTable::npv)?,
        roc: roc.points,
    })
}

/// Evaluates one outcome. `models` must contain [`MODEL_PREOP`] and
/// [`MODEL_PROPOSED`], all scored on the same training and test rows.
pub fn evaluate_outcome(
    outcome: Outcome,
    models: &[ScoredModel],
    train_labels: &[bool],
    test_labels: &[bool],
    boot: &BootstrapConfig,
) -> Result<OutcomeReport> {
    let first = models.first().ok_or_else(|| Error::InvalidArgument("no models to evaluate".into()))?;
    for m in models {
        if m.train_ids != first.train_ids || m.test_ids != first.test_ids {
            return Err(Error::RowMisalignment(format!("model `{}` scored on different rows", m.name)));
        }
        if m.train_scores.len() != train_labels.len() || m.test_scores.len() != test_labels.len() {
            return Err(Error::RowMisalignment(format!("model `{}` score/label lengths differ", m.name)));
        }
    }
    let metrics: Vec<ModelMetrics> = models
        .iter()
        .map(|m| model_metrics(m, train_labels, test_labels, boot))
        .collect::<Result<_>>()?;

    let find = |name: &str| {
        models
            .iter()
            .zip(&metrics)
            .find(|(m, _)| m.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("model `{name}` missing from evaluation")))
    };
    let (old_m, old_metrics) = find(MODEL_PREOP)?;
    let (new_m, new_metrics) = find(MODEL_PROPOSED)?;
    let old_high: Vec<bool> = old_m.test_scores.iter().map(|&s| s >= old_metrics.cutoff).collect();
    let new_high: Vec<bool> = new_m.test_scores.iter().map(|&s| s >= new_metrics.cutoff).collect();
    let result = nri(test_labels, &old_high, &new_high)?;
    let ci = bootstrap_ci(
        test_labels,
        boot.n_resamples,
        stats::derive_seed(boot.seed, "test-resamples"),
        |idx| {
            let y: Vec<bool> = idx.iter().map(|&i| test_labels[i]).collect();
            let o: Vec<bool> = idx.iter().map(|&i| old_high[i]).collect();
            let n: Vec<bool> = idx.iter().map(|&i| new_high[i]).collect();
            nri(&y, &o, &n).map_or(f64::NAN, |r| r.nri)
        },
    )?;

    let mut reclassification = Reclassification::default();
    for ((&y, &o), &n) in test_labels.iter().zip(&old_high).zip(&new_high) {
        let q = if y {
            &mut reclassification.events
        } else {
            &mut reclassification.nonevents
        };
        match (o, n) {
            (false, false) => q.low_to_low += 1,
            (false, true) => q.low_to_high += 1,
            (true, false) => q.high_to_low += 1,
            (true, true) => q.high_to_high += 1,
        }
    }

    Ok(OutcomeReport {
        outcome,
        n_test: test_labels.len(),
        n_test_events: test_labels.iter().filter(|&&y| y).count(),
        models: metrics,
        nri: NriReport {
            new_model: MODEL_PROPOSED.to_string(),
            old_model: MODEL_PREOP.to_string(),
            result,
            ci,
            p_value_method: "asymptotic normal test, two-category NRI".to_string(),
        },
        reclassification,
    })
}

pub fn build_report(seed: u64, outcomes: Vec<OutcomeReport>) -> EvaluationReport {
    EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        outcomes,
    }
}
