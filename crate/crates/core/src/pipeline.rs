//! End-to-end commands: synthesize, label, featurize, fit, evaluate, compare.
//!
//! Every command writes into a directory; `cmd_run` uses
//! `<out_dir>/run-<config hash>`. Stage outputs are written as soon as the
//! stage finishes, so a failure leaves earlier outputs in place. Wall-clock
//! metadata goes only to `run.json`; every other file is a pure function of
//! the configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cohort::{load_cohort, split_indices, write_cohort, Cohort, RowDiagnostic};
use crate::config::{DataSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, evaluate_outcome, BootstrapConfig, EvaluationReport, OutcomeReport, ScoredModel};
use crate::features::{extract_features, finalize_matrix, fit_encoders, EncoderSet, FeatureMatrix, RawFeatures};
use crate::outcome::{label_patient, write_labels_csv, BaselineCreatinine, Outcome, OutcomeLabels};
use crate::preop::{fit_preop, out_of_fold_scores, predict_preop, PreopFit};
use crate::preprocessing::CleaningReport;
use crate::stacking::{train_comparison_suite, ComparisonSuite, SuiteConfig, SuiteScores};
use crate::stats;
use crate::synth::generate_synthetic_cohort;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Label,
    Split,
    Features,
    Preop,
    Stack,
    Evaluate,
    Write,
    Compare,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::Features => "features",
            Stage::Preop => "preop",
            Stage::Stack => "stack",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
            Stage::Compare => "compare",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 2 for configuration errors, 3 for data errors, 4 for modeling errors.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            Error::Config(_) => 2,
            Error::InvalidArgument(_) if self.stage == Stage::Config => 2,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::MissingColumn(_)
            | Error::MalformedRow { .. }
            | Error::DuplicatePatientId(_)
            | Error::UnknownSignal(_)
            | Error::NoBaselineAvailable(_)
            | Error::EmptyCohort
            | Error::SchemaMismatch(_)
            | Error::SeriesUnusable(_)
            | Error::EmptyLab(_)
            | Error::NoOxygenData
            | Error::InvalidFio2(_)
            | Error::InfeasiblePrevalence { .. }
            | Error::TooFewPerClass(_) => 3,
            _ => 4,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The cohort named by the configuration: generated, or read from CSV.
pub fn load_data(cfg: &PipelineConfig) -> Result<(Cohort, Vec<RowDiagnostic>)> {
    match &cfg.data {
        DataSource::Synth => Ok((generate_synthetic_cohort(&cfg.synth)?.cohort, Vec::new())),
        DataSource::Csv {
            patients,
            timeseries,
            labs,
        } => {
            let loaded = load_cohort(patients, timeseries, labs, &cfg.signal_ranges)?;
            Ok((loaded.cohort, loaded.diagnostics))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_patients: usize,
    pub target_prevalence_7day: f64,
    /// Recounted from the written cohort with the KDIGO labeler.
    pub realized_prevalence_7day: f64,
    pub realized_prevalence_3day: f64,
    pub realized_prevalence_overall: f64,
    pub intercept: f64,
    pub files: BTreeMap<String, String>,
}

/// Writes `patients.csv`, `timeseries.csv`, `labs.csv` and `manifest.json`
/// into `dir` (created if missing).
pub fn cmd_synth(cfg: &PipelineConfig, dir: &Path) -> StageResult<SynthManifest> {
    let synth = generate_synthetic_cohort(&cfg.synth).at(Stage::Load)?;
    write_cohort(&synth.cohort, dir).at(Stage::Write)?;
    let labeled = label_cohort(&synth.cohort).at(Stage::Label)?;
    let prev = |o: Outcome| {
        labeled.labels.iter().filter(|l| o.of(l)).count() as f64 / labeled.labels.len().max(1) as f64
    };
    let mut files = BTreeMap::new();
    for name in ["patients.csv", "timeseries.csv", "labs.csv"] {
        files.insert(name.to_string(), file_sha256(&dir.join(name)).at(Stage::Write)?);
    }
    let manifest = SynthManifest {
        seed: cfg.synth.seed,
        n_patients: synth.cohort.len(),
        target_prevalence_7day: cfg.synth.target_prevalence_7day,
        realized_prevalence_7day: prev(Outcome::Aki7Day),
        realized_prevalence_3day: prev(Outcome::Aki3Day),
        realized_prevalence_overall: prev(Outcome::AkiOverall),
        intercept: synth.summary.intercept,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest).at(Stage::Write)?;
    Ok(manifest)
}

/// Labels plus the patients that could not be labeled.
#[derive(Debug, Clone)]
pub struct LabeledCohort {
    pub cohort: Cohort,
    pub baselines: Vec<BaselineCreatinine>,
    pub labels: Vec<OutcomeLabels>,
    /// Patients without an obtainable baseline creatinine, left out.
    pub excluded: Vec<String>,
}

pub fn label_cohort(cohort: &Cohort) -> Result<LabeledCohort> {
    let mut keep = Vec::new();
    let mut baselines = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    for (i, p) in cohort.patients.iter().enumerate() {
        match label_patient(p) {
            Ok((b, l)) => {
                keep.push(i);
                baselines.push(b);
                labels.push(l);
            }
            Err(Error::NoBaselineAvailable(id)) => excluded.push(id),
            Err(e) => return Err(e),
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(LabeledCohort {
        cohort: cohort.subset(&keep),
        baselines,
        labels,
        excluded,
    })
}

fn write_labels(dir: &Path, l: &LabeledCohort) -> Result<()> {
    let path = dir.join("labels.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_labels_csv(std::io::BufWriter::new(file), &l.cohort.ids(), &l.labels)?;
    let mut s = String::from("patient_id,baseline_creatinine,baseline_source\n");
    for (id, b) in l.cohort.ids().iter().zip(&l.baselines) {
        let source = serde_json::to_value(b.source)?;
        let _ = writeln!(s, "{id},{},{}", b.value, source.as_str().unwrap_or(""));
    }
    write_file(&dir.join("baselines.csv"), s)?;
    if !l.excluded.is_empty() {
        write_file(&dir.join("excluded.txt"), l.excluded.join("\n") + "\n")?;
    }
    Ok(())
}

fn write_diagnostics(dir: &Path, diags: &[RowDiagnostic]) -> Result<()> {
    if diags.is_empty() {
        return Ok(());
    }
    let mut s = String::from("file,line,reason\n");
    for d in diags {
        let _ = writeln!(s, "{},{},\"{}\"", d.file, d.line, d.reason.replace('"', "'"));
    }
    write_file(&dir.join("diagnostics.csv"), s)
}

/// Labels every patient and writes `labels.csv` and `baselines.csv` to `dir`.
pub fn cmd_label(cfg: &PipelineConfig, dir: &Path) -> StageResult<LabeledCohort> {
    create_dir(dir).at(Stage::Write)?;
    let (cohort, diags) = load_data(cfg).at(Stage::Load)?;
    write_diagnostics(dir, &diags).at(Stage::Write)?;
    let labeled = label_cohort(&cohort).at(Stage::Label)?;
    write_labels(dir, &labeled).at(Stage::Write)?;
    Ok(labeled)
}

#[derive(Debug, Clone, Serialize)]
struct SplitRecord<'a> {
    seed: u64,
    train_fraction: f64,
    stratified_on: &'static str,
    train: Vec<&'a str>,
    test: Vec<&'a str>,
}

fn encoded_matrix(raw: &RawFeatures, labels: &[OutcomeLabels], train: &[usize], outcome: Outcome, cfg: &PipelineConfig) -> Result<(EncoderSet, FeatureMatrix)> {
    let y: Vec<bool> = labels.iter().map(|l| outcome.of(l)).collect();
    let encoders = fit_encoders(raw, train, &y, cfg.features.encoder_alpha)?;
    let m = finalize_matrix(raw, &encoders, labels, train, &cfg.features)?;
    Ok((encoders, m))
}

fn write_matrix(dir: &Path, m: &FeatureMatrix) -> Result<()> {
    let path = dir.join("features.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    m.write_csv(std::io::BufWriter::new(file))?;
    write_json(&dir.join("feature_manifest.json"), &m.manifest())
}

/// Labels, splits and featurizes; writes the matrix encoded for the 7-day
/// outcome with its manifest and the cleaning audit.
pub fn cmd_features(cfg: &PipelineConfig, dir: &Path) -> StageResult<FeatureMatrix> {
    let labeled = cmd_label(cfg, dir)?;
    let (train, _) = split_indices(&labeled.cohort, &labeled.labels, cfg.train_fraction, split_seed(cfg)).at(Stage::Split)?;
    let raw = extract_features(&labeled.cohort, &cfg.features).at(Stage::Features)?;
    write_json(&dir.join("cleaning.json"), &raw.cleaning).at(Stage::Write)?;
    let (_, m) = encoded_matrix(&raw, &labeled.labels, &train, Outcome::Aki7Day, cfg).at(Stage::Features)?;
    write_matrix(dir, &m).at(Stage::Write)?;
    Ok(m)
}

fn split_seed(cfg: &PipelineConfig) -> u64 {
    stats::derive_seed(cfg.seed, "split")
}

/// Fitted models, scores and report for one outcome.
#[derive(Debug, Clone)]
pub struct OutcomeRun {
    pub outcome: Outcome,
    pub encoders: EncoderSet,
    pub columns: Vec<String>,
    pub preop: PreopFit,
    pub suite: ComparisonSuite,
    pub train_scores: SuiteScores,
    pub test_scores: SuiteScores,
    pub report: OutcomeReport,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: EvaluationReport,
    pub labeled: LabeledCohort,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub cleaning: CleaningReport,
    pub outcomes: Vec<OutcomeRun>,
}

fn fit_outcome(
    outcome: Outcome,
    raw: &RawFeatures,
    labels: &[OutcomeLabels],
    train: &[usize],
    test: &[usize],
    cfg: &PipelineConfig,
) -> StageResult<(OutcomeRun, FeatureMatrix)> {
    let (encoders, m) = encoded_matrix(raw, labels, train, outcome, cfg).at(Stage::Features)?;
    let tr = m.select_rows(train);
    let te = m.select_rows(test);
    let y_tr = tr.outcome(outcome).at(Stage::Features)?.to_vec();
    let y_te = te.outcome(outcome).at(Stage::Features)?.to_vec();
    let (pre_tr, intra_tr) = (tr.preop(), tr.intraop());

    let mut pcfg = cfg.preop.clone();
    pcfg.seed = stats::derive_seed(cfg.preop.seed, outcome.name());
    let preop = fit_preop(&pre_tr, &y_tr, &pcfg).at(Stage::Preop)?;
    let oof = out_of_fold_scores(&pre_tr, &y_tr, preop.model.lambda, &pcfg).at(Stage::Preop)?;

    let scfg = SuiteConfig {
        grid: cfg.grid.clone(),
        folds: cfg.cv_folds,
        seed: stats::derive_seed(cfg.seed, &format!("suite:{}", outcome.name())),
    };
    let suite = train_comparison_suite(&pre_tr, &intra_tr, &preop.model, &oof, &y_tr, &scfg).at(Stage::Stack)?;
    let train_scores = suite.train_scores();
    let test_scores = suite.score(&te.preop(), &te.intraop()).at(Stage::Stack)?;

    let models: Vec<ScoredModel> = train_scores
        .named()
        .iter()
        .zip(test_scores.named())
        .map(|((name, tr_s), (_, te_s))| ScoredModel {
            name: name.to_string(),
            train_ids: tr.ids.clone(),
            train_scores: tr_s.to_vec(),
            test_ids: te.ids.clone(),
            test_scores: te_s.to_vec(),
        })
        .collect();
    let boot = BootstrapConfig {
        n_resamples: cfg.bootstrap_resamples,
        seed: stats::derive_seed(cfg.seed, &format!("bootstrap:{}", outcome.name())),
    };
    let report = evaluate_outcome(outcome, &models, &y_tr, &y_te, &boot).at(Stage::Evaluate)?;
    let columns = m.columns.clone();
    Ok((
        OutcomeRun {
            outcome,
            encoders,
            columns,
            preop,
            suite,
            train_scores,
            test_scores,
            report,
        },
        m,
    ))
}

fn write_outcome(dir: &Path, run: &OutcomeRun, m: &FeatureMatrix, test_ids: &[String], write_models: bool) -> Result<()> {
    let dir = dir.join(run.outcome.name());
    create_dir(&dir)?;
    write_matrix(&dir, m)?;
    write_json(&dir.join("encoders.json"), &run.encoders)?;
    write_file(&dir.join("preop_model.json"), run.preop.model.to_json()?)?;
    write_json(&dir.join("preop_cv.json"), &run.preop.cv)?;
    let preop_scores = predict_preop(&run.preop.model, &m.preop())?;
    let mut s = String::from("patient_id,preop_score\n");
    for (id, p) in m.ids.iter().zip(&preop_scores) {
        let _ = writeln!(s, "{id},{p}");
    }
    write_file(&dir.join("preop_scores.csv"), s)?;
    for (name, sf) in [
        ("intraop_only", &run.suite.intraop_only),
        ("proposed", &run.suite.proposed),
        ("full", &run.suite.full),
    ] {
        write_file(&dir.join(format!("cv_{name}.csv")), sf.cv.to_csv())?;
        write_json(&dir.join(format!("screening_{name}.json")), &sf.screening)?;
        if write_models {
            write_file(&dir.join(format!("forest_{name}.json")), sf.forest.to_json()?)?;
        }
    }
    let named = run.test_scores.named();
    let mut s = String::from("patient_id");
    for (name, _) in &named {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for (i, id) in test_ids.iter().enumerate() {
        s.push_str(id);
        for (_, scores) in &named {
            let _ = write!(s, ",{}", scores[i]);
        }
        s.push('\n');
    }
    write_file(&dir.join("test_scores.csv"), s)?;
    for mm in &run.report.models {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &mm.roc {
            let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        write_file(&dir.join(format!("roc_{}.csv", mm.model)), s)?;
    }
    Ok(())
}

/// Reclassification flows as `outcome,quadrant,count`.
pub fn reclassification_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("outcome,quadrant,count\n");
    for o in &report.outcomes {
        for (group, q) in [("events", &o.reclassification.events), ("nonevents", &o.reclassification.nonevents)] {
            for (name, n) in [
                ("low_to_low", q.low_to_low),
                ("low_to_high", q.low_to_high),
                ("high_to_low", q.high_to_low),
                ("high_to_high", q.high_to_high),
            ] {
                let _ = writeln!(s, "{},{group}_{name},{n}", o.outcome.name());
            }
        }
    }
    s
}

/// Report JSON exactly as written by `cmd_run`.
pub fn report_json(report: &EvaluationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Label, split, featurize, fit and evaluate every configured outcome. With
/// `out`, stage outputs are written there as they complete.
pub fn run_cohort(cohort: &Cohort, cfg: &PipelineConfig, out: Option<&Path>) -> StageResult<RunResult> {
    cfg.validate().at(Stage::Config)?;
    let labeled = label_cohort(cohort).at(Stage::Label)?;
    if let Some(dir) = out {
        write_labels(dir, &labeled).at(Stage::Write)?;
    }
    let (train, test) = split_indices(&labeled.cohort, &labeled.labels, cfg.train_fraction, split_seed(cfg)).at(Stage::Split)?;
    let ids = labeled.cohort.ids();
    let train_ids: Vec<String> = train.iter().map(|&i| ids[i].clone()).collect();
    let test_ids: Vec<String> = test.iter().map(|&i| ids[i].clone()).collect();
    if let Some(dir) = out {
        let rec = SplitRecord {
            seed: split_seed(cfg),
            train_fraction: cfg.train_fraction,
            stratified_on: Outcome::Aki7Day.name(),
            train: train_ids.iter().map(String::as_str).collect(),
            test: test_ids.iter().map(String::as_str).collect(),
        };
        write_json(&dir.join("split.json"), &rec).at(Stage::Write)?;
    }

    let raw = extract_features(&labeled.cohort, &cfg.features).at(Stage::Features)?;
    if let Some(dir) = out {
        write_json(&dir.join("cleaning.json"), &raw.cleaning).at(Stage::Write)?;
    }

    let mut outcomes = Vec::new();
    for &o in &cfg.outcomes {
        let (run, m) = fit_outcome(o, &raw, &labeled.labels, &train, &test, cfg)?;
        if let Some(dir) = out {
            write_outcome(dir, &run, &m, &test_ids, cfg.write_models).at(Stage::Write)?;
        }
        outcomes.push(run);
    }
    let report = build_report(cfg.seed, outcomes.iter().map(|r| r.report.clone()).collect());
    if let Some(dir) = out {
        write_file(&dir.join("report.json"), report_json(&report).at(Stage::Write)?).at(Stage::Write)?;
        write_file(&dir.join("reclassification.csv"), reclassification_csv(&report)).at(Stage::Write)?;
    }
    Ok(RunResult {
        report,
        labeled,
        train_ids,
        test_ids,
        cleaning: raw.cleaning,
        outcomes,
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Serialize)]
struct RunMetadata {
    config_hash: String,
    started_unix: u64,
    finished_unix: u64,
    threads: usize,
    version: &'static str,
}

/// Full pipeline into `<out_dir>/run-<config hash>`; returns that directory.
pub fn cmd_run(cfg: &PipelineConfig) -> StageResult<PathBuf> {
    cfg.validate().at(Stage::Config)?;
    let started = unix_now();
    let dir = cfg.run_dir();
    create_dir(&dir).at(Stage::Write)?;
    write_file(&dir.join("config.ini"), cfg.to_ini()).at(Stage::Write)?;
    let (cohort, diags) = load_data(cfg).at(Stage::Load)?;
    write_diagnostics(&dir, &diags).at(Stage::Write)?;
    run_cohort(&cohort, cfg, Some(&dir))?;
    let meta = RunMetadata {
        config_hash: cfg.hash(),
        started_unix: started,
        finished_unix: unix_now(),
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&dir.join("run.json"), &meta).at(Stage::Write)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AurocCell {
    pub outcome: Outcome,
    pub model: String,
    pub auc: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub cells: Vec<AurocCell>,
    /// Console rendering: the AUROC grid followed by one NRI line per outcome.
    pub text: String,
}

/// Reads a report, writes `figure5.csv` into `out_dir` and renders the
/// outcome-by-model AUROC grid.
pub fn cmd_compare(report_path: &Path, out_dir: &Path) -> StageResult<Comparison> {
    let text = fs::read_to_string(report_path).map_err(|e| Error::io(report_path, e)).at(Stage::Compare)?;
    let report = EvaluationReport::from_json(&text).at(Stage::Compare)?;
    let cells: Vec<AurocCell> = report
        .outcomes
        .iter()
        .flat_map(|o| {
            o.models.iter().map(move |m| AurocCell {
                outcome: o.outcome,
                model: m.model.clone(),
                auc: m.auc.point,
                lo: m.auc.lo,
                hi: m.auc.hi,
            })
        })
        .collect();

    let mut csv = String::from("outcome,model,auc,lo,hi\n");
    for c in &cells {
        let _ = writeln!(csv, "{},{},{},{},{}", c.outcome.name(), c.model, c.auc, c.lo, c.hi);
    }
    create_dir(out_dir).at(Stage::Write)?;
    write_file(&out_dir.join("figure5.csv"), csv).at(Stage::Write)?;

    let models: Vec<String> = report
        .outcomes
        .first()
        .map(|o| o.models.iter().map(|m| m.model.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("{:<12}", "outcome");
    for m in &models {
        let _ = write!(out, " {m:>24}");
    }
    out.push('\n');
    for o in &report.outcomes {
        let _ = write!(out, "{:<12}", o.outcome.name());
        for m in &models {
            let cell = o
                .model(m)
                .map_or("-".to_string(), |mm| format!("{:.3} [{:.3}, {:.3}]", mm.auc.point, mm.auc.lo, mm.auc.hi));
            let _ = write!(out, " {cell:>24}");
        }
        out.push('\n');
    }
    for o in &report.outcomes {
        let n = &o.nri;
        let _ = writeln!(
            out,
            "NRI {} ({} vs {}): {:.4} [{:.4}, {:.4}], p = {:.4}",
            o.outcome.name(),
            n.new_model,
            n.old_model,
            n.result.nri,
            n.ci.lo,
            n.ci.hi,
            n.result.p_value
        );
    }
    Ok(Comparison { cells, text: out })
}
