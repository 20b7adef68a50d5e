//! Feature extraction from cleaned intraoperative signals, labs, medications
//! and operative totals, and assembly of the per-patient [`FeatureMatrix`].
//!
//! Column names carry their group and provenance:
//!
//! | prefix            | example                     |
//! |-------------------|-----------------------------|
//! | `pre.`            | `pre.age`, `pre.surgery_type.llr`, `pre.admission=er` |
//! | `intra.<signal>.` | `intra.map.sd_resid`, `intra.map.occ_lt55` |
//! | `intra.lab.`      | `intra.lab.lactate.abnormal_pct` |
//! | `intra.med.`      | `intra.med.pressors`        |
//! | `intra.total.`    | `intra.total.ebl_ml`        |

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientRecord, TimeSeries};
use crate::error::{Error, Result};
use crate::outcome::{Outcome, OutcomeLabels};
use crate::preprocessing::{self, CategoricalEncoder, CleaningConfig, CleaningReport, SignalCleaning};
use crate::stats;

pub const PREOP_PREFIX: &str = "pre.";
pub const INTRAOP_PREFIX: &str = "intra.";

/// Categoricals with more levels than this are likelihood-ratio encoded;
/// the rest are one-hot encoded.
pub const MAX_ONEHOT_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFeatures {
    pub min: f64,
    pub max: f64,
    pub mean_base: f64,
    pub sd_base: f64,
    pub sd_residual: f64,
    /// `((lo, hi), fraction of covered time with lo <= value < hi)`
    pub range_occupancy: Vec<((f64, f64), f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabFeatures {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
    pub variance: f64,
    pub abnormal_pct: f64,
}

/// Splits a series into a centered moving-average base (window of
/// `2 * (window_w / 2) + 1` samples, shrinking at the edges) and the residual
/// `sample - base`. `base + residual` reproduces every sample exactly.
pub fn decompose(ts: &TimeSeries, window_w: usize) -> (TimeSeries, TimeSeries) {
    let values = ts.values();
    let n = values.len();
    let half = window_w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + values[i];
    }
    let mut base = Vec::with_capacity(n);
    let mut resid = Vec::with_capacity(n);
    for (i, &(t, x)) in ts.samples.iter().enumerate() {
        let a = i.saturating_sub(half);
        let b = (i + half).min(n - 1);
        // direct sum rather than prefix difference keeps constant series exact
        let b_val = if b - a < 64 {
            values[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        } else {
            (prefix[b + 1] - prefix[a]) / (b - a + 1) as f64
        };
        base.push((t, b_val));
        resid.push((t, exact_residual(x, b_val)));
    }
    (
        TimeSeries::new(ts.signal.clone(), base, ts.valid_range),
        TimeSeries::new(ts.signal.clone(), resid, (f64::NEG_INFINITY, f64::INFINITY)),
    )
}

/// `x - base`, nudged by a few ulps when needed so that `base + r == x`.
fn exact_residual(x: f64, base: f64) -> f64 {
    let r = x - base;
    if base + r == x {
        return r;
    }
    let (mut up, mut down) = (r, r);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if base + up == x {
            return up;
        }
        if base + down == x {
            return down;
        }
    }
    r
}

/// Step-function occupancy: each sample owns the gap to the next sample; the
/// last sample owns the preceding gap.
fn occupancy(samples: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let n = samples.len();
    if n == 1 {
        let v = samples[0].1;
        return f64::from(u8::from(v >= lo && v < hi));
    }
    let mut total = 0.0;
    let mut inside = 0.0;
    for i in 0..n {
        let dur = if i + 1 < n {
            samples[i + 1].0 - samples[i].0
        } else {
            samples[n - 1].0 - samples[n - 2].0
        };
        total += dur;
        let v = samples[i].1;
        if v >= lo && v < hi {
            inside += dur;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

pub fn signal_features(ts: &TimeSeries, window_w: usize, ranges: &[(f64, f64)]) -> Result<SignalFeatures> {
    if ts.is_empty() {
        return Err(Error::SeriesUnusable(ts.signal.clone()));
    }
    let values = ts.values();
    let (base, resid) = decompose(ts, window_w);
    let base_v = base.values();
    let resid_v = resid.values();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SignalFeatures {
        min,
        max,
        mean_base: stats::mean(&base_v).clamp(min, max),
        sd_base: stats::std_dev(&base_v),
        sd_residual: stats::std_dev(&resid_v),
        range_occupancy: ranges
            .iter()
            .map(|&(lo, hi)| ((lo, hi), occupancy(&ts.samples, lo, hi)))
            .collect(),
    })
}

/// Descriptive statistics of one lab; values outside the closed normal range
/// `[lo, hi]` count as abnormal.
pub fn lab_features(name: &str, obs: &[(f64, f64)], normal_range: (f64, f64)) -> Result<LabFeatures> {
    let values: Vec<f64> = obs.iter().map(|o| o.1).filter(|v| v.is_finite()).collect();
    if values.is_empty() {
        return Err(Error::EmptyLab(name.to_string()));
    }
    let (lo, hi) = normal_range;
    let abnormal = values.iter().filter(|&&v| v < lo || v > hi).count();
    Ok(LabFeatures {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean: stats::mean(&values),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: values.len(),
        variance: stats::variance(&values),
        abnormal_pct: 100.0 * abnormal as f64 / values.len() as f64,
    })
}

/// PO2/FiO2, or `(SpO2/FiO2 - 64) / 0.84` when PO2 is unavailable.
/// FiO2 is a fraction.
pub fn pf_ratio(po2: Option<f64>, fio2: f64, spo2: Option<f64>) -> Result<f64> {
    if fio2.is_nan() || fio2 <= 0.0 {
        return Err(Error::InvalidFio2(fio2));
    }
    match (po2, spo2) {
        (Some(p), _) => Ok(p / fio2),
        (None, Some(s)) => Ok((s / fio2 - 64.0) / 0.84),
        (None, None) => Err(Error::NoOxygenData),
    }
}

/// PF-ratio observations derived from same-minute `fio2` / `po2` / `spo2` labs.
pub fn pf_ratio_series(labs: &BTreeMap<String, Vec<(f64, f64)>>) -> Vec<(f64, f64)> {
    let Some(fio2) = labs.get("fio2") else {
        return Vec::new();
    };
    let at = |name: &str, t: f64| labs.get(name).and_then(|o| o.iter().find(|x| x.0 == t).map(|x| x.1));
    fio2.iter()
        .filter_map(|&(t, f)| pf_ratio(at("po2", t), f, at("spo2", t)).ok().map(|v| (t, v)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub cleaning: CleaningConfig,
    /// signal -> occupancy ranges `[lo, hi)`
    pub occupancy_ranges: BTreeMap<String, Vec<(f64, f64)>>,
    /// lab -> closed normal range
    pub lab_normal_ranges: BTreeMap<String, (f64, f64)>,
    pub encoder_alpha: f64,
    /// Columns missing in more than this fraction of training rows are dropped.
    pub max_missing_fraction: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let mut occupancy_ranges = BTreeMap::new();
        occupancy_ranges.insert("map".to_string(), vec![(f64::NEG_INFINITY, 55.0), (55.0, 65.0)]);
        occupancy_ranges.insert("hr".to_string(), vec![(100.0, f64::INFINITY)]);
        let lab_normal_ranges = [
            ("lactate", (0.5, 2.0)),
            ("glucose", (70.0, 180.0)),
            ("potassium", (3.5, 5.0)),
            ("pf_ratio", (300.0, f64::INFINITY)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            cleaning: CleaningConfig::default(),
            occupancy_ranges,
            lab_normal_ranges,
            encoder_alpha: 1.0,
            max_missing_fraction: 0.4,
            seed: 0,
        }
    }
}

fn fmt_bound(x: f64) -> String {
    format!("{x}")
}

fn occupancy_name(lo: f64, hi: f64) -> String {
    match (lo.is_finite(), hi.is_finite()) {
        (false, true) => format!("occ_lt{}", fmt_bound(hi)),
        (true, false) => format!("occ_ge{}", fmt_bound(lo)),
        (true, true) => format!("occ_{}_{}", fmt_bound(lo), fmt_bound(hi)),
        (false, false) => "occ_all".to_string(),
    }
}

/// Numeric features of one patient before cohort-level processing.
#[derive(Debug, Clone, Default)]
struct PatientFeatures {
    numeric: BTreeMap<String, f64>,
    categorical: BTreeMap<String, String>,
    cleaning: BTreeMap<String, SignalCleaning>,
}

fn b(x: bool) -> f64 {
    f64::from(u8::from(x))
}

fn extract_patient(p: &PatientRecord, cfg: &FeatureConfig) -> PatientFeatures {
    let mut f = PatientFeatures::default();
    let num = &mut f.numeric;
    num.insert("pre.age".into(), p.age);
    num.insert("pre.sex_male".into(), b(!p.is_female()));
    num.insert("pre.race_black".into(), b(p.race_black));
    num.insert("pre.ckd".into(), b(p.ckd_documented));
    for (k, &v) in &p.preop_binaries {
        num.insert(format!("pre.{k}"), b(v));
    }
    for (k, &v) in &p.preop_numerics {
        num.insert(format!("pre.{k}"), v);
    }
    for (k, v) in &p.preop_categoricals {
        f.categorical.insert(k.clone(), v.clone());
    }

    for (k, &v) in &p.intraop_meds {
        num.insert(format!("intra.med.{k}"), b(v));
    }
    for (k, &v) in &p.totals {
        num.insert(format!("intra.total.{k}"), v);
    }

    for (signal, ts) in &p.series {
        let cleaned = preprocessing::clean_time_series(ts, p.surgery_start_min, p.surgery_end_min, &cfg.cleaning);
        f.cleaning.insert(signal.clone(), cleaned.report);
        let ranges = cfg.occupancy_ranges.get(signal).map(Vec::as_slice).unwrap_or(&[]);
        let feats = if cleaned.usable {
            signal_features(&cleaned.series, cfg.cleaning.window_w, ranges).ok()
        } else {
            None
        };
        let key = |stat: &str| format!("intra.{signal}.{stat}");
        let get = |g: fn(&SignalFeatures) -> f64| feats.as_ref().map_or(f64::NAN, g);
        num.insert(key("min"), get(|s| s.min));
        num.insert(key("max"), get(|s| s.max));
        num.insert(key("mean_base"), get(|s| s.mean_base));
        num.insert(key("sd_base"), get(|s| s.sd_base));
        num.insert(key("sd_resid"), get(|s| s.sd_residual));
        for (j, &(lo, hi)) in ranges.iter().enumerate() {
            let v = feats.as_ref().map_or(f64::NAN, |s| s.range_occupancy[j].1);
            num.insert(key(&occupancy_name(lo, hi)), v);
        }
    }

    let mut labs: Vec<(String, Vec<(f64, f64)>)> = p
        .intraop_labs
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "po2" | "fio2" | "spo2"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    labs.push(("pf_ratio".into(), pf_ratio_series(&p.intraop_labs)));
    for (lab, obs) in labs {
        let range = cfg
            .lab_normal_ranges
            .get(&lab)
            .copied()
            .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let feats = lab_features(&lab, &obs, range).ok();
        let key = |stat: &str| format!("intra.lab.{lab}.{stat}");
        let get = |g: fn(&LabFeatures) -> f64| feats.as_ref().map_or(f64::NAN, g);
        num.insert(key("min"), get(|l| l.min));
        num.insert(key("mean"), get(|l| l.mean));
        num.insert(key("max"), get(|l| l.max));
        num.insert(key("count"), feats.as_ref().map_or(0.0, |l| l.count as f64));
        num.insert(key("variance"), get(|l| l.variance));
        num.insert(key("abnormal_pct"), get(|l| l.abnormal_pct));
    }
    f
}

/// Whether a raw column is a continuous variable subject to tail imputation.
fn tail_imputed_column(name: &str) -> bool {
    if name.starts_with("intra.lab.") {
        return !name.ends_with(".count") && !name.ends_with(".abnormal_pct");
    }
    name.starts_with("intra.total.") || (name.starts_with(PREOP_PREFIX) && !is_fixed_binary(name))
}

fn is_fixed_binary(name: &str) -> bool {
    matches!(name, "pre.sex_male" | "pre.race_black" | "pre.ckd")
}

/// Patient-level features for a whole cohort, before encoding and imputation.
#[derive(Debug, Clone)]
pub struct RawFeatures {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major; NaN marks a missing value.
    pub values: Vec<Vec<f64>>,
    pub categoricals: Vec<BTreeMap<String, String>>,
    pub cleaning: CleaningReport,
}

/// Cleans every series and extracts features for every patient. Continuous
/// preoperative variables, totals and lab statistics then go through
/// [`preprocessing::impute_tails`] column by column, seeded by column name.
pub fn extract_features(cohort: &Cohort, cfg: &FeatureConfig) -> Result<RawFeatures> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let per_patient: Vec<PatientFeatures> = cohort.patients.par_iter().map(|p| extract_patient(p, cfg)).collect();

    let binary_preop: BTreeSet<String> = cohort
        .patients
        .iter()
        .flat_map(|p| p.preop_binaries.keys().map(|k| format!("pre.{k}")))
        .collect();
    let columns: Vec<String> = per_patient
        .iter()
        .flat_map(|f| f.numeric.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut values: Vec<Vec<f64>> = per_patient
        .iter()
        .map(|f| columns.iter().map(|c| f.numeric.get(c).copied().unwrap_or(f64::NAN)).collect())
        .collect();

    let mut cleaning = CleaningReport::default();
    for f in &per_patient {
        for (signal, tally) in &f.cleaning {
            cleaning.add_signal(signal, tally);
        }
    }

    let imputed: Vec<(usize, Vec<f64>, preprocessing::TailImputation)> = columns
        .par_iter()
        .enumerate()
        .filter(|(_, c)| tail_imputed_column(c) && !binary_preop.contains(*c))
        .map(|(j, c)| {
            let col: Vec<f64> = values.iter().map(|r| r[j]).collect();
            let (out, rep) = preprocessing::impute_tails(&col, stats::derive_seed(cfg.seed, c));
            (j, out, rep)
        })
        .collect();
    for (j, col, rep) in imputed {
        for (row, v) in values.iter_mut().zip(col) {
            row[j] = v;
        }
        cleaning.variables.insert(columns[j].clone(), rep);
    }

    Ok(RawFeatures {
        ids: cohort.ids(),
        columns,
        values,
        categoricals: per_patient.into_iter().map(|f| f.categorical).collect(),
        cleaning,
    })
}

/// Categorical handling fitted on training rows for one outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderSet {
    pub encoders: BTreeMap<String, CategoricalEncoder>,
    pub onehot_levels: BTreeMap<String, Vec<String>>,
}

/// Fits encoders on `train_rows` only. `outcome` is indexed like the cohort.
pub fn fit_encoders(raw: &RawFeatures, train_rows: &[usize], outcome: &[bool], alpha: f64) -> Result<EncoderSet> {
    let mut set = EncoderSet::default();
    let vars: BTreeSet<&String> = raw.categoricals.iter().flat_map(|c| c.keys()).collect();
    for var in vars {
        let mut levels = Vec::new();
        let mut ys = Vec::new();
        for &i in train_rows {
            if let Some(l) = raw.categoricals[i].get(var) {
                levels.push(l.as_str());
                ys.push(outcome[i]);
            }
        }
        let distinct: BTreeSet<&str> = levels.iter().copied().collect();
        if distinct.len() > MAX_ONEHOT_LEVELS {
            set.encoders
                .insert(var.clone(), CategoricalEncoder::fit(var, &levels, &ys, alpha)?);
        } else {
            set.onehot_levels
                .insert(var.clone(), distinct.into_iter().map(str::to_string).collect());
        }
    }
    Ok(set)
}

/// Column-level provenance for the feature manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub group: String,
    pub source: String,
    pub statistic: String,
}

impl ColumnInfo {
    pub fn from_name(name: &str) -> Self {
        let (group, rest) = match name.split_once('.') {
            Some(("pre", rest)) => ("preop", rest),
            Some(("intra", rest)) => ("intraop", rest),
            _ => ("stacked", name),
        };
        let (source, statistic) = if let Some((var, level)) = rest.split_once('=') {
            (var.to_string(), format!("level={level}"))
        } else {
            match rest.rsplit_once('.') {
                Some((src, stat)) => (src.to_string(), stat.to_string()),
                None => (rest.to_string(), "value".to_string()),
            }
        };
        Self {
            name: name.to_string(),
            group: group.to_string(),
            source,
            statistic,
        }
    }
}

/// Row-per-patient numeric matrix with outcome labels and a missingness mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// `true` where the cell was imputed.
    pub missing: Vec<Vec<bool>>,
    pub outcomes: BTreeMap<Outcome, Vec<bool>>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(Error::RowMisalignment(format!("{} rows for {} ids", rows.len(), ids.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::InvalidArgument(format!(
                "row of length {} for {} columns",
                r.len(),
                columns.len()
            )));
        }
        let unique: BTreeSet<&String> = columns.iter().collect();
        if unique.len() != columns.len() {
            return Err(Error::InvalidArgument("duplicate column names".into()));
        }
        let missing = rows.iter().map(|r| vec![false; r.len()]).collect();
        Ok(Self {
            ids,
            columns,
            rows,
            missing,
            outcomes: BTreeMap::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.column(j))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn outcome(&self, o: Outcome) -> Result<&[bool]> {
        self.outcomes
            .get(&o)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn(o.name().to_string()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            columns: self.columns.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            missing: rows.iter().map(|&i| self.missing[i].clone()).collect(),
            outcomes: self
                .outcomes
                .iter()
                .map(|(k, v)| (*k, rows.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            ids: self.ids.clone(),
            columns: names.to_vec(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
            missing: self.missing.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
            outcomes: self.outcomes.clone(),
        })
    }

    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.columns.iter().filter(|c| c.starts_with(prefix)).cloned().collect()
    }

    pub fn preop(&self) -> FeatureMatrix {
        self.select_columns(&self.columns_with_prefix(PREOP_PREFIX))
            .expect("own columns")
    }

    pub fn intraop(&self) -> FeatureMatrix {
        self.select_columns(&self.columns_with_prefix(INTRAOP_PREFIX))
            .expect("own columns")
    }

    /// Appends a column; fails on a duplicate name or wrong length.
    pub fn with_column(mut self, name: &str, values: &[f64]) -> Result<FeatureMatrix> {
        if self.column_index(name).is_some() {
            return Err(Error::InvalidArgument(format!("column `{name}` already present")));
        }
        if values.len() != self.n_rows() {
            return Err(Error::RowMisalignment(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        self.columns.push(name.to_string());
        for ((row, miss), &v) in self.rows.iter_mut().zip(&mut self.missing).zip(values) {
            row.push(v);
            miss.push(false);
        }
        Ok(self)
    }

    /// Fails unless `other` has the same patients in the same order.
    pub fn check_aligned(&self, other: &FeatureMatrix) -> Result<()> {
        if self.ids != other.ids {
            return Err(Error::RowMisalignment("patient ids differ between matrices".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ColumnInfo> {
        self.columns.iter().map(|c| ColumnInfo::from_name(c)).collect()
    }

    /// CSV with header `patient_id,<columns...>,<outcomes...>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["patient_id".to_string()];
        header.extend(self.columns.iter().cloned());
        header.extend(self.outcomes.keys().map(|o| o.name().to_string()));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![self.ids[i].clone()];
            rec.extend(row.iter().map(f64::to_string));
            rec.extend(self.outcomes.values().map(|v| if v[i] { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("features.csv", e))?;
        Ok(())
    }
}

/// Encodes categoricals, drops columns missing in more than
/// `max_missing_fraction` of the training rows and fills remaining gaps with
/// training medians. Columns come out in lexicographic order.
pub fn finalize_matrix(
    raw: &RawFeatures,
    encoders: &EncoderSet,
    labels: &[OutcomeLabels],
    train_rows: &[usize],
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let n = raw.ids.len();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    if labels.len() != n {
        return Err(Error::RowMisalignment(format!("{} labels for {n} patients", labels.len())));
    }
    if train_rows.is_empty() {
        return Err(Error::InvalidArgument("no training rows".into()));
    }

    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (j, c) in raw.columns.iter().enumerate() {
        cols.insert(c.clone(), raw.values.iter().map(|r| r[j]).collect());
    }
    for (var, enc) in &encoders.encoders {
        let col = raw
            .categoricals
            .iter()
            .map(|c| c.get(var).map_or(f64::NAN, |l| enc.encode(l)))
            .collect();
        cols.insert(format!("pre.{var}.llr"), col);
    }
    for (var, levels) in &encoders.onehot_levels {
        // first level is the reference
        for level in levels.iter().skip(1) {
            let col = raw
                .categoricals
                .iter()
                .map(|c| c.get(var).map_or(f64::NAN, |l| b(l == level)))
                .collect();
            cols.insert(format!("pre.{var}={level}"), col);
        }
    }

    let mut columns = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (name, col) in cols {
        let train_vals: Vec<f64> = train_rows.iter().map(|&i| col[i]).filter(|v| v.is_finite()).collect();
        let missing_frac = 1.0 - train_vals.len() as f64 / train_rows.len() as f64;
        if missing_frac > cfg.max_missing_fraction || train_vals.is_empty() {
            continue;
        }
        columns.push(name);
        data.push(col);
    }

    let medians: Vec<f64> = data
        .iter()
        .map(|col| {
            let vals: Vec<f64> = train_rows.iter().map(|&i| col[i]).filter(|v| v.is_finite()).collect();
            stats::median(&vals)
        })
        .collect();
    let mut rows = vec![Vec::with_capacity(columns.len()); n];
    let mut missing = vec![Vec::with_capacity(columns.len()); n];
    for (col, med) in data.iter().zip(&medians) {
        for i in 0..n {
            let v = col[i];
            let miss = !v.is_finite();
            rows[i].push(if miss { *med } else { v });
            missing[i].push(miss);
        }
    }

    let mut outcomes = BTreeMap::new();
    for o in Outcome::ALL {
        outcomes.insert(o, labels.iter().map(|l| o.of(l)).collect());
    }
    Ok(FeatureMatrix {
        ids: raw.ids.clone(),
        columns,
        rows,
        missing,
        outcomes,
    })
}

/// One-shot assembly: extraction, encoder fitting on `train_rows` for
/// `encode_for`, and finalization.
pub fn assemble_matrix(
    cohort: &Cohort,
    labels: &[OutcomeLabels],
    train_rows: &[usize],
    encode_for: Outcome,
    cfg: &FeatureConfig,
) -> Result<(FeatureMatrix, CleaningReport)> {
    let raw = extract_features(cohort, cfg)?;
    let y: Vec<bool> = labels.iter().map(|l| encode_for.of(l)).collect();
    let encoders = fit_encoders(&raw, train_rows, &y, cfg.encoder_alpha)?;
    let m = finalize_matrix(&raw, &encoders, labels, train_rows, cfg)?;
    Ok((m, raw.cleaning))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> TimeSeries {
        TimeSeries::new(
            "map",
            values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            (0.0, 300.0),
        )
    }

    #[test]
    fn decompose_constant_and_ramp() {
        let (base, resid) = decompose(&series(&[7.25; 40]), 15);
        assert!(base.values().iter().all(|&v| v == 7.25));
        assert!(resid.values().iter().all(|&v| v == 0.0));

        let ramp: Vec<f64> = (0..50).map(|i| 60.0 + 0.5 * i as f64).collect();
        let (_, resid) = decompose(&series(&ramp), 15);
        for r in &resid.values()[7..43] {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_reconstructs_exactly() {
        let values: Vec<f64> = (0..300).map(|i| 70.0 + 10.0 * ((i as f64) * 0.37).sin() + (i % 7) as f64 * 0.3).collect();
        let ts = series(&values);
        let (base, resid) = decompose(&ts, 15);
        for ((b, r), x) in base.values().iter().zip(resid.values()).zip(&values) {
            assert_eq!(b + r, *x);
        }
    }

    #[test]
    fn occupancy_of_map_below_55() {
        let values: Vec<f64> = (0..200).map(|i| if (50..70).contains(&i) { 50.0 } else { 80.0 }).collect();
        let f = signal_features(&series(&values), 15, &[(f64::NEG_INFINITY, 55.0)]).unwrap();
        assert!((f.range_occupancy[0].1 - 0.10).abs() < 1e-12);
    }

    #[test]
    fn constant_series_features() {
        let f = signal_features(&series(&[64.0; 50]), 15, &[]).unwrap();
        assert_eq!((f.min, f.max, f.mean_base), (64.0, 64.0, 64.0));
        assert_eq!((f.sd_base, f.sd_residual), (0.0, 0.0));
    }

    #[test]
    fn empty_series_is_unusable() {
        assert!(matches!(signal_features(&series(&[]), 15, &[]), Err(Error::SeriesUnusable(_))));
    }

    #[test]
    fn lab_feature_examples() {
        let obs: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0].iter().map(|&v| (0.0, v)).collect();
        let f = lab_features("k", &obs, (2.0, 7.0)).unwrap();
        assert_eq!(f.abnormal_pct, 25.0);

        let f = lab_features("k", &[(3.0, 4.2)], (0.0, 1.0)).unwrap();
        assert_eq!((f.min, f.mean, f.max, f.variance, f.count), (4.2, 4.2, 4.2, 0.0, 1));

        let f = lab_features("lactate", &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)], (f64::NEG_INFINITY, 2.0)).unwrap();
        assert!((f.mean - 2.0).abs() < 1e-15);
        assert!((f.variance - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.abnormal_pct - 100.0 / 3.0).abs() < 1e-12);

        assert!(matches!(lab_features("k", &[], (0.0, 1.0)), Err(Error::EmptyLab(_))));
    }

    #[test]
    fn pf_ratio_rules() {
        assert_eq!(pf_ratio(Some(80.0), 0.4, None).unwrap(), 200.0);
        let sf = pf_ratio(None, 0.5, Some(98.0)).unwrap();
        assert!((sf - (196.0 - 64.0) / 0.84).abs() < 1e-12);
        assert!((sf - 157.14).abs() < 1e-2);
        assert!(matches!(pf_ratio(Some(80.0), 0.0, None), Err(Error::InvalidFio2(_))));
        assert!(matches!(pf_ratio(None, 0.5, None), Err(Error::NoOxygenData)));
    }

    #[test]
    fn column_info_parsing() {
        let c = ColumnInfo::from_name("intra.map.sd_resid");
        assert_eq!((c.group.as_str(), c.source.as_str(), c.statistic.as_str()), ("intraop", "map", "sd_resid"));
        let c = ColumnInfo::from_name("intra.lab.lactate.mean");
        assert_eq!((c.source.as_str(), c.statistic.as_str()), ("lab.lactate", "mean"));
        let c = ColumnInfo::from_name("pre.admission=er");
        assert_eq!((c.group.as_str(), c.source.as_str()), ("preop", "admission"));
        let c = ColumnInfo::from_name("pre.age");
        assert_eq!((c.source.as_str(), c.statistic.as_str()), ("age", "value"));
    }
}
