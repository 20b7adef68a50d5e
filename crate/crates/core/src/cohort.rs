//! Cohort schema and CSV ingestion.
//!
//! Three long-form files describe a cohort:
//!
//! * `patients.csv`: one row per surgical encounter. Fixed leading columns
//!   `patient_id,age,sex,race_black,ckd,rrt_postop,surgery_start_min,surgery_end_min`
//!   followed by prefixed variable columns: `cat:<name>` (categorical level),
//!   `bin:<name>` (0/1), `num:<name>` (numeric), `med:<name>` (intraoperative
//!   medication 0/1) and `total:<name>` (operative totals). Empty cells are
//!   missing values.
//! * `timeseries.csv`: `patient_id,signal,t_min,value`.
//! * `labs.csv`: `patient_id,name,t,value`. The reserved names
//!   [`CREAT_HISTORY`] (t = days before admission) and [`CREAT_POSTOP`]
//!   (t = hours after surgery end) carry the creatinine trajectory; every other
//!   name is an intraoperative lab with t in minutes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds;
use crate::outcome::OutcomeLabels;

pub const CREAT_HISTORY: &str = "creat_history";
pub const CREAT_POSTOP: &str = "creat_postop";

const FIXED_COLUMNS: [&str; 8] = [
    "patient_id",
    "age",
    "sex",
    "race_black",
    "ckd",
    "rrt_postop",
    "surgery_start_min",
    "surgery_end_min",
];

/// Operative totals carried by every record; `surgery_duration_min` is derived
/// from the surgery window on load.
pub const TOTAL_NAMES: [&str; 4] = ["blood_products_ml", "ebl_ml", "fluids_ml", "urine_ml"];
pub const SURGERY_DURATION: &str = "surgery_duration_min";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Sex::Male),
            "f" | "female" => Some(Sex::Female),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

/// `(t_min, value)` samples of one physiologic signal within one surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub signal: String,
    pub samples: Vec<(f64, f64)>,
    pub valid_range: (f64, f64),
}

impl TimeSeries {
    pub fn new(signal: impl Into<String>, samples: Vec<(f64, f64)>, valid_range: (f64, f64)) -> Self {
        Self {
            signal: signal.into(),
            samples,
            valid_range,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: f64,
    pub sex: Sex,
    pub race_black: bool,
    pub preop_categoricals: BTreeMap<String, String>,
    pub preop_binaries: BTreeMap<String, bool>,
    pub preop_numerics: BTreeMap<String, f64>,
    /// `(days_before_admission, mg/dl)`.
    pub creatinine_history: Vec<(f64, f64)>,
    /// `(hours_after_surgery_end, mg/dl)`, time-sorted.
    pub postop_creatinine: Vec<(f64, f64)>,
    pub rrt_postop: bool,
    pub ckd_documented: bool,
    pub surgery_start_min: f64,
    pub surgery_end_min: f64,
    pub series: BTreeMap<String, TimeSeries>,
    pub intraop_labs: BTreeMap<String, Vec<(f64, f64)>>,
    pub intraop_meds: BTreeMap<String, bool>,
    pub totals: BTreeMap<String, f64>,
}

impl PatientRecord {
    pub fn is_female(&self) -> bool {
        self.sex == Sex::Female
    }

    pub fn surgery_duration(&self) -> f64 {
        self.surgery_end_min - self.surgery_start_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub signal_ranges: BTreeMap<String, (f64, f64)>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>, signal_ranges: BTreeMap<String, (f64, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::DuplicatePatientId(p.patient_id.clone()));
            }
        }
        Ok(Self {
            patients,
            signal_ranges,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    /// Sub-cohort with the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Cohort {
        Cohort {
            patients: rows.iter().map(|&i| self.patients[i].clone()).collect(),
            signal_ranges: self.signal_ranges.clone(),
        }
    }
}

/// Default physiologic bounds for the shipped signals.
pub fn default_signal_ranges() -> BTreeMap<String, (f64, f64)> {
    [
        ("map", (20.0, 200.0)),
        ("sbp", (40.0, 260.0)),
        ("dbp", (15.0, 160.0)),
        ("hr", (20.0, 220.0)),
        ("mac", (0.0, 3.0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowDiagnostic {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub diagnostics: Vec<RowDiagnostic>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

enum VarKind {
    Cat,
    Bin,
    Num,
    Med,
    Total,
}

fn parse_patient_row(
    rec: &csv::StringRecord,
    fixed: &[usize; 8],
    vars: &[(usize, VarKind, String)],
) -> std::result::Result<PatientRecord, String> {
    let get = |i: usize| rec.get(i).unwrap_or("").trim();
    let patient_id = get(fixed[0]).to_string();
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let age = parse_f64(get(fixed[1])).ok_or("unparseable age")?;
    if age < 18.0 {
        return Err(format!("age {age} below 18"));
    }
    let sex = Sex::parse(get(fixed[2])).ok_or("unparseable sex")?;
    let race_black = parse_bool(get(fixed[3])).ok_or("unparseable race_black")?;
    let ckd_documented = parse_bool(get(fixed[4])).ok_or("unparseable ckd")?;
    let rrt_postop = parse_bool(get(fixed[5])).ok_or("unparseable rrt_postop")?;
    let surgery_start_min = parse_f64(get(fixed[6])).ok_or("unparseable surgery_start_min")?;
    let surgery_end_min = parse_f64(get(fixed[7])).ok_or("unparseable surgery_end_min")?;
    if surgery_end_min <= surgery_start_min {
        return Err("surgery_end_min must exceed surgery_start_min".into());
    }

    let mut p = PatientRecord {
        patient_id,
        age,
        sex,
        race_black,
        preop_categoricals: BTreeMap::new(),
        preop_binaries: BTreeMap::new(),
        preop_numerics: BTreeMap::new(),
        creatinine_history: Vec::new(),
        postop_creatinine: Vec::new(),
        rrt_postop,
        ckd_documented,
        surgery_start_min,
        surgery_end_min,
        series: BTreeMap::new(),
        intraop_labs: BTreeMap::new(),
        intraop_meds: BTreeMap::new(),
        totals: BTreeMap::new(),
    };
    for (i, kind, name) in vars {
        let cell = get(*i);
        if cell.is_empty() {
            continue;
        }
        match kind {
            VarKind::Cat => {
                p.preop_categoricals.insert(name.clone(), cell.to_string());
            }
            VarKind::Bin => {
                let v = parse_bool(cell).ok_or_else(|| format!("unparseable bin:{name}"))?;
                p.preop_binaries.insert(name.clone(), v);
            }
            VarKind::Med => {
                let v = parse_bool(cell).ok_or_else(|| format!("unparseable med:{name}"))?;
                p.intraop_meds.insert(name.clone(), v);
            }
            VarKind::Num => {
                let v = parse_f64(cell).ok_or_else(|| format!("unparseable num:{name}"))?;
                p.preop_numerics.insert(name.clone(), v);
            }
            VarKind::Total => {
                let v = parse_f64(cell).ok_or_else(|| format!("unparseable total:{name}"))?;
                p.totals.insert(name.clone(), v);
            }
        }
    }
    p.totals.insert(SURGERY_DURATION.to_string(), p.surgery_duration());
    Ok(p)
}

/// Reads the three cohort files.
///
/// Unparseable rows and rows referencing unknown patients are skipped and
/// reported in [`LoadedCohort::diagnostics`]; schema violations (missing
/// columns, duplicate ids, signals without configured ranges) are errors.
pub fn load_cohort(
    patients_csv: &Path,
    timeseries_csv: &Path,
    labs_csv: &Path,
    signal_ranges: &BTreeMap<String, (f64, f64)>,
) -> Result<LoadedCohort> {
    let mut diagnostics = Vec::new();

    let mut rdr = open_reader(patients_csv)?;
    let headers = rdr.headers()?.clone();
    let mut fixed = [0usize; 8];
    for (slot, name) in fixed.iter_mut().zip(FIXED_COLUMNS) {
        *slot = column_index(&headers, name)?;
    }
    let mut vars = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        let Some((prefix, name)) = h.split_once(':') else {
            continue;
        };
        let kind = match prefix {
            "cat" => VarKind::Cat,
            "bin" => VarKind::Bin,
            "num" => VarKind::Num,
            "med" => VarKind::Med,
            "total" => VarKind::Total,
            _ => continue,
        };
        vars.push((i, kind, name.to_string()));
    }

    let pfile = file_label(patients_csv);
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(RowDiagnostic {
                    file: pfile.clone(),
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match parse_patient_row(&rec, &fixed, &vars) {
            Ok(p) => {
                if index.contains_key(&p.patient_id) {
                    return Err(Error::DuplicatePatientId(p.patient_id));
                }
                index.insert(p.patient_id.clone(), patients.len());
                patients.push(p);
            }
            Err(reason) => diagnostics.push(RowDiagnostic {
                file: pfile.clone(),
                line,
                reason,
            }),
        }
    }

    let mut long_rows = |path: &Path, name_col: &str, t_col: &str| -> Result<Vec<(usize, String, f64, f64)>> {
        let mut rdr = open_reader(path)?;
        let headers = rdr.headers()?.clone();
        let ci = [
            column_index(&headers, "patient_id")?,
            column_index(&headers, name_col)?,
            column_index(&headers, t_col)?,
            column_index(&headers, "value")?,
        ];
        let label = file_label(path);
        let mut out = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row as u64 + 2;
            let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
                let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
                let pid = get(ci[0]);
                let &p = index.get(&pid).ok_or_else(|| format!("unknown patient `{pid}`"))?;
                let name = get(ci[1]);
                if name.is_empty() {
                    return Err(format!("empty {name_col}"));
                }
                let t = parse_f64(&get(ci[2])).ok_or_else(|| format!("unparseable {t_col}"))?;
                let v = parse_f64(&get(ci[3])).ok_or("unparseable value")?;
                Ok((p, name, t, v))
            });
            match parsed {
                Ok(r) => out.push(r),
                Err(reason) => diagnostics.push(RowDiagnostic {
                    file: label.clone(),
                    line,
                    reason,
                }),
            }
        }
        Ok(out)
    };

    let ts_rows = long_rows(timeseries_csv, "signal", "t_min")?;
    let lab_rows = long_rows(labs_csv, "name", "t")?;

    for (p, signal, t, v) in ts_rows {
        let Some(&range) = signal_ranges.get(&signal) else {
            return Err(Error::UnknownSignal(signal));
        };
        patients[p]
            .series
            .entry(signal.clone())
            .or_insert_with(|| TimeSeries::new(signal, Vec::new(), range))
            .samples
            .push((t, v));
    }
    for (p, name, t, v) in lab_rows {
        let rec = &mut patients[p];
        match name.as_str() {
            CREAT_HISTORY => rec.creatinine_history.push((t, v)),
            CREAT_POSTOP => rec.postop_creatinine.push((t, v)),
            _ => rec.intraop_labs.entry(name).or_default().push((t, v)),
        }
    }
    for p in &mut patients {
        for ts in p.series.values_mut() {
            ts.samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        for obs in p.intraop_labs.values_mut() {
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        p.creatinine_history.sort_by(|a, b| a.0.total_cmp(&b.0));
        p.postop_creatinine.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    Ok(LoadedCohort {
        cohort: Cohort::new(patients, signal_ranges.clone())?,
        diagnostics,
    })
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes `patients.csv`, `timeseries.csv` and `labs.csv` into `dir`.
/// Floats are written in shortest round-trip form, so [`load_cohort`] recovers
/// the cohort exactly.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cats = BTreeSet::new();
    let mut bins = BTreeSet::new();
    let mut nums = BTreeSet::new();
    let mut meds = BTreeSet::new();
    let mut totals = BTreeSet::new();
    for p in &cohort.patients {
        cats.extend(p.preop_categoricals.keys().cloned());
        bins.extend(p.preop_binaries.keys().cloned());
        nums.extend(p.preop_numerics.keys().cloned());
        meds.extend(p.intraop_meds.keys().cloned());
        totals.extend(p.totals.keys().filter(|k| k.as_str() != SURGERY_DURATION).cloned());
    }

    let path = dir.join("patients.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(cats.iter().map(|c| format!("cat:{c}")));
    header.extend(bins.iter().map(|c| format!("bin:{c}")));
    header.extend(nums.iter().map(|c| format!("num:{c}")));
    header.extend(meds.iter().map(|c| format!("med:{c}")));
    header.extend(totals.iter().map(|c| format!("total:{c}")));
    w.write_record(&header)?;
    for p in &cohort.patients {
        let mut row = vec![
            p.patient_id.clone(),
            p.age.to_string(),
            p.sex.as_str().to_string(),
            fmt_bool(p.race_black).to_string(),
            fmt_bool(p.ckd_documented).to_string(),
            fmt_bool(p.rrt_postop).to_string(),
            p.surgery_start_min.to_string(),
            p.surgery_end_min.to_string(),
        ];
        row.extend(cats.iter().map(|c| p.preop_categoricals.get(c).cloned().unwrap_or_default()));
        row.extend(bins.iter().map(|c| p.preop_binaries.get(c).map(|&b| fmt_bool(b).to_string()).unwrap_or_default()));
        row.extend(nums.iter().map(|c| p.preop_numerics.get(c).map(f64::to_string).unwrap_or_default()));
        row.extend(meds.iter().map(|c| p.intraop_meds.get(c).map(|&b| fmt_bool(b).to_string()).unwrap_or_default()));
        row.extend(totals.iter().map(|c| p.totals.get(c).map(f64::to_string).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("timeseries.csv");
    let mut w = std::io::BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    let io = |e| Error::io(dir.join("timeseries.csv"), e);
    writeln!(w, "patient_id,signal,t_min,value").map_err(io)?;
    for p in &cohort.patients {
        for ts in p.series.values() {
            for &(t, v) in &ts.samples {
                writeln!(w, "{},{},{},{}", p.patient_id, ts.signal, t, v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;

    let path = dir.join("labs.csv");
    let mut w = std::io::BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    let io = |e| Error::io(dir.join("labs.csv"), e);
    writeln!(w, "patient_id,name,t,value").map_err(io)?;
    for p in &cohort.patients {
        for &(t, v) in &p.creatinine_history {
            writeln!(w, "{},{},{},{}", p.patient_id, CREAT_HISTORY, t, v).map_err(io)?;
        }
        for &(t, v) in &p.postop_creatinine {
            writeln!(w, "{},{},{},{}", p.patient_id, CREAT_POSTOP, t, v).map_err(io)?;
        }
        for (name, obs) in &p.intraop_labs {
            for &(t, v) in obs {
                writeln!(w, "{},{},{},{}", p.patient_id, name, t, v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Stratified (by AKI-7day) random split into train and test cohorts.
pub fn split_cohort(
    cohort: &Cohort,
    labels: &[OutcomeLabels],
    train_fraction: f64,
    seed: u64,
) -> Result<(Cohort, Cohort)> {
    let (train, test) = split_indices(cohort, labels, train_fraction, seed)?;
    Ok((cohort.subset(&train), cohort.subset(&test)))
}

pub fn split_indices(
    cohort: &Cohort,
    labels: &[OutcomeLabels],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != cohort.len() {
        return Err(Error::RowMisalignment(format!(
            "{} labels for {} patients",
            labels.len(),
            cohort.len()
        )));
    }
    let y: Vec<bool> = labels.iter().map(|l| l.aki_7day).collect();
    folds::stratified_split(&y, train_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn fixture_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("patients.csv"),
            "patient_id,age,sex,race_black,ckd,rrt_postop,surgery_start_min,surgery_end_min,cat:surgery_type,bin:diabetes,num:hemoglobin,med:pressors,total:ebl_ml\n\
             p1,61,female,0,0,0,0,120,ortho,1,12.5,0,300\n\
             p2,45,male,1,0,1,10,200,cardiac,0,,1,800\n\
             p3,78,male,0,1,0,0,90,general,0,10.1,0,\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("timeseries.csv"),
            "patient_id,signal,t_min,value\n\
             p1,map,2,80\np1,map,1,82\np1,map,3,79\n\
             p2,map,10,70\np2,map,11,71\n\
             p3,map,0,90\n\
             p9,map,0,90\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("labs.csv"),
            "patient_id,name,t,value\n\
             p1,creat_history,30,1.2\np1,creat_postop,12,1.0\np2,lactate,30,2.2\np3,creat_history,100,2.0\n",
        )
        .unwrap();
        dir
    }

    fn load(dir: &Path) -> Result<LoadedCohort> {
        load_cohort(
            &dir.join("patients.csv"),
            &dir.join("timeseries.csv"),
            &dir.join("labs.csv"),
            &default_signal_ranges(),
        )
    }

    #[test]
    fn loads_three_patient_fixture() {
        let dir = fixture_dir();
        let loaded = load(dir.path()).unwrap();
        let c = &loaded.cohort;
        assert_eq!(c.len(), 3);
        let p1 = &c.patients[0];
        assert_eq!(p1.series["map"].times(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.patients[1].series["map"].len(), 2);
        assert_eq!(c.patients[2].series["map"].len(), 1);
        assert_eq!(p1.preop_categoricals["surgery_type"], "ortho");
        assert!(p1.preop_binaries["diabetes"]);
        assert_eq!(p1.totals[SURGERY_DURATION], 120.0);
        assert!(!c.patients[1].preop_numerics.contains_key("hemoglobin"));
        assert_eq!(c.patients[1].intraop_labs["lactate"], vec![(30.0, 2.2)]);
        // p9 is unknown: one diagnostic, everything else loaded
        assert_eq!(loaded.diagnostics.len(), 1);
        assert_eq!(loaded.diagnostics[0].line, 8);
    }

    #[test]
    fn duplicate_patient_is_an_error() {
        let dir = fixture_dir();
        let mut s = fs::read_to_string(dir.path().join("patients.csv")).unwrap();
        s.push_str("p1,50,male,0,0,0,0,60,ortho,0,11,0,10\n");
        fs::write(dir.path().join("patients.csv"), s).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::DuplicatePatientId(id)) if id == "p1"));
    }

    #[test]
    fn missing_column_and_unknown_signal() {
        let dir = fixture_dir();
        fs::write(dir.path().join("timeseries.csv"), "patient_id,signal,value\n").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::MissingColumn(c)) if c == "t_min"));

        let dir = fixture_dir();
        fs::write(dir.path().join("timeseries.csv"), "patient_id,signal,t_min,value\np1,icp,0,10\n").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::UnknownSignal(s)) if s == "icp"));
    }

    #[test]
    fn malformed_patient_row_is_reported() {
        let dir = fixture_dir();
        let mut s = fs::read_to_string(dir.path().join("patients.csv")).unwrap();
        s.push_str("p4,abc,male,0,0,0,0,60,ortho,0,11,0,10\n");
        fs::write(dir.path().join("patients.csv"), s).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.cohort.len(), 3);
        assert!(loaded.diagnostics.iter().any(|d| d.file == "patients.csv" && d.line == 5));
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = fixture_dir();
        let first = load(dir.path()).unwrap().cohort;
        let out = tempfile::tempdir().unwrap();
        write_cohort(&first, out.path()).unwrap();
        let second = load(out.path()).unwrap();
        assert!(second.diagnostics.is_empty());
        assert_eq!(first, second.cohort);
    }
}
