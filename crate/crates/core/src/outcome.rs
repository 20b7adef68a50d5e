//! Baseline creatinine and KDIGO-style AKI labels.
//!
//! A patient has AKI within a horizon when any of the following hold:
//! postoperative renal replacement therapy; a creatinine value strictly above
//! 1.5 times baseline; or a rise of at least 0.3 mg/dl between two
//! measurements no more than 48 hours apart. Horizons are 72 h, 168 h and the
//! whole stay, all closed on the right.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};

/// GFR (ml/min/1.73 m²) assumed when back-calculating creatinine.
pub const ASSUMED_GFR: f64 = 75.0;
pub const RATIO_THRESHOLD: f64 = 1.5;
pub const DELTA_THRESHOLD: f64 = 0.3;
pub const DELTA_WINDOW_H: f64 = 48.0;
pub const HISTORY_WINDOW_DAYS: f64 = 365.0;
pub const HORIZON_3DAY_H: f64 = 72.0;
pub const HORIZON_7DAY_H: f64 = 168.0;

/// Absolute slack on the creatinine comparisons so that decimal inputs such
/// as `1.20 - 0.90` count as a 0.3 rise.
pub const COMPARE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    MeasuredPriorYear,
    MostRecentHistory,
    MdrdEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineCreatinine {
    pub value: f64,
    pub source: BaselineSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Rrt,
    #[serde(rename = "ratio_1_5x")]
    Ratio,
    #[serde(rename = "delta_0_3_48h")]
    Delta,
    None,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::Rrt => "rrt",
            Trigger::Ratio => "ratio_1_5x",
            Trigger::Delta => "delta_0_3_48h",
            Trigger::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeLabels {
    pub aki_3day: bool,
    pub aki_7day: bool,
    pub aki_overall: bool,
    pub trigger_3day: Trigger,
    pub trigger_7day: Trigger,
    pub trigger_overall: Trigger,
}

/// The three modeled outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Aki3Day,
    Aki7Day,
    AkiOverall,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Aki3Day, Outcome::Aki7Day, Outcome::AkiOverall];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Aki3Day => "aki_3day",
            Outcome::Aki7Day => "aki_7day",
            Outcome::AkiOverall => "aki_overall",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn horizon_hours(self) -> f64 {
        match self {
            Outcome::Aki3Day => HORIZON_3DAY_H,
            Outcome::Aki7Day => HORIZON_7DAY_H,
            Outcome::AkiOverall => f64::INFINITY,
        }
    }

    pub fn of(self, labels: &OutcomeLabels) -> bool {
        match self {
            Outcome::Aki3Day => labels.aki_3day,
            Outcome::Aki7Day => labels.aki_7day,
            Outcome::AkiOverall => labels.aki_overall,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Creatinine implied by the MDRD equation at [`ASSUMED_GFR`]:
/// `[(186 / GFR) * 0.742^female * 1.21^black * age^-0.203]^(1/1.154)`.
pub fn mdrd_baseline(age: f64, female: bool, black: bool) -> f64 {
    let mut inner = (186.0 / ASSUMED_GFR) * age.powf(-0.203);
    if female {
        inner *= 0.742;
    }
    if black {
        inner *= 1.21;
    }
    inner.powf(1.0 / 1.154)
}

/// Minimum creatinine over the prior year; otherwise the MDRD estimate for
/// patients without documented CKD; otherwise the most recent older value.
pub fn compute_baseline(patient: &PatientRecord) -> Result<BaselineCreatinine> {
    let prior_year = patient
        .creatinine_history
        .iter()
        .filter(|(days, v)| *days <= HISTORY_WINDOW_DAYS && *days >= 0.0 && v.is_finite() && *v > 0.0)
        .map(|&(_, v)| v)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    if let Some(value) = prior_year {
        return Ok(BaselineCreatinine {
            value,
            source: BaselineSource::MeasuredPriorYear,
        });
    }
    if !patient.ckd_documented {
        return Ok(BaselineCreatinine {
            value: mdrd_baseline(patient.age, patient.is_female(), patient.race_black),
            source: BaselineSource::MdrdEstimate,
        });
    }
    patient
        .creatinine_history
        .iter()
        .filter(|(_, v)| v.is_finite() && *v > 0.0)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|&(_, value)| BaselineCreatinine {
            value,
            source: BaselineSource::MostRecentHistory,
        })
        .ok_or_else(|| Error::NoBaselineAvailable(patient.patient_id.clone()))
}

/// Earliest time at which the ratio criterion fires.
fn first_ratio_time(obs: &[(f64, f64)], baseline: f64) -> Option<f64> {
    obs.iter()
        .find(|&&(_, v)| v - RATIO_THRESHOLD * baseline > COMPARE_EPS)
        .map(|&(t, _)| t)
}

/// Earliest `t2` for which some earlier sample `t1` with `t2 - t1 <= 48 h`
/// satisfies `v2 - v1 >= 0.3`. Sliding-window minimum over a monotone deque.
fn first_delta_time(obs: &[(f64, f64)]) -> Option<f64> {
    let mut window: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    for (j, &(t2, v2)) in obs.iter().enumerate() {
        while next < j && obs[next].0 < t2 {
            let v = obs[next].1;
            while window.back().is_some_and(|&b| obs[b].1 >= v) {
                window.pop_back();
            }
            window.push_back(next);
            next += 1;
        }
        while window.front().is_some_and(|&f| t2 - obs[f].0 > DELTA_WINDOW_H) {
            window.pop_front();
        }
        if let Some(&f) = window.front() {
            if v2 - obs[f].1 >= DELTA_THRESHOLD - COMPARE_EPS {
                return Some(t2);
            }
        }
    }
    None
}

/// Labels all three horizons. `postop_creatinine` must be time-sorted.
pub fn label_outcomes(patient: &PatientRecord, baseline: &BaselineCreatinine) -> OutcomeLabels {
    let obs = &patient.postop_creatinine;
    debug_assert!(obs.windows(2).all(|w| w[0].0 <= w[1].0), "postop creatinine not sorted");
    let t_ratio = first_ratio_time(obs, baseline.value);
    let t_delta = first_delta_time(obs);
    let at = |horizon: f64| -> (bool, Trigger) {
        if patient.rrt_postop {
            (true, Trigger::Rrt)
        } else if t_ratio.is_some_and(|t| t <= horizon) {
            (true, Trigger::Ratio)
        } else if t_delta.is_some_and(|t| t <= horizon) {
            (true, Trigger::Delta)
        } else {
            (false, Trigger::None)
        }
    };
    let (aki_3day, trigger_3day) = at(HORIZON_3DAY_H);
    let (aki_7day, trigger_7day) = at(HORIZON_7DAY_H);
    let (aki_overall, trigger_overall) = at(f64::INFINITY);
    OutcomeLabels {
        aki_3day,
        aki_7day,
        aki_overall,
        trigger_3day,
        trigger_7day,
        trigger_overall,
    }
}

/// Baseline plus labels for one patient.
pub fn label_patient(patient: &PatientRecord) -> Result<(BaselineCreatinine, OutcomeLabels)> {
    let baseline = compute_baseline(patient)?;
    Ok((baseline, label_outcomes(patient, &baseline)))
}

/// Writes the labels CSV (`patient_id,aki_3day,...,trigger_overall`).
pub fn write_labels_csv<W: std::io::Write>(
    out: W,
    ids: &[String],
    labels: &[OutcomeLabels],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "patient_id",
        "aki_3day",
        "aki_7day",
        "aki_overall",
        "trigger_3day",
        "trigger_7day",
        "trigger_overall",
    ])?;
    let b = |x: bool| if x { "1" } else { "0" };
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([
            id.as_str(),
            b(l.aki_3day),
            b(l.aki_7day),
            b(l.aki_overall),
            &l.trigger_3day.to_string(),
            &l.trigger_7day.to_string(),
            &l.trigger_overall.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("labels.csv", e))?;
    Ok(())
}
