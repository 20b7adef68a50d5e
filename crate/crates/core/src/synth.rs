//! Seeded synthetic surgical cohorts with a planted AKI signal.
//!
//! Each patient gets preoperative risk drivers and independent
//! intraoperative latents (hypotension, tachycardia, bleeding). The 7-day
//! outcome is drawn from a logistic model on both, with the intercept solved
//! so the expected prevalence hits the target. Creatinine trajectories are
//! then built around the patient's baseline so that the KDIGO labeler
//! recovers exactly the planned outcome.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{default_signal_ranges, Cohort, PatientRecord, Sex, TimeSeries, SURGERY_DURATION};
use crate::error::{Error, Result};
use crate::outcome::{compute_baseline, HORIZON_3DAY_H, HORIZON_7DAY_H};
use crate::stats;

pub const PREOP_DRIVERS: [&str; 10] = [
    "age",
    "male",
    "black",
    "ckd",
    "diabetes",
    "chf",
    "emergency",
    "low_hemoglobin",
    "bun",
    "surgery_type",
];
pub const INTRAOP_DRIVERS: [&str; 3] = ["hypotension", "tachycardia", "bleeding"];

pub const SURGERY_TYPES: [(&str, f64); 8] = [
    ("cardiac", 1.0),
    ("vascular", 0.8),
    ("transplant", 0.6),
    ("thoracic", 0.2),
    ("general", 0.0),
    ("urology", -0.2),
    ("orthopedic", -0.5),
    ("neurosurgery", -0.7),
];
pub const ADMISSION_SOURCES: [&str; 3] = ["home", "transfer", "emergency_dept"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub target_prevalence_7day: f64,
    pub preop_effect_weights: BTreeMap<String, f64>,
    pub intraop_effect_weights: BTreeMap<String, f64>,
    pub sampling_interval_min: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let preop = [
            ("age", 0.35),
            ("male", 0.15),
            ("black", 0.2),
            ("ckd", 0.9),
            ("diabetes", 0.35),
            ("chf", 0.5),
            ("emergency", 0.5),
            ("low_hemoglobin", 0.45),
            ("bun", 0.4),
            ("surgery_type", 0.8),
        ];
        let intraop = [("hypotension", 0.9), ("tachycardia", 0.4), ("bleeding", 0.6)];
        let to_map = |v: &[(&str, f64)]| v.iter().map(|(k, w)| (k.to_string(), *w)).collect();
        Self {
            n_patients: 2911,
            seed: 7,
            target_prevalence_7day: 0.40,
            preop_effect_weights: to_map(&preop),
            intraop_effect_weights: to_map(&intraop),
            sampling_interval_min: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::InvalidArgument("n_patients must be >= 1".into()));
        }
        let p = self.target_prevalence_7day;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("target prevalence {p} outside (0, 1)")));
        }
        if !(self.sampling_interval_min > 0.0 && self.sampling_interval_min.is_finite()) {
            return Err(Error::InvalidArgument("sampling_interval_min must be positive".into()));
        }
        let check = |weights: &BTreeMap<String, f64>, known: &[&str]| -> Result<()> {
            for (k, w) in weights {
                if !known.contains(&k.as_str()) {
                    return Err(Error::InvalidArgument(format!("unknown effect weight `{k}`")));
                }
                if !w.is_finite() {
                    return Err(Error::InvalidArgument(format!("effect weight `{k}` is not finite")));
                }
            }
            Ok(())
        };
        check(&self.preop_effect_weights, &PREOP_DRIVERS)?;
        check(&self.intraop_effect_weights, &INTRAOP_DRIVERS)
    }

    /// Copy with every intraoperative weight set to zero.
    pub fn without_intraop_effects(&self) -> Self {
        let mut c = self.clone();
        c.intraop_effect_weights.values_mut().for_each(|w| *w = 0.0);
        c
    }

    /// Copy with every preoperative weight set to zero.
    pub fn without_preop_effects(&self) -> Self {
        let mut c = self.clone();
        c.preop_effect_weights.values_mut().for_each(|w| *w = 0.0);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub intercept: f64,
    pub expected_prevalence_7day: f64,
    pub planned_prevalence_7day: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub summary: SynthSummary,
}

/// Preoperative drawing plus the two linear predictors.
struct Draft {
    record: PatientRecord,
    eta_preop: f64,
    eta_intraop: f64,
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn weight(w: &BTreeMap<String, f64>, k: &str) -> f64 {
    w.get(k).copied().unwrap_or(0.0)
}

/// Mean-reverting AR(1) path sampled every `dt` minutes (with jitter) from
/// 15 minutes before `start` to 15 minutes after `end`, with rare artifacts.
fn ar1_series(
    rng: &mut ChaCha8Rng,
    name: &str,
    (start, end): (f64, f64),
    dt: f64,
    mean: f64,
    sd: f64,
    range: (f64, f64),
) -> TimeSeries {
    let phi: f64 = 0.9;
    let innovation = sd * (1.0 - phi * phi).sqrt();
    let mut t = start - 15.0;
    let mut x = normal(rng, mean, sd);
    let mut samples = Vec::new();
    while t <= end + 15.0 {
        x = mean + phi * (x - mean) + normal(rng, 0.0, innovation);
        let u: f64 = rng.random();
        let v = if u < 0.004 {
            // transducer artifact outside the physiologic range
            range.1 + 20.0
        } else if u < 0.008 {
            x + 6.0 * sd
        } else {
            x
        };
        let v = if name == "mac" { round2(v.max(0.0)) } else { round1(v) };
        samples.push((round1(t), v));
        if rng.random::<f64>() < 0.01 {
            // duplicated reading at the same timestamp
            samples.push((round1(t), if name == "mac" { round2(x.max(0.0)) } else { round1(x) }));
        }
        t += dt * rng.random_range(0.8..1.2);
    }
    TimeSeries::new(name, samples, range)
}

fn draft_patient(i: usize, cfg: &SynthConfig, ranges: &BTreeMap<String, (f64, f64)>) -> Draft {
    let mut rng = stats::rng(stats::derive_seed_index(cfg.seed, i as u64));
    let pw = &cfg.preop_effect_weights;
    let iw = &cfg.intraop_effect_weights;

    let age = normal(&mut rng, 60.0, 14.0).clamp(18.0, 95.0).round();
    let male = rng.random::<f64>() < 0.6;
    let black = rng.random::<f64>() < 0.15;
    let ckd = rng.random::<f64>() < 0.12;
    let diabetes = rng.random::<f64>() < 0.25 + if ckd { 0.15 } else { 0.0 };
    let chf = rng.random::<f64>() < 0.1;
    let hypertension = rng.random::<f64>() < 0.45;
    let emergency = rng.random::<f64>() < 0.2;
    let hemoglobin = round1(normal(&mut rng, if male { 13.2 } else { 12.2 }, 1.8).clamp(6.0, 18.0));
    let bun = round1((normal(&mut rng, 16f64.ln(), 0.45) + if ckd { 0.5 } else { 0.0 }).exp());
    let (surgery_type, type_risk) = SURGERY_TYPES[rng.random_range(0..SURGERY_TYPES.len())];
    let admission = ADMISSION_SOURCES[rng.random_range(0..ADMISSION_SOURCES.len())];

    let eta_preop = weight(pw, "age") * (age - 60.0) / 14.0
        + weight(pw, "male") * f64::from(u8::from(male))
        + weight(pw, "black") * f64::from(u8::from(black))
        + weight(pw, "ckd") * f64::from(u8::from(ckd))
        + weight(pw, "diabetes") * f64::from(u8::from(diabetes))
        + weight(pw, "chf") * f64::from(u8::from(chf))
        + weight(pw, "emergency") * f64::from(u8::from(emergency))
        + weight(pw, "low_hemoglobin") * (11.0 - hemoglobin).max(0.0) / 1.5
        + weight(pw, "bun") * (bun / 16.0).ln() / 0.45
        + weight(pw, "surgery_type") * type_risk;

    // intraoperative latents are independent of everything preoperative
    let hypo: f64 = StandardNormal.sample(&mut rng);
    let tachy: f64 = StandardNormal.sample(&mut rng);
    let bleed: f64 = StandardNormal.sample(&mut rng);
    let eta_intraop = weight(iw, "hypotension") * hypo + weight(iw, "tachycardia") * tachy + weight(iw, "bleeding") * bleed;

    let start = round1(rng.random_range(0.0..60.0));
    let duration = round1(90.0 + 240.0 * rng.random::<f64>().powf(1.5));
    let end = start + duration;
    let window = (start, end);
    let dt = cfg.sampling_interval_min;
    let map_mean = 82.0 - 9.0 * hypo + normal(&mut rng, 0.0, 3.0);
    let mut series = BTreeMap::new();
    let mut add = |rng: &mut ChaCha8Rng, name: &str, mean: f64, sd: f64| {
        let range = ranges[name];
        series.insert(name.to_string(), ar1_series(rng, name, window, dt, mean, sd, range));
    };
    add(&mut rng, "map", map_mean, 7.0);
    add(&mut rng, "sbp", map_mean + 38.0, 10.0);
    add(&mut rng, "dbp", map_mean - 18.0, 6.0);
    let hr_mean = 74.0 + 11.0 * tachy + normal(&mut rng, 0.0, 4.0);
    add(&mut rng, "hr", hr_mean, 8.0);
    let mac_mean = normal(&mut rng, 0.85, 0.15).max(0.2);
    add(&mut rng, "mac", mac_mean, 0.12);

    let ebl = (5.3 + 0.8 * bleed + normal(&mut rng, 0.0, 0.35)).exp().round();
    let mut totals = BTreeMap::new();
    totals.insert("ebl_ml".to_string(), ebl);
    totals.insert(
        "fluids_ml".to_string(),
        (1200.0 + 1.5 * ebl + normal(&mut rng, 0.0, 300.0) + 3.0 * duration).max(100.0).round(),
    );
    totals.insert(
        "blood_products_ml".to_string(),
        if ebl > 700.0 { (0.6 * ebl + normal(&mut rng, 0.0, 100.0)).max(0.0).round() } else { 0.0 },
    );
    totals.insert("urine_ml".to_string(), (normal(&mut rng, 350.0, 150.0) + duration).max(0.0).round());
    totals.insert(SURGERY_DURATION.to_string(), end - start);

    let mut meds = BTreeMap::new();
    meds.insert("vasopressor".to_string(), hypo + normal(&mut rng, 0.0, 0.7) > 0.8);
    meds.insert("diuretic".to_string(), rng.random::<f64>() < 0.15);
    meds.insert("nsaid".to_string(), rng.random::<f64>() < 0.1);

    let mut labs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let n_draws = rng.random_range(1..=4);
    for k in 0..n_draws {
        let t = round1(start + duration * (k as f64 + 0.5) / n_draws as f64);
        let lactate = (0.2 + (1.1 + 0.45 * bleed.max(0.0) + 0.3 * hypo.max(0.0)) * normal(&mut rng, 1.0, 0.15)).max(0.3);
        labs.entry("lactate".into()).or_default().push((t, round2(lactate)));
        labs.entry("glucose".into()).or_default().push((t, round1(normal(&mut rng, 135.0, 30.0).max(50.0))));
        labs.entry("potassium".into()).or_default().push((t, round2(normal(&mut rng, 4.1, 0.4))));
        let fio2 = round2(rng.random_range(0.4..0.8));
        labs.entry("fio2".into()).or_default().push((t, fio2));
        let pf = normal(&mut rng, 330.0, 70.0).clamp(80.0, 550.0);
        if rng.random::<f64>() < 0.7 {
            labs.entry("po2".into()).or_default().push((t, round1(pf * fio2)));
        } else {
            let spo2 = ((pf * 0.84 + 64.0) * fio2).min(100.0);
            labs.entry("spo2".into()).or_default().push((t, round1(spo2)));
        }
    }

    let mut preop_categoricals = BTreeMap::new();
    preop_categoricals.insert("surgery_type".to_string(), surgery_type.to_string());
    preop_categoricals.insert("admission_source".to_string(), admission.to_string());
    let mut preop_binaries = BTreeMap::new();
    preop_binaries.insert("diabetes".to_string(), diabetes);
    preop_binaries.insert("chf".to_string(), chf);
    preop_binaries.insert("hypertension".to_string(), hypertension);
    preop_binaries.insert("emergency".to_string(), emergency);
    let mut preop_numerics = BTreeMap::new();
    if rng.random::<f64>() > 0.03 {
        preop_numerics.insert("hemoglobin".to_string(), hemoglobin);
    }
    preop_numerics.insert("bun".to_string(), bun);
    preop_numerics.insert("bmi".to_string(), round1(normal(&mut rng, 28.0, 5.5).clamp(15.0, 60.0)));

    // creatinine history: always for CKD, usually otherwise
    let mut creatinine_history = Vec::new();
    if ckd || rng.random::<f64>() < 0.7 {
        let level = if ckd { normal(&mut rng, 1.9, 0.4) } else { normal(&mut rng, 0.95, 0.18) };
        let level = round2(level.max(0.5));
        let n_hist = rng.random_range(1..=4);
        for k in 0..n_hist {
            // most records fall in the prior year; some are older
            let days = round1(rng.random_range(5.0..if ckd { 500.0 } else { 360.0 }));
            let v = if k == 0 { level } else { round2(level * rng.random_range(1.0..1.15)) };
            creatinine_history.push((days, v));
        }
        creatinine_history.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let record = PatientRecord {
        patient_id: format!("P{:05}", i + 1),
        age,
        sex: if male { Sex::Male } else { Sex::Female },
        race_black: black,
        preop_categoricals,
        preop_binaries,
        preop_numerics,
        creatinine_history,
        postop_creatinine: Vec::new(),
        rrt_postop: false,
        ckd_documented: ckd,
        surgery_start_min: start,
        surgery_end_min: end,
        series,
        intraop_labs: labs,
        intraop_meds: meds,
        totals,
    };
    Draft {
        record,
        eta_preop,
        eta_intraop,
    }
}

/// Planned onset of the first KDIGO criterion, in hours after surgery.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Onset {
    None,
    At(f64),
}

/// Creatinine trajectory whose labels follow `onset`. Before onset, values
/// stay within `[b - 0.05, b + 0.2]`, which can neither exceed 1.5 b (for
/// b >= 0.5) nor rise by 0.3. At onset the value jumps to
/// `max(1.6 b, b + 0.35)`, firing both criteria.
fn creatinine_path(rng: &mut ChaCha8Rng, baseline: f64, onset: Onset) -> Vec<(f64, f64)> {
    let stay_h = match onset {
        Onset::At(t) => t + rng.random_range(24.0..96.0),
        Onset::None => rng.random_range(48.0..240.0),
    };
    let quiet = |rng: &mut ChaCha8Rng| round2(baseline + rng.random_range(-0.05..0.2)).max(0.1);
    let mut path = Vec::new();
    let mut t = rng.random_range(2.0..12.0);
    let onset_t = match onset {
        Onset::At(o) => o,
        Onset::None => f64::INFINITY,
    };
    while t < stay_h {
        if t >= onset_t {
            break;
        }
        path.push((round1(t), quiet(rng)));
        t += rng.random_range(10.0..26.0);
    }
    if let Onset::At(o) = onset {
        let peak = (1.6 * baseline).max(baseline + 0.35);
        let peak = (peak * 100.0).ceil() / 100.0;
        path.push((o, peak));
        let mut v = peak;
        let mut t = o + rng.random_range(10.0..26.0);
        while t < stay_h {
            v = (v - rng.random_range(0.0..0.3)).max(baseline);
            path.push((round1(t), round2(v)));
            t += rng.random_range(10.0..26.0);
        }
    }
    path
}

fn prevalence(etas: &[f64], intercept: f64) -> f64 {
    etas.iter().map(|e| stats::logistic(intercept + e)).sum::<f64>() / etas.len() as f64
}

/// Intercept `a` with `mean(logistic(a + eta)) = target`, by bisection to a
/// prevalence tolerance of 1e-3 (at most 100 iterations).
pub fn solve_intercept(etas: &[f64], target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-30.0, 30.0);
    let (p_lo, p_hi) = (prevalence(etas, lo), prevalence(etas, hi));
    if !(p_lo < target && target < p_hi) {
        return Err(Error::InfeasiblePrevalence {
            target,
            lo: p_lo,
            hi: p_hi,
        });
    }
    let mut mid = 0.0;
    for _ in 0..100 {
        mid = 0.5 * (lo + hi);
        let p = prevalence(etas, mid);
        if (p - target).abs() < 1e-3 {
            break;
        }
        if p < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Generates a cohort; identical configurations give identical cohorts
/// regardless of thread count (one RNG stream per patient).
pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let ranges = default_signal_ranges();
    let drafts: Vec<Draft> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| draft_patient(i, cfg, &ranges))
        .collect();
    let etas: Vec<f64> = drafts.iter().map(|d| d.eta_preop + d.eta_intraop).collect();
    let intercept = solve_intercept(&etas, cfg.target_prevalence_7day)?;

    let outcome_seed = stats::derive_seed(cfg.seed, "outcomes");
    let patients: Vec<(PatientRecord, bool)> = drafts
        .into_par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = stats::rng(stats::derive_seed_index(outcome_seed, i as u64));
            let risk = stats::logistic(intercept + d.eta_preop + d.eta_intraop);
            let aki_7day = rng.random::<f64>() < risk;
            let late = !aki_7day && rng.random::<f64>() < 0.2 * risk;
            let onset = if aki_7day {
                if rng.random::<f64>() < 0.85 {
                    Onset::At(round1(rng.random_range(4.0..HORIZON_3DAY_H)))
                } else {
                    Onset::At(round1(rng.random_range(HORIZON_3DAY_H + 1.0..HORIZON_7DAY_H)))
                }
            } else if late {
                Onset::At(round1(rng.random_range(HORIZON_7DAY_H + 1.0..400.0)))
            } else {
                Onset::None
            };
            let mut record = d.record;
            let baseline = compute_baseline(&record)?.value;
            record.postop_creatinine = creatinine_path(&mut rng, baseline, onset);
            record.rrt_postop = matches!(onset, Onset::At(t) if t < HORIZON_3DAY_H) && rng.random::<f64>() < 0.05;
            Ok((record, aki_7day))
        })
        .collect::<Result<_>>()?;

    let planned = patients.iter().filter(|p| p.1).count() as f64 / patients.len() as f64;
    let cohort = Cohort::new(patients.into_iter().map(|p| p.0).collect(), ranges)?;
    Ok(SyntheticCohort {
        cohort,
        summary: SynthSummary {
            intercept,
            expected_prevalence_7day: prevalence(&etas, intercept),
            planned_prevalence_7day: planned,
        },
    })
}
