use std::collections::BTreeMap;

use periop_core::cohort::{PatientRecord, Sex, TimeSeries};
use periop_core::evaluation::auroc;
use periop_core::features::decompose;
use periop_core::outcome::{label_outcomes, BaselineCreatinine, BaselineSource};
use periop_core::preprocessing::impute_tails;
use proptest::prelude::*;

fn patient(postop: Vec<(f64, f64)>) -> PatientRecord {
    PatientRecord {
        patient_id: "p".into(),
        age: 50.0,
        sex: Sex::Male,
        race_black: false,
        preop_categoricals: BTreeMap::new(),
        preop_binaries: BTreeMap::new(),
        preop_numerics: BTreeMap::new(),
        creatinine_history: Vec::new(),
        postop_creatinine: postop,
        rrt_postop: false,
        ckd_documented: false,
        surgery_start_min: 0.0,
        surgery_end_min: 60.0,
        series: BTreeMap::new(),
        intraop_labs: BTreeMap::new(),
        intraop_meds: BTreeMap::new(),
        totals: BTreeMap::new(),
    }
}

fn trajectory() -> impl Strategy<Value = (f64, Vec<(f64, f64)>)> {
    (
        (50u32..200).prop_map(|b| f64::from(b) / 100.0),
        prop::collection::vec(((0u32..400), (40u32..400)), 0..25).prop_map(|mut v| {
            v.sort();
            v.into_iter().map(|(t, c)| (f64::from(t), f64::from(c) / 100.0)).collect()
        }),
    )
}

fn baseline(value: f64) -> BaselineCreatinine {
    BaselineCreatinine {
        value,
        source: BaselineSource::MeasuredPriorYear,
    }
}

proptest! {
    #[test]
    fn horizons_are_nested((b, obs) in trajectory()) {
        let l = label_outcomes(&patient(obs), &baseline(b));
        prop_assert!(!l.aki_3day || l.aki_7day);
        prop_assert!(!l.aki_7day || l.aki_overall);
    }

    #[test]
    fn doubling_creatinine_never_removes_a_label((b, obs) in trajectory()) {
        let l = label_outcomes(&patient(obs.clone()), &baseline(b));
        let doubled: Vec<(f64, f64)> = obs.iter().map(|&(t, v)| (t, 2.0 * v)).collect();
        let l2 = label_outcomes(&patient(doubled), &baseline(2.0 * b));
        prop_assert!(!l.aki_3day || l2.aki_3day);
        prop_assert!(!l.aki_7day || l2.aki_7day);
        prop_assert!(!l.aki_overall || l2.aki_overall);
    }

    #[test]
    fn auroc_is_rank_based(
        data in prop::collection::vec((-100i32..100, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s)).collect();
        let labels: Vec<bool> = data.iter().map(|&(_, y)| y).collect();
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let stretched: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp()).collect();
        prop_assert!((auroc(&stretched, &labels).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn tail_imputation_keeps_shape_and_range(
        values in prop::collection::vec(prop_oneof![9 => -1e3f64..1e3, 1 => Just(f64::NAN)], 0..300),
        seed in any::<u64>(),
    ) {
        let (out, report) = impute_tails(&values, seed);
        prop_assert_eq!(out.len(), values.len());
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let mut changed = 0;
        for (a, b) in values.iter().zip(&out) {
            if a.is_nan() {
                prop_assert!(b.is_nan());
            } else {
                prop_assert!(*b >= lo && *b <= hi);
                changed += usize::from(a != b);
            }
        }
        prop_assert!(changed <= report.tail_imputed_low + report.tail_imputed_high);
    }

    #[test]
    fn decomposition_reconstructs_every_sample(
        values in prop::collection::vec(60.0f64..119.0, 1..200),
        w in 1usize..40,
    ) {
        let ts = TimeSeries::new("hr", values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(), (f64::NEG_INFINITY, f64::INFINITY));
        let (base, resid) = decompose(&ts, w);
        prop_assert_eq!(base.times(), ts.times());
        for ((&(_, x), &(_, b)), &(_, e)) in ts.samples.iter().zip(&base.samples).zip(&resid.samples) {
            prop_assert_eq!(b + e, x);
        }
    }
}
