use periop_core::cohort::split_indices;
use periop_core::features::{extract_features, finalize_matrix, fit_encoders, FeatureConfig};
use periop_core::outcome::{label_patient, OutcomeLabels};
use periop_core::preop::{fit_preop, PreopConfig};
use periop_core::synth::{generate_synthetic_cohort, SynthConfig};

/// Scrambling the outcomes of held-out rows must not change anything fitted
/// on the training rows.
#[test]
fn test_outcomes_do_not_reach_training_artifacts() {
    let synth = SynthConfig {
        n_patients: 300,
        seed: 21,
        ..SynthConfig::default()
    };
    let cohort = generate_synthetic_cohort(&synth).unwrap().cohort;
    let labels: Vec<OutcomeLabels> = cohort.patients.iter().map(|p| label_patient(p).unwrap().1).collect();
    let (train, test) = split_indices(&cohort, &labels, 0.7, 5).unwrap();

    let mut scrambled = labels.clone();
    for (k, &i) in test.iter().enumerate() {
        let flip = k % 2 == 0;
        let l = &mut scrambled[i];
        l.aki_3day ^= flip;
        l.aki_7day ^= flip;
        l.aki_overall ^= !flip;
    }

    let cfg = FeatureConfig::default();
    let raw = extract_features(&cohort, &cfg).unwrap();
    let fit = |labels: &[OutcomeLabels]| {
        let y: Vec<bool> = labels.iter().map(|l| l.aki_7day).collect();
        let enc = fit_encoders(&raw, &train, &y, cfg.encoder_alpha).unwrap();
        let m = finalize_matrix(&raw, &enc, labels, &train, &cfg).unwrap();
        let tr = m.select_rows(&train);
        let y_tr = tr.outcomes[&periop_core::outcome::Outcome::Aki7Day].clone();
        let pcfg = PreopConfig {
            lambda_grid: vec![0.1, 1.0, 10.0],
            folds: 3,
            ..PreopConfig::default()
        };
        let model = fit_preop(&tr.preop(), &y_tr, &pcfg).unwrap().model;
        (enc, tr, m.select_rows(&test).rows, model.to_json().unwrap())
    };
    let (enc_a, tr_a, te_a, model_a) = fit(&labels);
    let (enc_b, tr_b, te_b, model_b) = fit(&scrambled);
    assert_eq!(enc_a, enc_b);
    assert_eq!(tr_a, tr_b);
    assert_eq!(te_a, te_b);
    assert_eq!(model_a, model_b);
}
