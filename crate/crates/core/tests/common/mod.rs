#![allow(dead_code)]

use std::path::Path;

use periop_core::config::PipelineConfig;
use periop_core::forest::MaxFeatures;
use periop_core::stacking::ForestGrid;

/// A configuration small enough for an end-to-end run in a few seconds.
pub fn small_config(n_patients: usize, seed: u64, out_dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.synth.n_patients = n_patients;
    cfg.synth.seed = seed;
    cfg.out_dir = out_dir.to_path_buf();
    cfg.grid = ForestGrid {
        n_trees: vec![30],
        max_features: vec![MaxFeatures::Sqrt],
        min_samples_leaf: vec![5],
        max_depth: vec![None],
        alpha: vec![0.05],
    };
    cfg.cv_folds = 3;
    cfg.preop.folds = 3;
    cfg.preop.lambda_grid = vec![0.1, 1.0, 10.0];
    cfg.bootstrap_resamples = 200;
    cfg
}
