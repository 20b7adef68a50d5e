use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const MIN_RESAMPLES: usize = 200;
pub const MAX_RESAMPLE_RETRIES: usize = 50;

/// Percentile-bootstrap 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Bootstraps `statistic` over row indices `0..labels.len()`.
///
/// Each resample draws `n` rows with replacement; a resample containing a
/// single class is redrawn (up to [`MAX_RESAMPLE_RETRIES`] times). Resample
/// `r` uses its own seed derived from `(seed, r)`, so results do not depend
/// on thread scheduling. Non-finite statistics (e.g. an undefined PPV) are
/// left out of the percentile computation.
pub fn bootstrap_ci<F>(labels: &[bool], n_resamples: usize, seed: u64, statistic: F) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least {MIN_RESAMPLES} resamples, got {n_resamples}"
        )));
    }
    let n = labels.len();
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all);
    if n == 0 {
        return Err(Error::InvalidArgument("empty bootstrap input".into()));
    }

    let draws: Vec<Result<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stats::rng(stats::derive_seed_index(seed, r as u64));
            let mut idx = vec![0usize; n];
            for _ in 0..=MAX_RESAMPLE_RETRIES {
                for slot in idx.iter_mut() {
                    *slot = rng.random_range(0..n);
                }
                let pos = idx.iter().filter(|&&i| labels[i]).count();
                if pos > 0 && pos < n {
                    return Ok(statistic(&idx));
                }
            }
            Err(Error::ResampleDegenerate(MAX_RESAMPLE_RETRIES))
        })
        .collect();

    let mut values = Vec::with_capacity(n_resamples);
    for d in draws {
        let v = d?;
        if v.is_finite() {
            values.push(v);
        }
    }
    let (lo, hi) = if values.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        values.sort_by(f64::total_cmp);
        (stats::quantile_sorted(&values, 0.025), stats::quantile_sorted(&values, 0.975))
    };
    Ok(BootstrapCi {
        point,
        lo,
        hi,
        n_resamples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::auroc;

    #[test]
    fn constant_statistic() {
        let labels = [true, false, true, false, true];
        let ci = bootstrap_ci(&labels, 200, 3, |_| 0.7).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (0.7, 0.7, 0.7));
    }

    #[test]
    fn auc_interval_contains_point() {
        let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let labels: Vec<bool> = scores.iter().enumerate().map(|(i, &s)| s + (i % 3) as f64 * 0.2 > 0.6).collect();
        let stat = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &y).unwrap()
        };
        let ci = bootstrap_ci(&labels, 500, 11, stat).unwrap();
        assert!(ci.lo <= ci.point && ci.point <= ci.hi);
        assert_eq!(ci, bootstrap_ci(&labels, 500, 11, stat).unwrap());
    }

    #[test]
    fn degenerate_and_invalid() {
        let labels = [false; 10];
        assert!(matches!(
            bootstrap_ci(&labels, 200, 1, |_| 0.0),
            Err(Error::ResampleDegenerate(_))
        ));
        assert!(matches!(
            bootstrap_ci(&[true, false], 10, 1, |_| 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
