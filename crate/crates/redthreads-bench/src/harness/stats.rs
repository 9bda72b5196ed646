//! Summary statistics for campaign timing: means and seeded bootstrap
//! confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Percentile-bootstrap 95% confidence interval of the mean.
pub fn bootstrap_mean_ci(samples: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    assert!(!samples.is_empty(), "bootstrap of an empty sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..samples.len() {
                acc += samples[rng.gen_range(0..samples.len())];
            }
            acc / samples.len() as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = means[(resamples as f64 * 0.025) as usize];
    let hi = means[((resamples as f64 * 0.975) as usize).min(resamples - 1)];
    (lo, hi)
}

/// True when two intervals do not overlap.
pub fn disjoint(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}
