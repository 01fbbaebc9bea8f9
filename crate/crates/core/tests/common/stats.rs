//! Monte-Carlo checks of the categorical sampling machinery.

use mmbc::latent::{gumbel_max, gumbel_softmax_values, sample_gumbel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// χ² critical value for 3 degrees of freedom at significance 0.01.
pub const CHI2_3DF_001: f64 = 11.344_866_730_144_373;

pub struct GumbelMaxFit {
    pub counts: Vec<u64>,
    /// Largest |count − nλ| in binomial standard deviations.
    pub max_sigma: f64,
    pub chi2: f64,
}

pub fn gumbel_max_fit(probs: &[f64], draws: usize, seed: u64) -> GumbelMaxFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; probs.len()];
    for _ in 0..draws {
        let g = sample_gumbel(&mut rng, probs.len());
        counts[gumbel_max(probs, g.data()).unwrap().argmax()] += 1;
    }
    let n = draws as f64;
    let mut max_sigma = 0.0f64;
    let mut chi2 = 0.0;
    for (&c, &p) in counts.iter().zip(probs) {
        let expected = n * p;
        max_sigma = max_sigma.max((c as f64 - expected).abs() / (n * p * (1.0 - p)).sqrt());
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    GumbelMaxFit { counts, max_sigma, chi2 }
}

pub struct Limits {
    /// Smallest winning coordinate at the cold temperature.
    pub cold_min_max: f64,
    /// Cold trials whose argmax disagreed with Gumbel-Max.
    pub cold_mismatches: usize,
    /// Largest deviation from uniform at the hot temperature.
    pub hot_max_dev: f64,
}

pub fn softmax_limits(probs: &[f64], trials: usize, cold: f64, hot: f64, seed: u64) -> Limits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = probs.len() as f64;
    let mut out = Limits {
        cold_min_max: 1.0,
        cold_mismatches: 0,
        hot_max_dev: 0.0,
    };
    for _ in 0..trials {
        let g = sample_gumbel(&mut rng, probs.len());
        let y = gumbel_softmax_values(probs, g.data(), cold).unwrap();
        let winner = mmbc::tensor::argmax(&y);
        out.cold_min_max = out.cold_min_max.min(y[winner]);
        if winner != gumbel_max(probs, g.data()).unwrap().argmax() {
            out.cold_mismatches += 1;
        }
        let y = gumbel_softmax_values(probs, g.data(), hot).unwrap();
        for v in y {
            out.hot_max_dev = out.hot_max_dev.max((v - 1.0 / k).abs());
        }
    }
    out
}
