//! Empirical scaling of the single-parameter estimator's error.
//!
//! Each of `K` devices holds `S` IID N(0, 1) samples and reports their
//! mean; `floor(alpha K)` corrupted devices report a fixed constant instead.
//! Device streams are shared across grid points (device `i` in trial `t`
//! always draws from the same stream, and smaller `S` reads a prefix), so
//! neighbouring grid points differ only by the extra data.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::derive_seed;
use crate::aggregation::{scalar_global, ScalarEnsemble};
use crate::error::{Error, Result};
use crate::robust_regression::{median_in_place, DEFAULT_DELTA, DEFAULT_GAMMA, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub samples: Vec<usize>,
    pub devices: Vec<usize>,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub adversarial_value: f64,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            samples: vec![100, 400, 1600],
            devices: vec![10, 20, 40],
            alpha: 0.2,
            trials: 50,
            seed: 0,
            adversarial_value: 1e3,
            lambda: DEFAULT_LAMBDA,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub samples: usize,
    pub devices: usize,
    pub alpha: f64,
    pub trials: usize,
    pub median_abs_error: f64,
    /// Trials whose estimate left the honest estimates' range.
    pub outside_range: usize,
}

fn honest_estimate(seed: u64, trial: usize, device: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64, device as u64, 0));
    let total: f64 = (0..samples).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).sum();
    total / samples as f64
}

pub fn bound_experiment(cfg: &BoundConfig) -> Result<Vec<BoundRow>> {
    if !(0.0..0.5).contains(&cfg.alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 0.5), got {}", cfg.alpha)));
    }
    if cfg.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if cfg.samples.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    let mut rows = Vec::new();
    for &s in &cfg.samples {
        for &k in &cfg.devices {
            let corrupted = (cfg.alpha * k as f64).floor() as usize;
            let honest = k - corrupted;
            if honest == 0 {
                return Err(Error::invalid(format!("no honest device among {k}")));
            }
            let mut errors = Vec::with_capacity(cfg.trials);
            let mut outside = 0;
            for t in 0..cfg.trials {
                let mut estimates: Vec<f64> = (0..honest).map(|i| honest_estimate(cfg.seed, t, i, s)).collect();
                let (lo, hi) = estimates
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                estimates.extend(std::iter::repeat_n(cfg.adversarial_value, corrupted));
                let ensemble = ScalarEnsemble::new(estimates, cfg.lambda, cfg.delta, cfg.gamma)?;
                let g = scalar_global(&ensemble);
                if !(lo..=hi).contains(&g) {
                    outside += 1;
                }
                errors.push(g.abs());
            }
            rows.push(BoundRow {
                samples: s,
                devices: k,
                alpha: cfg.alpha,
                trials: cfg.trials,
                median_abs_error: median_in_place(&mut errors),
                outside_range: outside,
            });
        }
    }
    Ok(rows)
}

pub fn write_bound<W: Write>(out: W, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(PathBuf::from("<csv>"), e))
}
