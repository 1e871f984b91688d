//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfa_core::models::{init_model, loss, loss_and_grad, Architecture, FlatModel};

pub fn oracle_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Nested medians of the pairwise slope and pairwise intercept terms,
/// written out literally.
pub fn oracle_repeated_median(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len();
    let mut slopes = Vec::new();
    let mut intercepts = Vec::new();
    for i in 0..k {
        let mut s = Vec::new();
        let mut c = Vec::new();
        for j in 0..k {
            if j != i {
                s.push((y[j] - y[i]) / (x[j] - x[i]));
                c.push((x[j] * y[i] - x[i] * y[j]) / (x[j] - x[i]));
            }
        }
        slopes.push(oracle_median(&s));
        intercepts.push(oracle_median(&c));
    }
    (oracle_median(&slopes), oracle_median(&intercepts))
}

/// Median of all pairwise slopes, and median of `y - slope * x`.
pub fn oracle_theil_sen(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut slopes = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            slopes.push((y[j] - y[i]) / (x[j] - x[i]));
        }
    }
    let slope = oracle_median(&slopes);
    let offsets: Vec<f64> = x.iter().zip(y).map(|(&x, &y)| y - slope * x).collect();
    (slope, oracle_median(&offsets))
}

pub fn oracle_tau(r: &[f64], gamma: f64) -> f64 {
    let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
    gamma * oracle_median(&abs) * (1.0 + 5.0 / (r.len() as f64 - 1.0))
}

pub fn oracle_psi(t: f64, z: f64) -> f64 {
    if t > z {
        z
    } else if t < -z {
        -z
    } else {
        t
    }
}

pub fn oracle_confidence(e: f64, h: f64, lambda: f64, k: usize) -> f64 {
    let z = lambda * (2.0 / k as f64).sqrt();
    let s = (1.0 - h).sqrt();
    s / e * oracle_psi(e / s, z)
}

pub fn oracle_hat(x: &[f64]) -> Vec<f64> {
    let total: f64 = x.iter().map(|v| v * v).sum();
    x.iter().map(|v| v * v / total).collect()
}

/// Three-branch confidence for an already normalized residual.
pub fn oracle_z(e: f64, lambda: f64, delta: f64, k: usize) -> f64 {
    let inner = 2f64.sqrt() * lambda / (k as f64).sqrt();
    if e.abs() <= inner {
        1.0
    } else if e.abs() <= inner / delta {
        inner / e.abs()
    } else {
        0.0
    }
}

/// `honest` points on a line plus adversarial points at arbitrary design
/// positions and values.
pub fn contaminated(seed: u64) -> (Vec<f64>, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
    let mut x: Vec<f64> = (1..=11).map(f64::from).collect();
    let mut y: Vec<f64> = x.iter().map(|&v| a + b * v).collect();
    for i in 7..11 {
        x[i] = rng.random_range(20.0..80.0) + i as f64;
        y[i] = rng.random_range(-1e3..1e3);
    }
    (x, y, b)
}

/// Gradients below this magnitude (dead ReLU units) are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest relative error between the analytic gradient and a five-point
/// central difference over every coordinate.
pub fn max_relative_error(model: &FlatModel, x: &[f64], y: &[usize]) -> f64 {
    let (_, grad) = loss_and_grad(model, x, y).unwrap();
    let step = 1e-4;
    let at = |i: usize, offset: f64| {
        let mut m = model.clone();
        m.params_mut()[i] += offset;
        loss(&m, x, y).unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, &g) in grad.iter().enumerate() {
        let numeric =
            (at(i, -2.0 * step) - 8.0 * at(i, -step) + 8.0 * at(i, step) - at(i, 2.0 * step)) / (12.0 * step);
        let rel = (numeric - g).abs() / (numeric.abs() + g.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Smallest distance of a hidden pre-activation from the ReLU kink.
fn kink_margin(model: &FlatModel, x: &[f64]) -> f64 {
    let layers = model.to_layers();
    let mut margin = f64::INFINITY;
    for row in x.chunks(model.arch().input_dim()) {
        let mut act = row.to_vec();
        for layer in &layers[..layers.len() - 1] {
            let z: Vec<f64> = (0..layer.shape.outputs)
                .map(|o| {
                    let w = &layer.weights[o * layer.shape.inputs..(o + 1) * layer.shape.inputs];
                    layer.bias[o] + w.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            act = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

/// Random parameters and batch. Inputs are redrawn until no hidden unit
/// sits within the finite-difference stencil of the ReLU kink.
pub fn random_instance(seed: u64, arch: &Architecture) -> (FlatModel, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_model(arch, seed);
    for p in model.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let n = rng.random_range(1..8);
    loop {
        let x: Vec<f64> = (0..n * arch.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        if kink_margin(&model, &x) > 1e-2 {
            let y = (0..n).map(|_| rng.random_range(0..arch.output_dim())).collect();
            return (model, x, y);
        }
    }
}

