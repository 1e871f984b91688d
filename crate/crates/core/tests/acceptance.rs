//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any of them fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    contaminated, max_relative_error, oracle_confidence, oracle_hat, oracle_median, oracle_psi,
    oracle_repeated_median, oracle_tau, oracle_theil_sen, oracle_z, random_instance,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rfa_core::aggregation::{
    aggregate, residual_reweight_aggregate, scalar_global, simplified_confidence, AggregatorSpec, Method,
    ParamMatrix, ScalarEnsemble, Weighting,
};
use rfa_core::attacks::AttackKind;
use rfa_core::models::Architecture;
use rfa_core::robust_regression::{
    compute_residuals, correct_extreme, fit_repeated_median, fit_theil_sen, gaussian_confidence,
    hat_diagonal, parameter_confidence, ConfidenceParams, IndexedColumn, RegressionLine,
};
use rfa_core::sim::{bound_experiment, run_experiment, write_metrics, BoundConfig, MetricsRow};
use rfa_core::ExperimentConfig;

const TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Outcome, String>;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < TOL
}

fn col(x: &[f64], y: &[f64]) -> IndexedColumn {
    IndexedColumn::from_points(x.to_vec(), y.to_vec()).unwrap()
}

fn check(failures: &mut Vec<String>, name: &str, got: f64, want: f64) {
    if !close(got, want) {
        failures.push(format!("{name}: {got} vs {want}"));
    }
}

fn kernels() -> Result<Outcome, String> {
    let mut failures = Vec::new();
    let (x, y) = ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 10.0]);

    let rm = fit_repeated_median(&col(&x, &y)).map_err(|e| e.to_string())?;
    let (s, i) = oracle_repeated_median(&x, &y);
    check(&mut failures, "rm slope", rm.slope, s);
    check(&mut failures, "rm intercept", rm.intercept, i);
    check(&mut failures, "rm slope value", rm.slope, 1.0);
    check(&mut failures, "rm intercept value", rm.intercept, 0.0);

    let ts = fit_theil_sen(&col(&x, &y)).map_err(|e| e.to_string())?;
    let (s, i) = oracle_theil_sen(&x, &y);
    check(&mut failures, "ts slope", ts.slope, s);
    check(&mut failures, "ts intercept", ts.intercept, i);
    check(&mut failures, "ts slope value", ts.slope, 2.0);
    check(&mut failures, "ts intercept value", ts.intercept, -1.5);

    let zero_line = RegressionLine {
        slope: 0.0,
        intercept: 0.0,
    };
    let r = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let stats = compute_residuals(&col(&[1.0, 2.0, 3.0, 4.0, 5.0], &r), &zero_line, 1.48).map_err(|e| e.to_string())?;
    check(&mut failures, "tau", stats.tau, oracle_tau(&r, 1.48));
    check(&mut failures, "tau value", stats.tau, 1.48 * 2.25);
    let r = [0.0, 0.0, 0.0, 5.0];
    let stats = compute_residuals(&col(&x, &r), &zero_line, 1.48).map_err(|e| e.to_string())?;
    check(&mut failures, "degenerate tau", stats.tau, 0.0);
    if stats.normalized[..3] != [0.0; 3] || stats.normalized[3] != f64::INFINITY {
        failures.push(format!("sentinel: {:?}", stats.normalized));
    }

    for (xs, want) in [
        (vec![1.0, 2.0, 3.0], vec![1.0 / 14.0, 4.0 / 14.0, 9.0 / 14.0]),
        (vec![1.0, 2.0], vec![0.2, 0.8]),
    ] {
        let h = hat_diagonal(&xs);
        for ((a, b), c) in h.iter().zip(oracle_hat(&xs)).zip(want) {
            check(&mut failures, "hat", *a, b);
            check(&mut failures, "hat value", *a, c);
        }
    }

    let cp = ConfidenceParams::new(2.0, 0.01, 8).map_err(|e| e.to_string())?;
    check(&mut failures, "Z", cp.z, 1.0);
    check(&mut failures, "psi", oracle_psi(0.5, cp.z), 0.5);
    for (e, want) in [(0.5, 1.0), (2.0, 0.5), (-2.0, 0.5)] {
        let w = parameter_confidence(e, 0.0, &cp);
        check(&mut failures, "confidence", w, oracle_confidence(e, 0.0, 2.0, 8));
        check(&mut failures, "confidence value", w, want);
    }
    for h in [0.1, 0.3] {
        check(&mut failures, "leveraged confidence", parameter_confidence(1.7, h, &cp), oracle_confidence(1.7, h, 2.0, 8));
    }
    check(&mut failures, "gaussian", gaussian_confidence(2.0, 2.0), (-0.5f64).exp());

    let identity = RegressionLine {
        slope: 1.0,
        intercept: 0.0,
    };
    let (yc, wc) = correct_extreme(&col(&[1.0, 2.0, 3.0], &[1.0, 2.0, 99.0]), &[1.0, 1.0, 0.001], &identity, 0.01)
        .map_err(|e| e.to_string())?;
    if yc != [1.0, 2.0, 3.0] || wc != [1.0, 1.0, 0.0] {
        failures.push(format!("correction: {yc:?} {wc:?}"));
    }

    // Median 0 and median absolute deviation 1, so tau reduces to the constant factor.
    let tau = 1.48 * (1.0 + 5.0 / 7.0);
    let estimates = vec![0.5 * tau, 2.0 * tau, 200.0 * tau, 0.0, 0.0, -0.5, -1.0, -1.0];
    let abs: Vec<f64> = estimates.iter().map(|v| (v - oracle_median(&estimates)).abs()).collect();
    if !close(oracle_median(&abs), 1.0) || !close(oracle_median(&estimates), 0.0) {
        return Err("scalar fixture is not centred".into());
    }
    let s = ScalarEnsemble::new(estimates, 2.0, 0.01, 1.48).map_err(|e| e.to_string())?;
    let z = simplified_confidence(&s);
    for (k, want) in [(0, 1.0), (1, 0.5), (2, 0.0)] {
        check(&mut failures, "z", z[k], oracle_z(s.estimates[k] / tau, 2.0, 0.01, 8));
        check(&mut failures, "z value", z[k], want);
    }
    let s = ScalarEnsemble::new(vec![1.0, 1.0, 1.0, 9.0], 2.0, 0.01, 1.48).map_err(|e| e.to_string())?;
    if simplified_confidence(&s)[3] == 0.0 {
        check(&mut failures, "scalar global", scalar_global(&s), 1.0);
    } else {
        failures.push(format!("outlier kept confidence {:?}", simplified_confidence(&s)));
    }

    let m = ParamMatrix::new(5, 1, vec![1.0, 1.01, 0.99, 1.02, 50.0]).unwrap();
    let (g, report) = residual_reweight_aggregate(&m, &AggregatorSpec::default()).map_err(|e| e.to_string())?;
    if report.confidence(4, 0) != 0.0 || (g[0] - 1.005).abs() >= 0.03 {
        failures.push(format!("outlier column: global {} confidence {}", g[0], report.confidence(4, 0)));
    }

    Ok(Outcome::new(failures.is_empty(), if failures.is_empty() { "all examples exact".into() } else { failures.join("; ") }))
}

fn breakdown() -> Result<Outcome, String> {
    let mut rm_exact = 0;
    let mut ts_broken = 0;
    for seed in 0..200 {
        let (x, y, b) = contaminated(seed);
        let c = IndexedColumn::from_points(x, y).map_err(|e| e.to_string())?;
        if (fit_repeated_median(&c).map_err(|e| e.to_string())?.slope - b).abs() < 1e-9 {
            rm_exact += 1;
        }
        if (fit_theil_sen(&c).map_err(|e| e.to_string())?.slope - b).abs() > 1e-6 {
            ts_broken += 1;
        }
    }
    Ok(Outcome::new(
        rm_exact == 200 && ts_broken > 0,
        format!("repeated median exact {rm_exact}/200, theil-sen broken {ts_broken}/200"),
    ))
}

fn gradients() -> Result<Outcome, String> {
    let mut worst = 0.0f64;
    for arch in [
        Architecture::softmax_regression(5, 4).map_err(|e| e.to_string())?,
        Architecture::mlp(5, 6, 4).map_err(|e| e.to_string())?,
    ] {
        for seed in 0..50 {
            let (m, x, y) = random_instance(seed, &arch);
            worst = worst.max(max_relative_error(&m, &x, &y));
        }
    }
    Ok(Outcome::new(worst < 1e-6, format!("max relative error {worst:.2e} over 100 instances")))
}

fn load(text: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::from_toml(text).map_err(|e| e.to_string())?;
    cfg.wall_clock = false;
    cfg.output = None;
    Ok(cfg)
}

fn with_method(cfg: &ExperimentConfig, method: Method) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.aggregator.method = method;
    cfg
}

fn without_attack(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.attackers = 0;
    cfg.attacker_ids = None;
    cfg
}

fn rows(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>, String> {
    run_experiment(cfg, 1, None).map_err(|e| e.to_string())
}

fn final_row(cfg: &ExperimentConfig) -> Result<MetricsRow, String> {
    rows(cfg)?.pop().ok_or_else(|| "no rounds".to_string())
}

fn asr(row: &MetricsRow) -> Result<f64, String> {
    row.asr.ok_or_else(|| "missing attack success rate".to_string())
}

const LABEL_FLIP: &str = include_str!("../../../configs/label_flip.toml");
const BACKDOOR: &str = include_str!("../../../configs/backdoor_naive.toml");
const REPLACEMENT: &str = include_str!("../../../configs/model_replacement.toml");
const NOISE: &str = include_str!("../../../configs/gaussian_noise.toml");
const MIXING: &str = include_str!("../../../configs/model_mixing.toml");

fn label_flip() -> Result<Outcome, String> {
    let cfg = load(LABEL_FLIP)?;
    if cfg.num_attackers() != 3 || cfg.attack.kind != AttackKind::LabelFlip {
        return Err("label flip config drifted".into());
    }
    let rr = final_row(&cfg)?.accuracy;
    let rr_clean = final_row(&without_attack(&cfg))?.accuracy;
    let fa = final_row(&with_method(&cfg, Method::Fedavg))?.accuracy;
    let fa_clean = final_row(&with_method(&without_attack(&cfg), Method::Fedavg))?.accuracy;
    let (rr_drop, fa_drop) = (rr_clean - rr, fa_clean - fa);
    Ok(Outcome::new(
        rr_drop <= 0.03 && fa_drop >= rr_drop + 0.10,
        format!("residual_reweight {rr_clean:.3} -> {rr:.3}, fedavg {fa_clean:.3} -> {fa:.3}"),
    ))
}

fn backdoor() -> Result<Outcome, String> {
    let cfg = load(BACKDOOR)?;
    let rr = final_row(&cfg)?;
    let clean = final_row(&without_attack(&cfg))?;
    let fa = final_row(&with_method(&cfg, Method::Fedavg))?;
    let (rr_asr, fa_asr) = (asr(&rr)?, asr(&fa)?);
    Ok(Outcome::new(
        rr_asr <= 0.20 && (clean.accuracy - rr.accuracy).abs() <= 0.02 && fa_asr >= 0.80,
        format!(
            "residual_reweight asr {rr_asr:.3} accuracy {:.3} (clean {:.3}), fedavg asr {fa_asr:.3}",
            rr.accuracy, clean.accuracy
        ),
    ))
}

fn replacement() -> Result<Outcome, String> {
    let cfg = load(REPLACEMENT)?;
    let at = cfg.attack.attack_round;
    let rr = rows(&cfg)?;
    let fa = rows(&with_method(&cfg, Method::Fedavg))?;
    let window: Vec<f64> = rr
        .iter()
        .filter(|r| r.round > at && r.round <= at + 5)
        .map(asr)
        .collect::<Result<_, _>>()?;
    let rr_max = window.iter().copied().fold(0.0, f64::max);
    let spike = fa.iter().find(|r| r.round == at + 1).map(asr).transpose()?.unwrap_or(0.0);
    Ok(Outcome::new(
        window.len() == 5 && rr_max <= 0.20 && spike >= 0.5,
        format!("residual_reweight max asr {rr_max:.3} in rounds {}..{}, fedavg asr {spike:.3} in round {}", at + 1, at + 5, at + 1),
    ))
}

fn noise() -> Result<Outcome, String> {
    let cfg = load(NOISE)?;
    let rr = final_row(&cfg)?.accuracy;
    let clean = final_row(&without_attack(&cfg))?.accuracy;
    let fa = final_row(&with_method(&cfg, Method::Fedavg))?.accuracy;
    Ok(Outcome::new(
        rr >= fa + 0.20 && clean - rr <= 0.05,
        format!("residual_reweight {rr:.3} (clean {clean:.3}), fedavg {fa:.3}"),
    ))
}

fn mixing() -> Result<Outcome, String> {
    let base = load(MIXING)?;
    let mut accs = Vec::new();
    for rate in [0.5, 0.1, 0.01, 0.0001] {
        let mut cfg = base.clone();
        cfg.attack.mix_rate = Some(rate);
        accs.push(final_row(&cfg)?.accuracy);
    }
    let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(hi - lo <= 0.03, format!("accuracies {accs:.3?}, spread {:.3}", hi - lo)))
}

fn bound() -> Result<Outcome, String> {
    let cfg = BoundConfig::default();
    let rows = bound_experiment(&cfg).map_err(|e| e.to_string())?;
    let pick = |s: usize, k: usize| rows.iter().find(|r| r.samples == s && r.devices == k).map(|r| r.median_abs_error);
    let along_s: Vec<f64> = [100, 400, 1600].iter().filter_map(|&s| pick(s, 20)).collect();
    let along_k: Vec<f64> = [10, 20, 40].iter().filter_map(|&k| pick(400, k)).collect();
    let non_increasing = |v: &[f64]| v.len() == 3 && v.windows(2).all(|w| w[1] <= w[0]);
    let outside: usize = rows.iter().map(|r| r.outside_range).sum();
    Ok(Outcome::new(
        non_increasing(&along_s) && non_increasing(&along_k) && outside == 0,
        format!("errors along S {along_s:.5?}, along K {along_k:.5?}, estimates outside honest range {outside}"),
    ))
}

fn matrix() -> impl Strategy<Value = ParamMatrix> {
    (3usize..12, 1usize..8).prop_flat_map(|(k, n)| {
        prop::collection::vec(-5.0f64..5.0, k * n).prop_map(move |v| ParamMatrix::new(k, n, v).unwrap())
    })
}

fn invariants() -> Result<Outcome, String> {
    let cases = 128;
    let specs = [
        AggregatorSpec::default(),
        AggregatorSpec {
            weighting: Weighting::Gaussian,
            ..AggregatorSpec::default()
        },
    ];
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(matrix(), any::<u64>()), |(m, seed)| {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..m.rows()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
            let shuffled = ParamMatrix::from_rows(&rows).unwrap();
            for spec in &specs {
                let (g, r) = residual_reweight_aggregate(&m, spec).unwrap();
                let (g2, r2) = residual_reweight_aggregate(&shuffled, spec).unwrap();
                for (a, b) in g.iter().zip(&g2) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                for (new, &old) in perm.iter().enumerate() {
                    prop_assert!((r2.normalized_weights[new] - r.normalized_weights[old]).abs() < 1e-9);
                }
                prop_assert!((r.normalized_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (n, &gn) in g.iter().enumerate() {
                    let manual: f64 = (0..m.rows()).map(|k| r.normalized_weights[k] * r.corrected_value(k, n)).sum();
                    prop_assert!((gn - manual).abs() < 1e-12);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("aggregation properties: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(prop::collection::vec(-5.0f64..5.0, 1..10), 2usize..12), |(row, k)| {
            let m = ParamMatrix::from_rows(&vec![row.clone(); k]).unwrap();
            for method in [Method::ResidualReweight, Method::Fedavg, Method::CoordMedian, Method::TrimmedMean, Method::CoordRepeatedMedian] {
                let g = aggregate(&m, &AggregatorSpec::with_method(method)).unwrap().global;
                for (a, b) in g.iter().zip(&row) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("consensus: {e}"))?;

    let base = load(SMALL)?;
    for seed in 0..100 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let csv = || -> Result<Vec<u8>, String> {
            let mut out = Vec::new();
            write_metrics(&mut out, &rows(&cfg)?).map_err(|e| e.to_string())?;
            Ok(out)
        };
        if csv()? != csv()? {
            return Ok(Outcome::new(false, format!("csv rerun differs for seed {seed}")));
        }
    }
    Ok(Outcome::new(true, format!("{cases} aggregation cases, {cases} consensus cases, 100 csv reruns")))
}

const SMALL: &str = r#"
    seed = 0
    rounds = 2
    participants = 5
    attackers = 1

    [dataset]
    source = "blobs"
    classes = 4
    dim = 6
    train_per_class = 30
    test_per_class = 10
    spread = 1.0
    partition = { kind = "shards", classes_per_participant = 2 }

    [model]
    kind = "mlp"
    hidden = 6

    [train]
    epochs = 1
    lr = 0.05
    batch_size = 16

    [attack]
    kind = "label_flip"
    src_label = 1
    dst_label = 3

    [aggregator]
    method = "residual_reweight"
"#;

fn main() -> ExitCode {
    let criteria: [(Check, Duration); 10] = [
        (kernels, Duration::from_secs(1)),
        (breakdown, Duration::from_secs(5)),
        (gradients, Duration::from_secs(10)),
        (label_flip, Duration::from_secs(300)),
        (backdoor, Duration::from_secs(300)),
        (replacement, Duration::from_secs(300)),
        (noise, Duration::from_secs(300)),
        (mixing, Duration::from_secs(600)),
        (bound, Duration::from_secs(30)),
        (invariants, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (i, (check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} ({}; {:.2}s of {}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
