//! Model aggregation: residual-based reweighting, the coordinate-wise
//! baselines, and the single-parameter estimator used for the error bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust_regression::{
    gaussian_confidence, median_in_place, median_line_kernel, normalize_residual,
    parameter_confidence, rank_into, repeated_median_kernel, residual_scale, theil_sen_kernel,
    ConfidenceParams, RegressionLine, RegressionScratch, DEFAULT_DELTA, DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
};

/// `K x N` matrix of local-model parameters, one model per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    k: usize,
    n: usize,
    values: Vec<f64>,
}

impl ParamMatrix {
    /// Builds a matrix from row-major values. Every entry must be finite.
    pub fn new(k: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if k < 1 {
            return Err(Error::invalid("parameter matrix needs at least one row"));
        }
        if values.len() != k * n {
            return Err(Error::DimensionMismatch {
                expected: k * n,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / n,
                column: i % n,
            });
        }
        Ok(Self { k, n, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.len();
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(k * n);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(k, n, values)
    }

    pub fn rows(&self) -> usize {
        self.k
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn get(&self, k: usize, n: usize) -> f64 {
        self.values[k * self.n + n]
    }

    fn column_into(&self, n: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.k).map(|k| self.values[k * self.n + n]));
    }

    fn require_pairs(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!(
                "aggregation needs at least 2 models, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ResidualReweight,
    Fedavg,
    CoordMedian,
    TrimmedMean,
    CoordRepeatedMedian,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ResidualReweight => "residual_reweight",
            Method::Fedavg => "fedavg",
            Method::CoordMedian => "coord_median",
            Method::TrimmedMean => "trimmed_mean",
            Method::CoordRepeatedMedian => "coord_repeated_median",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "residual_reweight" => Method::ResidualReweight,
            "fedavg" => Method::Fedavg,
            "coord_median" | "median" => Method::CoordMedian,
            "trimmed_mean" => Method::TrimmedMean,
            "coord_repeated_median" | "repeated_median" => Method::CoordRepeatedMedian,
            other => return Err(Error::invalid(format!("unknown aggregation method `{other}`"))),
        })
    }
}

/// Line estimator used inside residual reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    RepeatedMedian,
    TheilSen,
    MedianLine,
}

impl Estimator {
    fn fit(self, x: &[f64], y: &[f64], scratch: &mut RegressionScratch) -> RegressionLine {
        match self {
            Estimator::RepeatedMedian => repeated_median_kernel(x, y, scratch),
            Estimator::TheilSen => theil_sen_kernel(x, y, scratch),
            Estimator::MedianLine => median_line_kernel(y, scratch),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "repeated_median" => Estimator::RepeatedMedian,
            "theil_sen" => Estimator::TheilSen,
            "median_line" | "median" => Estimator::MedianLine,
            other => return Err(Error::invalid(format!("unknown estimator `{other}`"))),
        })
    }
}

/// How normalized residuals become parameter confidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Clipped Huber-style weights with leverage correction.
    #[default]
    Irls,
    /// Zero-mean Gaussian of the normalized residual.
    Gaussian,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "irls" => Weighting::Irls,
            "gaussian" => Weighting::Gaussian,
            other => return Err(Error::invalid(format!("unknown weighting `{other}`"))),
        })
    }
}

fn default_method() -> Method {
    Method::ResidualReweight
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_sigma_g() -> f64 {
    2.0
}
fn default_trim() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sigma_g")]
    pub sigma_g: f64,
    #[serde(default = "default_trim")]
    pub trim_fraction: f64,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self {
            method: default_method(),
            estimator: Estimator::default(),
            weighting: Weighting::default(),
            lambda: default_lambda(),
            delta: default_delta(),
            gamma: default_gamma(),
            sigma_g: default_sigma_g(),
            trim_fraction: default_trim(),
        }
    }
}

impl AggregatorSpec {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::invalid(format!(
                "trim_fraction must lie in [0, 0.5), got {}",
                self.trim_fraction
            )));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.sigma_g.is_nan() || self.sigma_g <= 0.0 {
            return Err(Error::invalid(format!(
                "sigma_g must be positive, got {}",
                self.sigma_g
            )));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Audit trail of one residual-reweighting pass. Matrices are `K x N`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    pub k: usize,
    pub n: usize,
    /// Parameter confidences after extreme-value correction.
    pub w: Vec<f64>,
    /// Population standard deviation of each confidence column.
    pub col_std: Vec<f64>,
    pub model_weights: Vec<f64>,
    pub normalized_weights: Vec<f64>,
    /// Parameter values after extreme-value correction.
    pub corrected: Vec<f64>,
}

impl ConfidenceReport {
    pub fn confidence(&self, k: usize, n: usize) -> f64 {
        self.w[k * self.n + n]
    }

    pub fn corrected_value(&self, k: usize, n: usize) -> f64 {
        self.corrected[k * self.n + n]
    }

    pub fn corrected_row(&self, k: usize) -> &[f64] {
        &self.corrected[k * self.n..(k + 1) * self.n]
    }
}

/// Per-column result, stored column-major until the report is assembled.
struct ColumnOutcome {
    w: Vec<f64>,
    y: Vec<f64>,
    std: f64,
}

struct ColumnWorker {
    y: Vec<f64>,
    x: Vec<f64>,
    order: Vec<usize>,
    abs: Vec<f64>,
    scratch: RegressionScratch,
}

impl ColumnWorker {
    fn new(k: usize) -> Self {
        Self {
            y: Vec::with_capacity(k),
            x: vec![0.0; k],
            order: Vec::with_capacity(k),
            abs: Vec::with_capacity(k),
            scratch: RegressionScratch::default(),
        }
    }

    fn process(
        &mut self,
        m: &ParamMatrix,
        n: usize,
        spec: &AggregatorSpec,
        cp: &ConfidenceParams,
        hat_by_rank: &[f64],
    ) -> ColumnOutcome {
        let k = m.rows();
        m.column_into(n, &mut self.y);
        rank_into(&self.y, &mut self.order, &mut self.x);
        let line = spec.estimator.fit(&self.x, &self.y, &mut self.scratch);

        self.abs.clear();
        self.abs.extend(
            self.x
                .iter()
                .zip(&self.y)
                .map(|(&x, &y)| (y - line.intercept - line.slope * x).abs()),
        );
        let tau = residual_scale(&mut self.abs, spec.gamma);

        let mut w = Vec::with_capacity(k);
        let mut y = Vec::with_capacity(k);
        for i in 0..k {
            let xi = self.x[i];
            let r = self.y[i] - line.intercept - line.slope * xi;
            let e = normalize_residual(r, tau);
            let h = hat_by_rank[xi as usize - 1];
            let conf = match spec.weighting {
                Weighting::Irls => parameter_confidence(e, h, cp),
                Weighting::Gaussian => gaussian_confidence(e, spec.sigma_g),
            };
            if conf <= spec.delta {
                w.push(0.0);
                y.push(line.at(xi));
            } else {
                w.push(conf);
                y.push(self.y[i]);
            }
        }
        let std = population_std(&w);
        ColumnOutcome { w, y, std }
    }
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Residual-based reweighting.
///
/// Every column is rank-indexed, fitted with the configured line estimator
/// and turned into parameter confidences; extreme values are pulled onto
/// the fitted line. Each model then receives one scalar weight, the sum of
/// its confidences scaled by the spread of each confidence column, and the
/// global model is the weighted average of the corrected rows.
pub fn residual_reweight_aggregate(
    m: &ParamMatrix,
    spec: &AggregatorSpec,
) -> Result<(Vec<f64>, ConfidenceReport)> {
    spec.validate()?;
    m.require_pairs()?;
    let (k, n) = (m.rows(), m.cols());
    let cp = ConfidenceParams::new(spec.lambda, spec.delta, k)?;
    let ranks: Vec<f64> = (1..=k).map(|r| r as f64).collect();
    let hat_by_rank = crate::robust_regression::hat_diagonal(&ranks);

    let columns: Vec<ColumnOutcome> = (0..n)
        .into_par_iter()
        .map_init(
            || ColumnWorker::new(k),
            |worker, col| worker.process(m, col, spec, &cp, &hat_by_rank),
        )
        .collect();

    let mut w = vec![0.0; k * n];
    let mut corrected = vec![0.0; k * n];
    let mut col_std = Vec::with_capacity(n);
    let mut model_weights = vec![0.0; k];
    for (col, outcome) in columns.iter().enumerate() {
        col_std.push(outcome.std);
        for row in 0..k {
            w[row * n + col] = outcome.w[row];
            corrected[row * n + col] = outcome.y[row];
            model_weights[row] += outcome.w[row] * outcome.std;
        }
    }

    let total: f64 = model_weights.iter().sum();
    let normalized_weights: Vec<f64> = if total > 0.0 {
        model_weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };

    let mut global = vec![0.0; n];
    for (row, &lambda) in normalized_weights.iter().enumerate() {
        if lambda == 0.0 {
            continue;
        }
        for (g, &v) in global.iter_mut().zip(&corrected[row * n..(row + 1) * n]) {
            *g += lambda * v;
        }
    }

    Ok((
        global,
        ConfidenceReport {
            k,
            n,
            w,
            col_std,
            model_weights,
            normalized_weights,
            corrected,
        },
    ))
}

/// Column-wise mean, weighted by `sample_counts` when given.
pub fn fedavg(m: &ParamMatrix, sample_counts: Option<&[f64]>) -> Result<Vec<f64>> {
    let k = m.rows();
    let weights: Vec<f64> = match sample_counts {
        Some(counts) => {
            if counts.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: counts.len(),
                });
            }
            if counts.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::invalid("sample counts must be positive"));
            }
            let total: f64 = counts.iter().sum();
            counts.iter().map(|c| c / total).collect()
        }
        None => vec![1.0 / k as f64; k],
    };
    let mut out = vec![0.0; m.cols()];
    for (row, &wk) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(m.row(row)) {
            *o += wk * v;
        }
    }
    Ok(out)
}

fn per_column<F>(m: &ParamMatrix, f: F) -> Vec<f64>
where
    F: Fn(&mut Vec<f64>) -> f64 + Sync,
{
    (0..m.cols())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(m.rows()),
            |buf, col| {
                m.column_into(col, buf);
                f(buf)
            },
        )
        .collect()
}

pub fn coord_median(m: &ParamMatrix) -> Vec<f64> {
    per_column(m, |col| median_in_place(col))
}

/// Drops `floor(trim_fraction * K)` values from each end of every column
/// and averages the rest.
pub fn trimmed_mean(m: &ParamMatrix, trim_fraction: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::invalid(format!(
            "trim_fraction must lie in [0, 0.5), got {trim_fraction}"
        )));
    }
    let k = m.rows();
    let cut = (trim_fraction * k as f64).floor() as usize;
    if k < 2 * cut + 1 {
        return Err(Error::invalid(format!(
            "trimming {cut} from each end of {k} values leaves nothing"
        )));
    }
    Ok(per_column(m, |col| {
        col.sort_by(f64::total_cmp);
        let kept = &col[cut..k - cut];
        kept.iter().sum::<f64>() / kept.len() as f64
    }))
}

/// Repeated-median line of each rank-indexed column, evaluated at the
/// center rank `(K + 1) / 2`.
pub fn coord_repeated_median(m: &ParamMatrix) -> Result<Vec<f64>> {
    m.require_pairs()?;
    let k = m.rows();
    let center = (k as f64 + 1.0) / 2.0;
    Ok((0..m.cols())
        .into_par_iter()
        .map_init(
            || ColumnWorker::new(k),
            |wk, col| {
                m.column_into(col, &mut wk.y);
                rank_into(&wk.y, &mut wk.order, &mut wk.x);
                repeated_median_kernel(&wk.x, &wk.y, &mut wk.scratch).at(center)
            },
        )
        .collect())
}

/// Output of [`aggregate`]; the report is present for residual reweighting.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub global: Vec<f64>,
    pub report: Option<ConfidenceReport>,
}

/// Runs whichever aggregator `spec.method` names.
pub fn aggregate(m: &ParamMatrix, spec: &AggregatorSpec) -> Result<Aggregate> {
    spec.validate()?;
    let (global, report) = match spec.method {
        Method::ResidualReweight => {
            let (g, r) = residual_reweight_aggregate(m, spec)?;
            (g, Some(r))
        }
        Method::Fedavg => (fedavg(m, None)?, None),
        Method::CoordMedian => (coord_median(m), None),
        Method::TrimmedMean => (trimmed_mean(m, spec.trim_fraction)?, None),
        Method::CoordRepeatedMedian => (coord_repeated_median(m)?, None),
    };
    Ok(Aggregate { global, report })
}

/// Single-parameter ensemble analysed by the error bound: each device
/// reports one estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEnsemble {
    pub estimates: Vec<f64>,
    pub params: ConfidenceParams,
    pub gamma: f64,
}

impl ScalarEnsemble {
    pub fn new(estimates: Vec<f64>, lambda: f64, delta: f64, gamma: f64) -> Result<Self> {
        let params = ConfidenceParams::new(lambda, delta, estimates.len())?;
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if estimates.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("estimates must be finite"));
        }
        Ok(Self {
            estimates,
            params,
            gamma,
        })
    }
}

/// Three-branch confidence of each estimate around the ensemble median:
/// 1 inside `sqrt(2) lambda / sqrt(K)`, decaying as `1/|e|` up to that
/// bound divided by `delta`, and 0 beyond.
pub fn simplified_confidence(s: &ScalarEnsemble) -> Vec<f64> {
    let k = s.estimates.len();
    let center = crate::robust_regression::median(&s.estimates);
    let mut abs: Vec<f64> = s.estimates.iter().map(|y| (y - center).abs()).collect();
    let tau = residual_scale(&mut abs, s.gamma);
    let inner = 2f64.sqrt() * s.params.lambda / (k as f64).sqrt();
    let outer = if s.params.delta > 0.0 {
        inner / s.params.delta
    } else {
        f64::INFINITY
    };
    s.estimates
        .iter()
        .map(|&y| {
            let e = normalize_residual(y - center, tau).abs();
            if e <= inner {
                1.0
            } else if e <= outer {
                inner / e
            } else {
                0.0
            }
        })
        .collect()
}

/// `sum z_i y_i / sum z_j`, or the plain mean if every confidence is zero.
pub fn scalar_global(s: &ScalarEnsemble) -> f64 {
    let z = simplified_confidence(s);
    weighted_scalar(&s.estimates, &z)
}

pub(crate) fn weighted_scalar(estimates: &[f64], z: &[f64]) -> f64 {
    let total: f64 = z.iter().sum();
    if total > 0.0 {
        z.iter().zip(estimates).map(|(z, y)| z * y).sum::<f64>() / total
    } else {
        estimates.iter().sum::<f64>() / estimates.len() as f64
    }
}
