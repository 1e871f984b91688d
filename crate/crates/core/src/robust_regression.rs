//! Robust line estimators and the residual-based confidence kernels that
//! operate on a single parameter column.
//!
//! A column holds the `K` values of one parameter across all local models.
//! Each value is paired with its rank (1-based, ties broken by participant
//! index), which turns the column into a monotone point set. A robust line
//! through those points gives every value a residual, and the normalized
//! residual decides how much the value is trusted.

use crate::error::{Error, Result};

/// Default constant applied to the median absolute residual.
pub const DEFAULT_GAMMA: f64 = 1.48;
/// Default width of the trusted interval.
pub const DEFAULT_LAMBDA: f64 = 2.0;
/// Default confidence threshold below which a value is replaced.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Median of a slice, reordering it in place.
///
/// Even-length inputs return the mean of the two middle order statistics.
/// An empty slice returns NaN.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (lower, upper_mid, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper_mid = *upper_mid;
    if n % 2 == 1 {
        upper_mid
    } else {
        let lower_mid = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_mid + upper_mid)
    }
}

/// Median of a slice without modifying it.
pub fn median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    median_in_place(&mut buf)
}

/// Writes the 1-based rank of every value into `ranks`.
///
/// Equal values keep their original order, so ties are broken by position.
pub fn rank_into(values: &[f64], order: &mut Vec<usize>, ranks: &mut [f64]) {
    debug_assert_eq!(values.len(), ranks.len());
    order.clear();
    order.extend(0..values.len());
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = (rank + 1) as f64;
    }
}

/// A parameter column paired with design points.
///
/// Built with [`IndexedColumn::from_values`], `x` holds the ranks of `y`.
/// [`IndexedColumn::from_points`] accepts an arbitrary design with distinct
/// `x`, which the estimators also support.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedColumn {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl IndexedColumn {
    /// Pairs each value with its rank among `values`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("column must contain at least one value"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, column: 0 });
        }
        let mut x = vec![0.0; values.len()];
        rank_into(values, &mut Vec::with_capacity(values.len()), &mut x);
        Ok(Self {
            x,
            y: values.to_vec(),
        })
    }

    /// Uses caller-provided design points. `x` values must be pairwise distinct.
    pub fn from_points(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::invalid("column must contain at least one value"));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i % x.len(),
                column: 0,
            });
        }
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("design points must be pairwise distinct"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionLine {
    pub intercept: f64,
    pub slope: f64,
}

impl RegressionLine {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn require_pairs(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "line fit needs at least 2 points, got {k}"
        )));
    }
    Ok(())
}

/// Siegel's repeated median on raw slices. `scratch` is reused across calls.
///
/// The pairwise intercept `(x_j y_i - x_i y_j) / (x_j - x_i)` is evaluated
/// as `y_i - x_i * slope_ij`, which is the same quantity but leaves `y_i`
/// untouched when the pair has zero slope.
pub(crate) fn repeated_median_kernel(
    x: &[f64],
    y: &[f64],
    scratch: &mut RegressionScratch,
) -> RegressionLine {
    let k = x.len();
    scratch.outer_slopes.clear();
    scratch.outer_intercepts.clear();
    for i in 0..k {
        scratch.slopes.clear();
        scratch.intercepts.clear();
        for j in 0..k {
            if j == i {
                continue;
            }
            let slope = (y[j] - y[i]) / (x[j] - x[i]);
            scratch.slopes.push(slope);
            scratch.intercepts.push(y[i] - x[i] * slope);
        }
        scratch
            .outer_slopes
            .push(median_in_place(&mut scratch.slopes));
        scratch
            .outer_intercepts
            .push(median_in_place(&mut scratch.intercepts));
    }
    RegressionLine {
        slope: median_in_place(&mut scratch.outer_slopes),
        intercept: median_in_place(&mut scratch.outer_intercepts),
    }
}

pub(crate) fn theil_sen_kernel(
    x: &[f64],
    y: &[f64],
    scratch: &mut RegressionScratch,
) -> RegressionLine {
    let k = x.len();
    scratch.slopes.clear();
    for i in 0..k {
        for j in (i + 1)..k {
            scratch.slopes.push((y[j] - y[i]) / (x[j] - x[i]));
        }
    }
    let slope = median_in_place(&mut scratch.slopes);
    scratch.intercepts.clear();
    scratch
        .intercepts
        .extend(x.iter().zip(y).map(|(&xi, &yi)| yi - slope * xi));
    RegressionLine {
        slope,
        intercept: median_in_place(&mut scratch.intercepts),
    }
}

pub(crate) fn median_line_kernel(y: &[f64], scratch: &mut RegressionScratch) -> RegressionLine {
    scratch.intercepts.clear();
    scratch.intercepts.extend_from_slice(y);
    RegressionLine {
        slope: 0.0,
        intercept: median_in_place(&mut scratch.intercepts),
    }
}

/// Reusable buffers for the estimators.
#[derive(Debug, Default, Clone)]
pub struct RegressionScratch {
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    outer_slopes: Vec<f64>,
    outer_intercepts: Vec<f64>,
}

/// Repeated-median line: the median over points of the median pairwise
/// slope (and intercept) through that point.
pub fn fit_repeated_median(col: &IndexedColumn) -> Result<RegressionLine> {
    require_pairs(col.len())?;
    Ok(repeated_median_kernel(
        col.x(),
        col.y(),
        &mut RegressionScratch::default(),
    ))
}

/// Theil-Sen line: median of all pairwise slopes, then the median intercept.
pub fn fit_theil_sen(col: &IndexedColumn) -> Result<RegressionLine> {
    require_pairs(col.len())?;
    Ok(theil_sen_kernel(
        col.x(),
        col.y(),
        &mut RegressionScratch::default(),
    ))
}

/// Horizontal line through the median of `y`.
pub fn fit_median_line(col: &IndexedColumn) -> Result<RegressionLine> {
    Ok(median_line_kernel(col.y(), &mut RegressionScratch::default()))
}

/// Residuals of a column against a fitted line, and their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub residuals: Vec<f64>,
    pub tau: f64,
    /// `residual / tau`. When `tau == 0`, zero residuals map to 0 and
    /// nonzero residuals to a signed infinity.
    pub normalized: Vec<f64>,
    pub gamma: f64,
}

/// Scale `gamma * median|r| * (1 + 5 / (K - 1))`.
pub(crate) fn residual_scale(abs_residuals: &mut [f64], gamma: f64) -> f64 {
    let k = abs_residuals.len() as f64;
    gamma * median_in_place(abs_residuals) * (1.0 + 5.0 / (k - 1.0))
}

/// Normalizes a residual, mapping the degenerate `tau == 0` case onto the
/// sentinel convention.
#[inline]
pub(crate) fn normalize_residual(r: f64, tau: f64) -> f64 {
    if tau > 0.0 {
        r / tau
    } else if r == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(r)
    }
}

pub fn compute_residuals(
    col: &IndexedColumn,
    line: &RegressionLine,
    gamma: f64,
) -> Result<ResidualStats> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    require_pairs(col.len())?;
    let residuals: Vec<f64> = col
        .x()
        .iter()
        .zip(col.y())
        .map(|(&x, &y)| y - line.intercept - line.slope * x)
        .collect();
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let tau = residual_scale(&mut abs, gamma);
    let normalized = residuals
        .iter()
        .map(|&r| normalize_residual(r, tau))
        .collect();
    Ok(ResidualStats {
        residuals,
        tau,
        normalized,
        gamma,
    })
}

/// Leverage of each design point, `x_k^2 / sum_j x_j^2`.
///
/// The design matrix is the bare rank vector without an intercept column.
pub fn hat_diagonal(x: &[f64]) -> Vec<f64> {
    let total: f64 = x.iter().map(|v| v * v).sum();
    x.iter().map(|v| v * v / total).collect()
}

/// Hyperparameters of the clipped confidence function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub lambda: f64,
    pub delta: f64,
    /// Half-width of the trusted interval, `lambda * sqrt(2 / K)`.
    pub z: f64,
}

impl ConfidenceParams {
    pub fn new(lambda: f64, delta: f64, k: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {delta}")));
        }
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 models, got {k}")));
        }
        Ok(Self {
            lambda,
            delta,
            z: lambda * (2.0 / k as f64).sqrt(),
        })
    }
}

/// `w = sqrt(1-h)/e * Psi(e / sqrt(1-h))` with `Psi` clipping to `[-Z, Z]`.
///
/// Equivalent to `min(1, Z / |e / sqrt(1-h)|)`; a zero residual has full
/// confidence and the infinite sentinel has none.
pub fn parameter_confidence(e: f64, h: f64, cp: &ConfidenceParams) -> f64 {
    if e == 0.0 {
        return 1.0;
    }
    if e.is_infinite() {
        return 0.0;
    }
    let s = (1.0 - h).sqrt();
    let t = e / s;
    let psi = t.clamp(-cp.z, cp.z);
    (s / e) * psi
}

/// Zero-mean Gaussian weighting of a normalized residual.
pub fn gaussian_confidence(e: f64, sigma_g: f64) -> f64 {
    if e.is_infinite() {
        return 0.0;
    }
    (-(e * e) / (2.0 * sigma_g * sigma_g)).exp()
}

/// Values whose confidence is at most `delta` lose their confidence and are
/// moved onto the fitted line. Everything else passes through unchanged.
pub fn correct_extreme(
    col: &IndexedColumn,
    w: &[f64],
    line: &RegressionLine,
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if w.len() != col.len() {
        return Err(Error::DimensionMismatch {
            expected: col.len(),
            found: w.len(),
        });
    }
    let mut y = col.y().to_vec();
    let mut w = w.to_vec();
    for ((yk, wk), &xk) in y.iter_mut().zip(w.iter_mut()).zip(col.x()) {
        if *wk <= delta {
            *wk = 0.0;
            *yk = line.at(xk);
        }
    }
    Ok((y, w))
}
