//! Intervention-effect estimation: segmented regression with HAC errors,
//! difference-in-differences, Mood's median test, block bootstrap intervals,
//! multiplicity adjustment, minimum detectable effects, and verdicts against
//! GQM targets.

use std::collections::BTreeMap;

use chrono::{DateTime, TimeDelta, Utc};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Hypergeometric, Normal, StudentsT};
use thiserror::Error;

use crate::dora::compute_dora;
use crate::gqm::{Direction, Measure, MetricRole, Registry, StatisticalTest};
use crate::stats::{mean, median, quantile_sorted, variance};
use crate::telemetry::{EventLog, TelemetryError};
use crate::valuestream::{compute_flow, ValueAddedRule};

pub const DEFAULT_MIN_SEGMENT_POINTS: usize = 8;
pub const DEFAULT_REPLICATIONS: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluateError {
    #[error("need at least {required} points before and after the intervention, got {pre} and {post}")]
    InsufficientPoints { pre: usize, post: usize, required: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("treated and comparison series are not aligned: {0}")]
    MisalignedSeries(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("metric {0} is not in the registry")]
    UnknownMetric(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    #[default]
    Treatment,
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric_id: String,
    /// `(t, y)` pairs with strictly increasing `t`.
    pub points: Vec<(f64, f64)>,
    /// Index of the first post-intervention point.
    pub intervention_index: usize,
    #[serde(default)]
    pub group: Group,
}

/// How observations falling into one time bucket are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    Median,
}

impl Aggregate {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregate::Mean => mean(values),
            Aggregate::Median => median(values),
        }
    }
}

impl MetricSeries {
    pub fn new(metric_id: &str, points: Vec<(f64, f64)>, intervention_index: usize) -> Result<Self, EvaluateError> {
        let s = Self {
            metric_id: metric_id.to_string(),
            points,
            intervention_index,
            group: Group::Treatment,
        };
        s.validate()?;
        Ok(s)
    }

    /// Points at `t = 0, 1, 2, ...`.
    pub fn from_values(metric_id: &str, values: &[f64], intervention_index: usize) -> Result<Self, EvaluateError> {
        Self::new(
            metric_id,
            values.iter().enumerate().map(|(t, &y)| (t as f64, y)).collect(),
            intervention_index,
        )
    }

    /// Buckets timestamped observations into fixed-width periods aligned so
    /// that `intervention` starts a period. Empty periods are skipped; `t` is
    /// the period index counted from the first observed period.
    pub fn from_observations(
        metric_id: &str,
        observations: &[Observation],
        intervention: DateTime<Utc>,
        period: TimeDelta,
        aggregate: Aggregate,
    ) -> Result<Self, EvaluateError> {
        let buckets = bucketize(observations, intervention, period)?;
        let Some(&first) = buckets.keys().next() else {
            return Err(EvaluateError::InvalidSeries("no observations".into()));
        };
        let points: Vec<(f64, f64)> = buckets
            .iter()
            .map(|(&k, v)| ((k - first) as f64, aggregate.apply(v)))
            .collect();
        let t0 = buckets.keys().take_while(|&&k| k < 0).count();
        Self::new(metric_id, points, t0)
    }

    pub fn validate(&self) -> Result<(), EvaluateError> {
        if self.points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(EvaluateError::InvalidSeries("time indices must be strictly increasing".into()));
        }
        if self.points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(EvaluateError::InvalidSeries("non-finite point".into()));
        }
        if self.intervention_index == 0 || self.intervention_index >= self.points.len() {
            return Err(EvaluateError::InvalidSeries(format!(
                "intervention index {} must lie strictly inside 0..{}",
                self.intervention_index,
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn pre(&self) -> &[(f64, f64)] {
        &self.points[..self.intervention_index]
    }

    pub fn post(&self) -> &[(f64, f64)] {
        &self.points[self.intervention_index..]
    }

    fn values(points: &[(f64, f64)]) -> Vec<f64> {
        points.iter().map(|p| p.1).collect()
    }
}

/// Groups observations by period index relative to `intervention`
/// (negative indices precede it).
fn bucketize(
    observations: &[Observation],
    intervention: DateTime<Utc>,
    period: TimeDelta,
) -> Result<BTreeMap<i64, Vec<f64>>, EvaluateError> {
    let width = period.num_milliseconds();
    if width <= 0 {
        return Err(EvaluateError::InvalidParameters("bucket period must be positive".into()));
    }
    let mut buckets: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for o in observations {
        let offset = (o.at - intervention).num_milliseconds();
        buckets.entry(offset.div_euclid(width)).or_default().push(o.value);
    }
    Ok(buckets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(with = "crate::telemetry::rfc3339")]
    pub at: DateTime<Utc>,
    pub value: f64,
}

/// Autocorrelation-consistent covariance used for ITS inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Sandwich under AR(1) errors, with the residual autocorrelation
    /// corrected for its small-sample bias by matching moments.
    #[default]
    Ar1Sandwich,
    /// Newey-West with Bartlett weights and the `floor(4 (n/100)^(2/9))` lag.
    NeweyWest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItsOptions {
    pub min_pre: usize,
    pub min_post: usize,
    #[serde(default)]
    pub covariance: Covariance,
}

impl Default for ItsOptions {
    fn default() -> Self {
        Self {
            min_pre: DEFAULT_MIN_SEGMENT_POINTS,
            min_post: DEFAULT_MIN_SEGMENT_POINTS,
            covariance: Covariance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItsResult {
    /// Pre-intervention level, pre slope, level change, slope change.
    pub beta: [f64; 4],
    /// Standard errors under the selected covariance.
    pub standard_errors: [f64; 4],
    pub p_values: [f64; 4],
    pub ci95: [(f64, f64); 4],
    pub covariance: Covariance,
    /// Newey-West standard errors, always reported for comparison.
    pub newey_west_standard_errors: [f64; 4],
    pub residual_autocorrelation_lag1: f64,
    /// Bias-corrected AR(1) coefficient used by the AR(1) sandwich.
    pub ar1_rho: Option<f64>,
    pub hac_lag: usize,
    pub degrees_of_freedom: usize,
    pub n: usize,
}

impl ItsResult {
    pub fn level_change(&self) -> f64 {
        self.beta[2]
    }
}

/// Newey-West truncation lag `floor(4 (n/100)^(2/9))`.
pub fn newey_west_lag(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Segmented regression `y = b0 + b1 t + b2 D + b3 (t - t0) D` with
/// `D = 1[t >= t0]`, fitted by least squares. Standard errors follow
/// `options.covariance`; intervals and p-values use Student t with `n - 4`
/// degrees of freedom.
pub fn its_fit(series: &MetricSeries, options: &ItsOptions) -> Result<ItsResult, EvaluateError> {
    series.validate()?;
    let (pre, post) = (series.pre().len(), series.post().len());
    if pre < options.min_pre || post < options.min_post {
        return Err(EvaluateError::InsufficientPoints {
            pre,
            post,
            required: options.min_pre.max(options.min_post),
        });
    }
    let n = series.points.len();
    let k = 4;
    if n <= k {
        return Err(EvaluateError::InsufficientPoints {
            pre,
            post,
            required: k + 1,
        });
    }
    let t0 = series.points[series.intervention_index].0;
    let x = DMatrix::from_fn(n, k, |i, j| {
        let t = series.points[i].0;
        let d = if i >= series.intervention_index { 1.0 } else { 0.0 };
        match j {
            0 => 1.0,
            1 => t,
            2 => d,
            _ => (t - t0) * d,
        }
    });
    let y = DVector::from_iterator(n, series.points.iter().map(|p| p.1));

    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * scale.max(1.0)) {
        return Err(EvaluateError::RankDeficient);
    }
    let qty = qr.q().transpose() * &y;
    let beta = r.solve_upper_triangular(&qty).ok_or(EvaluateError::RankDeficient)?;
    let resid = &y - &x * &beta;

    let xtx_inv = (x.transpose() * &x).try_inverse().ok_or(EvaluateError::RankDeficient)?;
    let lag = newey_west_lag(n);
    let nw_cov = newey_west_covariance(&x, &resid, &xtx_inv, lag);
    let (cov, ar1_rho) = match options.covariance {
        Covariance::NeweyWest => (nw_cov.clone(), None),
        Covariance::Ar1Sandwich => {
            let (cov, rho) = ar1_sandwich(&x, &resid, &xtx_inv);
            (cov, Some(rho))
        }
    };

    let df = (n - k) as f64;
    let tcrit = StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let mut out = ItsResult {
        beta: [0.0; 4],
        standard_errors: [0.0; 4],
        p_values: [1.0; 4],
        ci95: [(0.0, 0.0); 4],
        covariance: options.covariance,
        newey_west_standard_errors: [0.0; 4],
        residual_autocorrelation_lag1: lag1_autocorrelation(resid.as_slice()),
        ar1_rho,
        hac_lag: lag,
        degrees_of_freedom: n - k,
        n,
    };
    let fit_scale = y.amax().max(1.0);
    // Residuals at rounding level mean the data lie exactly on the model.
    let exact = resid.amax() <= 1e-10 * fit_scale;
    for j in 0..k {
        let b = beta[j];
        let se = if exact { 0.0 } else { cov[(j, j)].max(0.0).sqrt() };
        out.beta[j] = b;
        out.standard_errors[j] = se;
        out.newey_west_standard_errors[j] = if exact { 0.0 } else { nw_cov[(j, j)].max(0.0).sqrt() };
        out.ci95[j] = (b - tcrit * se, b + tcrit * se);
        out.p_values[j] = if se > 0.0 {
            two_sided_t(b / se, df)
        } else if b.abs() > 1e-9 * fit_scale {
            0.0
        } else {
            1.0
        };
    }
    Ok(out)
}

/// Bartlett-kernel Newey-West covariance with a `n / (n - k)` factor.
fn newey_west_covariance(x: &DMatrix<f64>, resid: &DVector<f64>, xtx_inv: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * resid[i].powi(2);
    }
    for l in 1..=lag.min(n - 1) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        for i in l..n {
            let xi = x.row(i).transpose();
            let xj = x.row(i - l).transpose();
            let cross = &xi * xj.transpose() * (resid[i] * resid[i - l]);
            meat += (&cross + cross.transpose()) * w;
        }
    }
    xtx_inv * meat * xtx_inv * (n as f64 / (n - k) as f64)
}

/// OLS covariance `(X'X)^-1 X' R X (X'X)^-1 s^2` for AR(1) errors with
/// correlation matrix `R = rho^|i-j|`. `rho` solves
/// `tr(L M R M) / tr(M R) = rho_hat`, which removes the downward bias of the
/// residual autocorrelation `rho_hat` caused by fitting the regressors
/// (`M` is the residual maker, `L` the lag-1 shift). `s^2 = e'e / tr(M R)`.
fn ar1_sandwich(x: &DMatrix<f64>, resid: &DVector<f64>, xtx_inv: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = x.nrows();
    let m = DMatrix::<f64>::identity(n, n) - x * xtx_inv * x.transpose();
    let corr = |rho: f64| DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32));
    let shift = DMatrix::from_fn(n, n, |i, j| if i == j + 1 { 1.0 } else { 0.0 });
    let implied = |rho: f64| {
        let mr = &m * corr(rho);
        (&shift * &mr * &m).trace() / mr.trace()
    };
    let ss = resid.norm_squared();
    let rho_hat = if ss > 0.0 {
        (1..n).map(|i| resid[i] * resid[i - 1]).sum::<f64>() / ss
    } else {
        0.0
    };
    let (mut lo, mut hi) = (-0.99, 0.99);
    let rho = if rho_hat <= implied(lo) {
        lo
    } else if rho_hat >= implied(hi) {
        hi
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if implied(mid) < rho_hat {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let r = corr(rho);
    let s2 = ss / (&m * &r).trace();
    (xtx_inv * x.transpose() * r * x * xtx_inv * s2, rho)
}

/// Lag-1 sample autocorrelation; zero for a constant or too-short sequence.
pub fn lag1_autocorrelation(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let denom: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = values.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replications: usize,
    /// Moving-block length; `None` means 1 for samples and
    /// `round(n^(1/3))` for series.
    #[serde(default)]
    pub block_length: Option<usize>,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replications: DEFAULT_REPLICATIONS,
            block_length: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `round(n^(1/3))`, at least 1.
pub fn default_block_length(n: usize) -> usize {
    ((n as f64).cbrt().round() as usize).max(1)
}

fn rng_for(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

/// One moving-block resample of `data` into `out`.
fn block_resample(data: &[f64], block: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
    out.clear();
    let n = data.len();
    let block = block.clamp(1, n);
    while out.len() < n {
        let start = rng.random_range(0..=n - block);
        let take = block.min(n - out.len());
        out.extend_from_slice(&data[start..start + take]);
    }
}

fn percentile_interval(estimate: f64, mut stats: Vec<f64>) -> ConfidenceInterval {
    stats.sort_by(f64::total_cmp);
    ConfidenceInterval {
        estimate,
        lower: quantile_sorted(&stats, 0.025),
        upper: quantile_sorted(&stats, 0.975),
    }
}

fn check_bootstrap(options: &BootstrapOptions) -> Result<(), EvaluateError> {
    if options.replications == 0 {
        return Err(EvaluateError::InvalidParameters("replications must be positive".into()));
    }
    if options.block_length == Some(0) {
        return Err(EvaluateError::InvalidParameters("block length must be positive".into()));
    }
    Ok(())
}

/// Percentile bootstrap interval for `statistic`. Replication `i` draws
/// from stream `i` of a generator seeded with `options.seed`, so the result
/// does not depend on thread scheduling.
pub fn bootstrap_ci<F>(data: &[f64], statistic: F, options: &BootstrapOptions) -> Result<ConfidenceInterval, EvaluateError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_bootstrap(options)?;
    if data.is_empty() {
        return Err(EvaluateError::InvalidParameters("empty sample".into()));
    }
    let block = options.block_length.unwrap_or(1);
    let stats: Vec<f64> = (0..options.replications)
        .into_par_iter()
        .map_init(Vec::new, |buf, rep| {
            let mut rng = rng_for(options.seed, rep);
            block_resample(data, block, &mut rng, buf);
            statistic(buf)
        })
        .collect();
    Ok(percentile_interval(statistic(data), stats))
}

/// Bootstrap interval for a statistic of two independently resampled
/// samples (e.g. a difference of medians).
pub fn bootstrap_two_sample_ci<F>(
    a: &[f64],
    b: &[f64],
    statistic: F,
    options: &BootstrapOptions,
) -> Result<ConfidenceInterval, EvaluateError>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    check_bootstrap(options)?;
    if a.is_empty() || b.is_empty() {
        return Err(EvaluateError::InvalidParameters("empty sample".into()));
    }
    let block = options.block_length.unwrap_or(1);
    let stats: Vec<f64> = (0..options.replications)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(ra, rb), rep| {
                let mut rng = rng_for(options.seed, rep);
                block_resample(a, block, &mut rng, ra);
                block_resample(b, block, &mut rng, rb);
                statistic(ra, rb)
            },
        )
        .collect();
    Ok(percentile_interval(statistic(a, b), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidResult {
    pub effect: f64,
    pub ci95: ConfidenceInterval,
    pub treated_pre_mean: f64,
    pub treated_post_mean: f64,
    pub comparison_pre_mean: f64,
    pub comparison_post_mean: f64,
    pub block_length: usize,
}

/// `(post_T - pre_T) - (post_C - pre_C)` on segment means. The interval
/// block-bootstraps the treated-minus-comparison differences within each
/// segment.
pub fn did_estimate(
    treated: &MetricSeries,
    comparison: &MetricSeries,
    options: &BootstrapOptions,
) -> Result<DidResult, EvaluateError> {
    treated.validate()?;
    comparison.validate()?;
    if treated.points.len() != comparison.points.len() {
        return Err(EvaluateError::MisalignedSeries(format!(
            "lengths differ: {} vs {}",
            treated.points.len(),
            comparison.points.len()
        )));
    }
    if treated.intervention_index != comparison.intervention_index {
        return Err(EvaluateError::MisalignedSeries("intervention indices differ".into()));
    }
    if treated.points.iter().zip(&comparison.points).any(|(a, b)| a.0 != b.0) {
        return Err(EvaluateError::MisalignedSeries("time indices differ".into()));
    }
    check_bootstrap(options)?;
    let seg = |s: &MetricSeries| (mean(&MetricSeries::values(s.pre())), mean(&MetricSeries::values(s.post())));
    let (tp, tq) = seg(treated);
    let (cp, cq) = seg(comparison);
    let effect = (tq - tp) - (cq - cp);

    let diff = |pts: (&[(f64, f64)], &[(f64, f64)])| -> Vec<f64> { pts.0.iter().zip(pts.1).map(|(a, b)| a.1 - b.1).collect() };
    let d_pre = diff((treated.pre(), comparison.pre()));
    let d_post = diff((treated.post(), comparison.post()));
    let block = options
        .block_length
        .unwrap_or_else(|| default_block_length(treated.points.len()));
    let boot = BootstrapOptions {
        block_length: Some(block),
        ..options.clone()
    };
    let mut ci = bootstrap_two_sample_ci(&d_pre, &d_post, |a, b| mean(b) - mean(a), &boot)?;
    ci.estimate = effect;
    Ok(DidResult {
        effect,
        ci95: ci,
        treated_pre_mean: tp,
        treated_post_mean: tq,
        comparison_pre_mean: cp,
        comparison_post_mean: cq,
        block_length: block,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianTestMethod {
    ChiSquare,
    Exact,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianTestResult {
    pub p_value: f64,
    pub method: MedianTestMethod,
    pub pooled_median: f64,
    /// `[[pre above, pre not above], [post above, post not above]]`.
    pub table: [[u64; 2]; 2],
    /// Continuity-corrected chi-square, when that method was used.
    pub statistic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Two-sided Fisher exact p-value for a 2x2 table with fixed margins.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = table;
    let n1 = a + b;
    let col = a + c;
    let total = a + b + c + d;
    let hyper = Hypergeometric::new(total, col, n1).expect("valid hypergeometric margins");
    let observed = hyper.pmf(a);
    let lo = col.saturating_sub(c + d);
    let hi = col.min(n1);
    let p: f64 = (lo..=hi)
        .map(|k| hyper.pmf(k))
        .filter(|&pk| pk <= observed * (1.0 + 1e-7))
        .sum();
    p.min(1.0)
}

/// Mood's median test: counts above the pooled median, continuity-corrected
/// chi-square, or Fisher's exact test when an expected count is below 5.
pub fn median_test(pre: &[f64], post: &[f64]) -> Result<MedianTestResult, EvaluateError> {
    if pre.is_empty() || post.is_empty() {
        return Err(EvaluateError::InvalidParameters("both samples must be non-empty".into()));
    }
    let pooled: Vec<f64> = pre.iter().chain(post).copied().collect();
    let m = median(&pooled);
    let above = |s: &[f64]| s.iter().filter(|&&v| v > m).count() as u64;
    let (a, c) = (above(pre), above(post));
    let table = [[a, pre.len() as u64 - a], [c, post.len() as u64 - c]];
    let col_above = a + c;
    let total = pooled.len() as u64;
    if col_above == 0 || col_above == total {
        return Ok(MedianTestResult {
            p_value: 1.0,
            method: MedianTestMethod::Degenerate,
            pooled_median: m,
            table,
            statistic: None,
            note: Some("no observation lies above the pooled median; samples are indistinguishable".into()),
        });
    }
    let rows = [pre.len() as f64, post.len() as f64];
    let cols = [col_above as f64, (total - col_above) as f64];
    let expected = |i: usize, j: usize| rows[i] * cols[j] / total as f64;
    let small = (0..2).any(|i| (0..2).any(|j| expected(i, j) < 5.0));
    if small {
        return Ok(MedianTestResult {
            p_value: fisher_exact(table),
            method: MedianTestMethod::Exact,
            pooled_median: m,
            table,
            statistic: None,
            note: None,
        });
    }
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = expected(i, j);
            let dev = ((table[i][j] as f64 - e).abs() - 0.5).max(0.0);
            stat += dev * dev / e;
        }
    }
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok(MedianTestResult {
        p_value: (1.0 - chi.cdf(stat)).clamp(0.0, 1.0),
        method: MedianTestMethod::ChiSquare,
        pooled_median: m,
        table,
        statistic: Some(stat),
        note: None,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    #[default]
    Holm,
    BenjaminiHochberg,
}

/// Holm step-down or Benjamini-Hochberg step-up adjusted p-values, in the
/// input order.
pub fn adjust_multiplicity(p_values: &[f64], method: Multiplicity) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    match method {
        Multiplicity::Holm => {
            let mut running: f64 = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                running = running.max(((m - rank) as f64 * p_values[i]).min(1.0));
                adjusted[i] = running;
            }
        }
        Multiplicity::BenjaminiHochberg => {
            let mut running: f64 = 1.0;
            for (rank, &i) in order.iter().enumerate().rev() {
                running = running.min((m as f64 / (rank + 1) as f64 * p_values[i]).min(1.0));
                adjusted[i] = running;
            }
        }
    }
    adjusted
}

/// Two-sample minimum detectable mean difference under the normal
/// approximation: `(z_{1-alpha/2} + z_power) * sigma * sqrt(2 / n)`.
pub fn mde(sigma: f64, n_per_group: usize, alpha: f64, power: f64) -> Result<f64, EvaluateError> {
    if !(sigma > 0.0) || n_per_group < 2 || !(alpha > 0.0 && alpha < 1.0) || !(power > 0.0 && power < 1.0) {
        return Err(EvaluateError::InvalidParameters(format!(
            "need sigma > 0, n >= 2, alpha and power in (0, 1); got sigma={sigma}, n={n_per_group}, alpha={alpha}, power={power}"
        )));
    }
    let z = Normal::standard();
    let za = z.inverse_cdf(1.0 - alpha / 2.0);
    let zp = z.inverse_cdf(power);
    Ok((za + zp) * sigma * (2.0 / n_per_group as f64).sqrt())
}

/// Bias-corrected standardized mean difference `(mean(b) - mean(a)) / s_p`.
pub fn hedges_g(a: &[f64], b: &[f64]) -> Option<f64> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 2 || n2 < 2 {
        return None;
    }
    let pooled = (((n1 - 1) as f64 * variance(a) + (n2 - 1) as f64 * variance(b)) / (n1 + n2 - 2) as f64).sqrt();
    if pooled == 0.0 {
        return None;
    }
    let j = 1.0 - 3.0 / (4.0 * (n1 + n2) as f64 - 9.0);
    Some(j * (mean(b) - mean(a)) / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Its,
    Did,
    MedianTest,
    /// Plain pre/post comparison of reported values.
    PrePost,
}

impl From<StatisticalTest> for Estimator {
    fn from(t: StatisticalTest) -> Self {
        match t {
            StatisticalTest::Its => Estimator::Its,
            StatisticalTest::Did => Estimator::Did,
            StatisticalTest::MedianTest => Estimator::MedianTest,
        }
    }
}

/// One effect estimate to be judged against its metric's target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub metric_id: String,
    /// Sub-population the estimate covers, such as a platform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub estimator: Estimator,
    pub baseline: f64,
    pub post: f64,
    /// Model effect; defaults to `post - baseline`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci95: Option<(f64, f64)>,
    pub p_raw: f64,
    /// Raw pre/post samples, used for Hedges' g.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<(Vec<f64>, Vec<f64>)>,
}

impl MetricEstimate {
    pub fn pre_post(metric_id: &str, scope: Option<&str>, baseline: f64, post: f64, p_raw: f64) -> Self {
        Self {
            metric_id: metric_id.into(),
            scope: scope.map(String::from),
            estimator: Estimator::PrePost,
            baseline,
            post,
            effect: None,
            ci95: None,
            p_raw,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationVerdict {
    pub metric_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub estimator: Estimator,
    pub role: MetricRole,
    pub baseline: f64,
    pub post: f64,
    pub effect_absolute: f64,
    /// `effect_absolute / baseline`; `None` for a zero baseline.
    pub effect_relative: Option<f64>,
    pub hedges_g: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub p_raw: f64,
    pub p_adjusted: f64,
    /// Signed relative change the target asks for.
    pub target_relative_change: Option<f64>,
    pub target_met: bool,
    pub success: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOptions {
    pub alpha: f64,
    pub multiplicity: Multiplicity,
}

impl Default for VerdictOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            multiplicity: Multiplicity::Holm,
        }
    }
}

/// Judges each estimate against its metric's target. The target is the
/// relative change from the registered baseline to the registered target,
/// applied to the estimate's own baseline. Success needs the target met and
/// the multiplicity-adjusted p-value below `alpha`; primary and secondary
/// metrics form separate adjustment families.
pub fn evaluate_against_targets(
    registry: &Registry,
    estimates: &[MetricEstimate],
    options: &VerdictOptions,
) -> Result<Vec<EvaluationVerdict>, EvaluateError> {
    let mut roles = Vec::with_capacity(estimates.len());
    for e in estimates {
        let spec = registry
            .metrics
            .get(&e.metric_id)
            .ok_or_else(|| EvaluateError::UnknownMetric(e.metric_id.clone()))?;
        if !(0.0..=1.0).contains(&e.p_raw) {
            return Err(EvaluateError::InvalidParameters(format!(
                "p-value {} for {} outside [0, 1]",
                e.p_raw, e.metric_id
            )));
        }
        roles.push(spec.role);
    }
    let mut p_adjusted = vec![1.0; estimates.len()];
    for role in [MetricRole::Primary, MetricRole::Secondary] {
        let family: Vec<usize> = (0..estimates.len()).filter(|&i| roles[i] == role).collect();
        let raw: Vec<f64> = family.iter().map(|&i| estimates[i].p_raw).collect();
        for (&i, adj) in family.iter().zip(adjust_multiplicity(&raw, options.multiplicity)) {
            p_adjusted[i] = adj;
        }
    }

    let mut verdicts = Vec::with_capacity(estimates.len());
    for (i, e) in estimates.iter().enumerate() {
        let spec = &registry.metrics[&e.metric_id];
        let mut notes = Vec::new();
        let effect_absolute = e.effect.unwrap_or(e.post - e.baseline);
        let effect_relative = (e.baseline != 0.0).then(|| effect_absolute / e.baseline);
        let direction = registry
            .goals
            .values()
            .find(|g| g.target.metric_id == e.metric_id)
            .map(|g| g.target.direction);
        let target_relative_change = match (&spec.baseline, &spec.target) {
            (Some(b), Some(t)) if b.value != 0.0 => Some((t.value - b.value) / b.value),
            _ => None,
        };
        let target_met = match (target_relative_change, effect_relative) {
            (Some(goal), Some(got)) => {
                let direction = direction.unwrap_or(if goal < 0.0 { Direction::Decrease } else { Direction::Increase });
                let tol = 1e-12;
                match direction {
                    Direction::Decrease => got <= goal + tol,
                    Direction::Increase => got >= goal - tol,
                }
            }
            _ => {
                notes.push("no usable target or baseline; target cannot be met".into());
                false
            }
        };
        let significant = p_adjusted[i] < options.alpha;
        if target_met && !significant {
            notes.push(format!("target met but adjusted p {:.4} is not below {}", p_adjusted[i], options.alpha));
        }
        verdicts.push(EvaluationVerdict {
            metric_id: e.metric_id.clone(),
            scope: e.scope.clone(),
            estimator: e.estimator,
            role: spec.role,
            baseline: e.baseline,
            post: e.post,
            effect_absolute,
            effect_relative,
            hedges_g: e.samples.as_ref().and_then(|(a, b)| hedges_g(a, b)),
            ci95: e.ci95,
            p_raw: e.p_raw,
            p_adjusted: p_adjusted[i],
            target_relative_change,
            target_met,
            success: target_met && significant,
            notes,
        });
    }
    Ok(verdicts)
}

/// Results table: metric, scope, baseline, post, absolute and relative
/// change, raw and adjusted p-values, success.
pub fn verdicts_csv(verdicts: &[EvaluationVerdict]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "metric",
        "scope",
        "baseline",
        "post",
        "abs_change",
        "rel_change_pct",
        "p_value",
        "p_adjusted",
        "success",
    ])
    .expect("in-memory csv");
    for v in verdicts {
        w.write_record([
            v.metric_id.clone(),
            v.scope.clone().unwrap_or_default(),
            format!("{:.4}", v.baseline),
            format!("{:.4}", v.post),
            format!("{:.4}", v.effect_absolute),
            v.effect_relative.map(|r| format!("{:.2}", r * 100.0)).unwrap_or_default(),
            format!("{:.6}", v.p_raw),
            format!("{:.6}", v.p_adjusted),
            v.success.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

/// Parameters for estimating registry metrics directly from an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(with = "crate::telemetry::rfc3339")]
    pub intervention: DateTime<Utc>,
    /// Observations before this instant are ignored.
    #[serde(default, with = "optional_rfc3339", skip_serializing_if = "Option::is_none")]
    pub baseline_start: Option<DateTime<Utc>>,
    /// Observations from the intervention up to this instant are a
    /// transition period and are ignored.
    #[serde(default, with = "optional_rfc3339", skip_serializing_if = "Option::is_none")]
    pub stabilization_end: Option<DateTime<Utc>>,
    /// Observations at or after this instant are ignored.
    #[serde(default, with = "optional_rfc3339", skip_serializing_if = "Option::is_none")]
    pub post_end: Option<DateTime<Utc>>,
    pub period_days: f64,
    pub its: ItsOptions,
    pub bootstrap: BootstrapOptions,
    pub verdict: VerdictOptions,
    /// Platform serving as the untreated group for DiD metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison_platform: Option<String>,
    pub linkage_hours: f64,
    #[serde(default)]
    pub value_added: ValueAddedRule,
}

impl EvaluationConfig {
    pub fn new(intervention: DateTime<Utc>, seed: u64) -> Self {
        Self {
            intervention,
            baseline_start: None,
            stabilization_end: None,
            post_end: None,
            period_days: 7.0,
            its: ItsOptions::default(),
            bootstrap: BootstrapOptions {
                seed,
                ..BootstrapOptions::default()
            },
            verdict: VerdictOptions::default(),
            comparison_platform: None,
            linkage_hours: crate::dora::DEFAULT_LINKAGE_HOURS,
            value_added: ValueAddedRule::default(),
        }
    }

    fn period(&self) -> TimeDelta {
        TimeDelta::milliseconds((self.period_days * 86_400_000.0).round() as i64)
    }
}

mod optional_rfc3339 {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => crate::telemetry::rfc3339::serialize(t, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| crate::telemetry::parse_timestamp(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Per-observation values of `measure`: one per completed work item (at
/// its exit) or one per deploy (100 for a failed change, 0 otherwise).
/// Flow efficiency and failure rate are in percent.
pub fn observations(
    log: &EventLog,
    measure: Measure,
    rule: &ValueAddedRule,
    linkage_hours: f64,
) -> Result<Vec<Observation>, EvaluateError> {
    let obs = match measure {
        Measure::LeadTimeDays | Measure::FlowEfficiency | Measure::QueueTimeHours => compute_flow(log, rule)
            .flows
            .iter()
            .filter_map(|f| {
                let value = match measure {
                    Measure::LeadTimeDays => f.lead_time_days(),
                    Measure::QueueTimeHours => f.queue_time,
                    _ => f.flow_efficiency? * 100.0,
                };
                Some(Observation { at: f.exit, value })
            })
            .collect(),
        Measure::ChangeFailureRate => {
            let Some((start, end)) = log.time_span() else {
                return Ok(Vec::new());
            };
            let report = compute_dora(log, start, end + TimeDelta::milliseconds(1), linkage_hours)?;
            log.records()
                .iter()
                .filter_map(|r| {
                    let class = report.classification.get(&r.event_id)?;
                    Some(Observation {
                        at: r.timestamp,
                        value: if class.is_failure() { 100.0 } else { 0.0 },
                    })
                })
                .collect()
        }
    };
    let mut obs: Vec<Observation> = obs;
    obs.sort_by(|a, b| a.at.cmp(&b.at).then(a.value.total_cmp(&b.value)));
    Ok(obs)
}

/// Period aggregation used for a measure's time series.
pub fn default_aggregate(measure: Measure) -> Aggregate {
    match measure {
        Measure::LeadTimeDays | Measure::QueueTimeHours => Aggregate::Median,
        Measure::FlowEfficiency | Measure::ChangeFailureRate => Aggregate::Mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedMetric {
    pub metric_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub verdicts: Vec<EvaluationVerdict>,
    pub its: BTreeMap<String, ItsResult>,
    /// The period series each ITS fit was estimated on.
    pub series: BTreeMap<String, MetricSeries>,
    pub median_tests: BTreeMap<String, MedianTestResult>,
    pub did: BTreeMap<String, DidResult>,
    pub skipped: Vec<SkippedMetric>,
    pub config: EvaluationConfig,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        verdicts_csv(&self.verdicts)
    }
}

fn split_at(obs: &[Observation], t: DateTime<Utc>) -> (Vec<f64>, Vec<f64>) {
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for o in obs {
        if o.at < t {
            pre.push(o.value);
        } else {
            post.push(o.value);
        }
    }
    (pre, post)
}

/// Estimates every active registry metric that names a log measure with its
/// registered statistical test, then judges the estimates against targets.
/// Metrics that cannot be estimated are listed in `skipped`.
pub fn evaluate_log(log: &EventLog, registry: &Registry, config: &EvaluationConfig) -> Result<EvaluationReport, EvaluateError> {
    if let (Some(a), Some(b)) = (config.baseline_start, config.post_end) {
        if !(a < config.intervention && config.intervention < b) {
            return Err(EvaluateError::InvalidParameters(
                "windows must satisfy baseline_start < intervention < post_end".into(),
            ));
        }
    }
    if let Some(s) = config.stabilization_end {
        if s < config.intervention || config.post_end.is_some_and(|e| s >= e) {
            return Err(EvaluateError::InvalidParameters(
                "windows must satisfy intervention <= stabilization_end < post_end".into(),
            ));
        }
    }
    if !(config.period_days > 0.0) {
        return Err(EvaluateError::InvalidParameters("period_days must be positive".into()));
    }
    let mut report = EvaluationReport {
        verdicts: Vec::new(),
        its: BTreeMap::new(),
        series: BTreeMap::new(),
        median_tests: BTreeMap::new(),
        did: BTreeMap::new(),
        skipped: Vec::new(),
        config: config.clone(),
    };
    let in_range = |o: &Observation| {
        config.baseline_start.is_none_or(|s| o.at >= s)
            && config.post_end.is_none_or(|e| o.at < e)
            && !config.stabilization_end.is_some_and(|s| o.at >= config.intervention && o.at < s)
    };
    let mut estimates = Vec::new();
    for spec in registry.active_metrics() {
        let skip = |reason: String| SkippedMetric {
            metric_id: spec.metric_id.clone(),
            reason,
        };
        let (Some(measure), Some(test)) = (spec.measure, spec.statistical_test) else {
            report
                .skipped
                .push(skip("metric has no log measure or statistical test".into()));
            continue;
        };
        let aggregate = default_aggregate(measure);
        let obs: Vec<Observation> = observations(log, measure, &config.value_added, config.linkage_hours)?
            .into_iter()
            .filter(|o| in_range(o))
            .collect();
        let (pre, post) = split_at(&obs, config.intervention);
        if pre.is_empty() || post.is_empty() {
            report.skipped.push(skip("no observations on one side of the intervention".into()));
            continue;
        }
        let (baseline, post_value) = (aggregate.apply(&pre), aggregate.apply(&post));
        let mut estimate = MetricEstimate {
            metric_id: spec.metric_id.clone(),
            scope: None,
            estimator: test.into(),
            baseline,
            post: post_value,
            effect: None,
            ci95: None,
            p_raw: 1.0,
            samples: Some((pre.clone(), post.clone())),
        };
        match test {
            StatisticalTest::Its => {
                let series = match MetricSeries::from_observations(
                    &spec.metric_id,
                    &obs,
                    config.intervention,
                    config.period(),
                    aggregate,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        report.skipped.push(skip(e.to_string()));
                        continue;
                    }
                };
                match its_fit(&series, &config.its) {
                    Ok(fit) => {
                        estimate.effect = Some(fit.level_change());
                        estimate.ci95 = Some(fit.ci95[2]);
                        estimate.p_raw = fit.p_values[2];
                        report.its.insert(spec.metric_id.clone(), fit);
                        report.series.insert(spec.metric_id.clone(), series);
                    }
                    Err(e) => {
                        report.skipped.push(skip(e.to_string()));
                        continue;
                    }
                }
            }
            StatisticalTest::MedianTest => {
                let result = median_test(&pre, &post)?;
                let ci = bootstrap_two_sample_ci(&pre, &post, |a, b| median(b) - median(a), &config.bootstrap)?;
                estimate.effect = Some(median(&post) - median(&pre));
                estimate.ci95 = Some((ci.lower, ci.upper));
                estimate.p_raw = result.p_value;
                report.median_tests.insert(spec.metric_id.clone(), result);
            }
            StatisticalTest::Did => {
                let Some(comparison) = &config.comparison_platform else {
                    report.skipped.push(skip("difference-in-differences needs a comparison platform".into()));
                    continue;
                };
                match did_from_log(log, spec.metric_id.as_str(), measure, comparison, config, &in_range) {
                    Ok(did) => {
                        estimate.effect = Some(did.effect);
                        estimate.ci95 = Some((did.ci95.lower, did.ci95.upper));
                        estimate.p_raw = bootstrap_p_value(&did);
                        report.did.insert(spec.metric_id.clone(), did);
                    }
                    Err(e) => {
                        report.skipped.push(skip(e.to_string()));
                        continue;
                    }
                }
            }
        }
        estimates.push(estimate);
    }
    report.verdicts = evaluate_against_targets(registry, &estimates, &config.verdict)?;
    Ok(report)
}

/// Two-sided p-value by interval inversion: the smallest level whose
/// percentile interval would exclude zero, approximated from the 95%
/// interval under a normal sampling distribution.
fn bootstrap_p_value(did: &DidResult) -> f64 {
    let se = (did.ci95.upper - did.ci95.lower) / (2.0 * 1.959963984540054);
    if se <= 0.0 {
        return if did.effect == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (did.effect / se).abs();
    (2.0 * (1.0 - Normal::standard().cdf(z))).clamp(0.0, 1.0)
}

fn did_from_log(
    log: &EventLog,
    metric_id: &str,
    measure: Measure,
    comparison: &str,
    config: &EvaluationConfig,
    in_range: &dyn Fn(&Observation) -> bool,
) -> Result<DidResult, EvaluateError> {
    let treated_log = log.without(|r| r.platform == comparison);
    let comparison_log = log.for_platform(comparison);
    let collect = |l: &EventLog| -> Result<BTreeMap<i64, Vec<f64>>, EvaluateError> {
        let obs: Vec<Observation> = observations(l, measure, &config.value_added, config.linkage_hours)?
            .into_iter()
            .filter(|o| in_range(o))
            .collect();
        bucketize(&obs, config.intervention, config.period())
    };
    let (t, c) = (collect(&treated_log)?, collect(&comparison_log)?);
    let aggregate = default_aggregate(measure);
    let keys: Vec<i64> = t.keys().filter(|k| c.contains_key(k)).copied().collect();
    let Some(&first) = keys.first() else {
        return Err(EvaluateError::MisalignedSeries("no common periods".into()));
    };
    let build = |m: &BTreeMap<i64, Vec<f64>>, group: Group| -> Result<MetricSeries, EvaluateError> {
        let points = keys.iter().map(|k| ((k - first) as f64, aggregate.apply(&m[k]))).collect();
        let mut s = MetricSeries::new(metric_id, points, keys.iter().take_while(|&&k| k < 0).count())?;
        s.group = group;
        Ok(s)
    };
    did_estimate(&build(&t, Group::Treatment)?, &build(&c, Group::Comparison)?, &config.bootstrap)
}
