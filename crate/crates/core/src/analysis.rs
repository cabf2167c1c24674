//! Expert-redundancy diagnostics: pairwise parameter variation, the kernel
//! two-sample MMD statistic with its acceptance threshold, and a combined
//! report.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layer::{efficiency_ratio, BankParamCounts, MoeBank, MpoeExpertBank, Slot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Statistics of `other - reference` over all expert weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationStats {
    pub expert_pair: (usize, usize),
    /// Signed mean of the elementwise differences.
    pub mean: f64,
    /// Population standard deviation of the differences.
    pub std_dev: f64,
    /// Fraction of `|diff|` in `[0, 1e-4)`.
    pub frac_lt_1e4: f64,
    /// Fraction of `|diff|` in `[1e-4, 1.5e-2)`.
    pub frac_mid: f64,
    pub count: usize,
}

pub fn variation_stats(pair: (usize, usize), reference: &[f64], other: &[f64]) -> Result<VariationStats> {
    if reference.len() != other.len() {
        return shape_err(format!("{} vs {} parameters", reference.len(), other.len()));
    }
    let n = reference.len();
    if n == 0 {
        return shape_err("no parameters to compare");
    }
    let diffs: Vec<f64> = other.iter().zip(reference).map(|(o, r)| o - r).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let small = diffs.iter().filter(|d| d.abs() < 1e-4).count();
    let mid = diffs.iter().filter(|d| (1e-4..1.5e-2).contains(&d.abs())).count();
    Ok(VariationStats {
        expert_pair: pair,
        mean,
        std_dev: var.sqrt(),
        frac_lt_1e4: small as f64 / n as f64,
        frac_mid: mid as f64 / n as f64,
        count: n,
    })
}

fn flat_weights<T: Scalar, B: MoeBank<T> + ?Sized>(bank: &B, expert: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in Slot::ALL {
        out.extend(bank.expert_weight(s, expert)?.data().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

/// Variation of every other expert's reconstructed weights (both slots)
/// against `reference`.
pub fn expert_variation<T: Scalar, B: MoeBank<T> + ?Sized>(bank: &B, reference: usize) -> Result<Vec<VariationStats>> {
    let n = bank.n_experts();
    if n < 2 {
        return Err(Error::Config("variation needs at least two experts".into()));
    }
    if reference >= n {
        return Err(Error::IndexOutOfRange { index: reference, len: n });
    }
    let base = flat_weights(bank, reference)?;
    (0..n)
        .filter(|&i| i != reference)
        .map(|i| variation_stats((reference, i), &base, &flat_weights(bank, i)?))
        .collect()
}

/// Acceptance threshold `2·sqrt(K/m)·(1 + sqrt(ln(1/α)))` of a level-`α`
/// test on `m` samples per side with kernel bounded by `K`.
pub fn mmd_threshold(m: usize, k: f64, alpha: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Config(format!("kernel bound {k} must be positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level {alpha} outside (0, 1)")));
    }
    Ok(2.0 * (k / m as f64).sqrt() * (1.0 + (1.0 / alpha).ln().sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(-|a-b|² / (2σ²))`; `σ` defaults to the median pairwise distance
    /// of the pooled sample.
    Rbf { bandwidth: Option<f64> },
    /// `a · b`
    Linear,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Rbf { bandwidth: None }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 {
        return shape_err(format!("samples must be a matrix, got {:?}", t.shape()));
    }
    Ok((0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.to_f64_lossy()).collect())
        .collect())
}

/// Median of the pairwise distances between distinct points, or 1 when
/// every point coincides.
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Mean kernel value over all pairs `(a, b)`, including `a == b` when both
/// sets are the same.
fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], k: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += k(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased MMD estimate and the kernel parameters used.
fn mmd_with_kernel(x: &[Vec<f64>], y: &[Vec<f64>], kernel: Kernel) -> Result<(f64, f64, Kernel)> {
    if x.len() < 2 || y.len() < 2 {
        return shape_err("each sample needs at least two points");
    }
    if x[0].len() != y[0].len() {
        return shape_err(format!("feature dims {} vs {}", x[0].len(), y[0].len()));
    }
    match kernel {
        Kernel::Rbf { bandwidth } => {
            let sigma = match bandwidth {
                Some(b) if b > 0.0 => b,
                Some(b) => return Err(Error::Config(format!("bandwidth {b} must be positive"))),
                None => {
                    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
                    median_bandwidth(&pooled)
                }
            };
            let g = 1.0 / (2.0 * sigma * sigma);
            let k = move |a: &[f64], b: &[f64]| (-g * sq_dist(a, b)).exp();
            let v = mean_kernel(x, x, &k) + mean_kernel(y, y, &k) - 2.0 * mean_kernel(x, y, &k);
            Ok((v.max(0.0).sqrt(), 1.0, Kernel::Rbf { bandwidth: Some(sigma) }))
        }
        Kernel::Linear => {
            let d = x[0].len();
            let mean = |s: &[Vec<f64>]| -> Vec<f64> {
                (0..d).map(|c| s.iter().map(|r| r[c]).sum::<f64>() / s.len() as f64).collect()
            };
            let diff: Vec<f64> = mean(x).iter().zip(mean(y)).map(|(a, b)| a - b).collect();
            let bound = x.iter().chain(y).map(|r| dot(r, r)).fold(0.0, f64::max);
            Ok((dot(&diff, &diff).sqrt(), bound, Kernel::Linear))
        }
    }
}

/// Biased estimate `sqrt(mean k(x,x') + mean k(y,y') − 2 mean k(x,y))`,
/// clamped at zero. Rows are samples.
pub fn empirical_mmd<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, kernel: Kernel) -> Result<f64> {
    Ok(mmd_with_kernel(&rows_f64(x)?, &rows_f64(y)?, kernel)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub threshold: f64,
    pub empirical: f64,
    pub same_distribution: bool,
    pub m: usize,
    pub alpha: f64,
    /// Kernel with the bandwidth actually used.
    pub kernel: Kernel,
    /// Bound `K` on kernel values used for the threshold.
    pub kernel_bound: f64,
}

/// Two-sample test at level `alpha`, with `m` the smaller sample size.
pub fn mmd_test<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, kernel: Kernel, alpha: f64) -> Result<MmdReport> {
    let (xs, ys) = (rows_f64(x)?, rows_f64(y)?);
    let (empirical, kernel_bound, kernel) = mmd_with_kernel(&xs, &ys, kernel)?;
    let m = xs.len().min(ys.len());
    let threshold = mmd_threshold(m, kernel_bound.max(f64::MIN_POSITIVE), alpha)?;
    Ok(MmdReport {
        threshold,
        empirical,
        same_distribution: empirical < threshold,
        m,
        alpha,
        kernel,
        kernel_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMmd {
    pub experts: (usize, usize),
    pub report: MmdReport,
}

/// Frequently quoted threshold for `m = 2500, K = 1, α = 0.05`; the
/// closed form gives about 0.1092 for the same inputs.
pub const REFERENCE_THRESHOLD: f64 = 0.178;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedundancyReport {
    pub n_experts: usize,
    pub reference_expert: usize,
    pub variation: Vec<VariationStats>,
    pub mmd: Vec<PairMmd>,
    pub param_counts: BankParamCounts,
    pub gamma: f64,
    pub efficiency_ratio: f64,
    /// Threshold for `m = 2500, K = 1, α = 0.05` by the closed form.
    pub threshold_at_2500: f64,
    pub reference_threshold: f64,
    pub threshold_note: String,
    /// Whether both central tensors still equal a given initial snapshot.
    pub central_unchanged: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub reference_expert: usize,
    pub kernel: Kernel,
    pub alpha: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            reference_expert: 0,
            kernel: Kernel::default(),
            alpha: 0.05,
        }
    }
}

/// Variation and MMD for every expert pair plus parameter bookkeeping.
/// MMD compares expert outputs `E_i(probes)` row by row.
pub fn redundancy_report<T: Scalar, B: MoeBank<T> + ?Sized>(
    bank: &B,
    probes: &Tensor<T>,
    opts: ReportOptions,
) -> Result<RedundancyReport> {
    let n = bank.n_experts();
    let variation = if n >= 2 {
        expert_variation(bank, opts.reference_expert)?
    } else {
        Vec::new()
    };
    let outputs: Vec<Tensor<T>> = (0..n).map(|i| bank.expert_output(i, probes)).collect::<Result<_>>()?;
    let mut mmd = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            mmd.push(PairMmd {
                experts: (i, j),
                report: mmd_test(&outputs[i], &outputs[j], opts.kernel, opts.alpha)?,
            });
        }
    }
    let param_counts = bank.param_counts();
    let threshold_at_2500 = mmd_threshold(2500, 1.0, 0.05)?;
    Ok(RedundancyReport {
        n_experts: n,
        reference_expert: opts.reference_expert,
        variation,
        mmd,
        param_counts,
        gamma: param_counts.gamma,
        efficiency_ratio: efficiency_ratio(n, param_counts.gamma),
        threshold_at_2500,
        reference_threshold: REFERENCE_THRESHOLD,
        threshold_note: format!(
            "thresholds use 2*sqrt(K/m)*(1+sqrt(ln(1/alpha))); for m=2500, K=1, alpha=0.05 this is \
             {threshold_at_2500:.4}, not the frequently quoted {REFERENCE_THRESHOLD}"
        ),
        central_unchanged: None,
    })
}

/// Bitwise comparison of the bank's central tensors with a snapshot.
pub fn central_unchanged<T: Scalar>(bank: &MpoeExpertBank<T>, initial: &[Tensor<T>; 2]) -> bool {
    Slot::ALL
        .iter()
        .all(|&s| bank.slot(s).central() == &initial[s.index()])
}
