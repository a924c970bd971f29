//! Nonparametric comparison statistics over per-repetition samples.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Pooled size at or below which the U test enumerates the exact
/// permutation distribution.
pub const EXACT_THRESHOLD: usize = 16;
/// Below this per-sample size the U test is considered underpowered.
pub const MIN_RECOMMENDED_SAMPLE: usize = 20;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const LARGE_EFFECT_A12: f64 = 0.71;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("a variable is constant")]
    DegenerateSample,
}

fn check(sample: &[f64]) -> Result<(), StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share rank ((i+1) + (j+1)) / 2
        let rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of each group of tied values.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        groups.push(j - i + 1);
        i = j + 1;
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UTestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample: pairs where it is larger, ties counted half.
    pub u: f64,
    /// Two-sided p value.
    pub p_value: f64,
    pub method: UTestMethod,
    /// Every pooled value is identical; `p_value` is 1.
    pub degenerate: bool,
    /// A sample is smaller than [`MIN_RECOMMENDED_SAMPLE`].
    pub small_sample: bool,
}

/// Two-sided Mann-Whitney U test.
///
/// Pooled samples of up to [`EXACT_THRESHOLD`] values use the exact
/// permutation distribution of the (tie-averaged) rank sum. Larger samples
/// use the normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    check(a)?;
    check(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    let small_sample = na < MIN_RECOMMENDED_SAMPLE || nb < MIN_RECOMMENDED_SAMPLE;
    if small_sample {
        log::warn!("Mann-Whitney U with small samples ({na}, {nb}); power is limited");
    }
    let degenerate = pooled.iter().all(|&v| v == pooled[0]);
    if degenerate {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            method: if n <= EXACT_THRESHOLD {
                UTestMethod::Exact
            } else {
                UTestMethod::NormalApproximation
            },
            degenerate,
            small_sample,
        });
    }

    if n <= EXACT_THRESHOLD {
        let p_value = exact_p_value(&ranks, na);
        return Ok(MannWhitney {
            u,
            p_value,
            method: UTestMethod::Exact,
            degenerate,
            small_sample,
        });
    }

    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let mean = naf * nbf / 2.0;
    let tie_term: f64 = tie_groups(&pooled)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let variance = naf * nbf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let deviation = ((u - mean).abs() - 0.5).max(0.0);
    let z = deviation / variance.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(MannWhitney {
        u,
        p_value,
        method: UTestMethod::NormalApproximation,
        degenerate,
        small_sample,
    })
}

/// Exact two-sided p value by counting, over all ways to draw `na` of the
/// pooled ranks, rank sums at least as far from the mean as the observed one.
fn exact_p_value(ranks: &[f64], na: usize) -> f64 {
    let n = ranks.len();
    // Average ranks are multiples of 1/2; doubling makes every sum integral.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0u64; max_sum + 1]; na + 1];
    ways[0][0] = 1;
    for &r in &doubled {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    let observed: usize = doubled[..na].iter().sum();
    // Doubled expected rank sum: na * (n + 1).
    let centre = (na * (n + 1)) as i64;
    let observed_dev = (observed as i64 - centre).abs();
    let total: u64 = ways[na].iter().sum();
    let extreme: u64 = ways[na]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - centre).abs() >= observed_dev)
        .map(|(_, w)| w)
        .sum();
    (extreme as f64 / total as f64).min(1.0)
}

/// Vargha-Delaney effect size: probability that a value from `a` exceeds
/// one from `b`, ties counted half.
pub fn a12(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check(a)?;
    check(b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let na = a.len();
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    Ok(u / (na * b.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation as a percentage of the mean. `None` when the
    /// mean is zero or there is a single value.
    pub rsd_percent: Option<f64>,
}

pub fn summary(values: &[f64]) -> Result<SummaryStats, StatsError> {
    check(values)?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let rsd_percent = if mean == 0.0 || n < 2 {
        None
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(100.0 * var.sqrt() / mean.abs())
    };
    Ok(SummaryStats {
        n,
        mean,
        median,
        rsd_percent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r_s: f64,
    pub n: usize,
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints {
            needed: 3,
            got: x.len(),
        });
    }
    check(x)?;
    check(y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateSample);
    }
    let r_s = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationResult { r_s, n: x.len() })
}

/// Challenger-versus-baseline comparison of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub baseline: String,
    pub challenger: String,
    pub u_statistic: f64,
    pub p_value: f64,
    /// Probability that the challenger beats the baseline.
    pub a12: f64,
    pub significant: bool,
    pub large_effect: bool,
}

impl ComparisonResult {
    pub fn from_scores(
        baseline: impl Into<String>,
        challenger: impl Into<String>,
        u_statistic: f64,
        p_value: f64,
        a12: f64,
    ) -> ComparisonResult {
        ComparisonResult {
            baseline: baseline.into(),
            challenger: challenger.into(),
            u_statistic,
            p_value,
            a12,
            significant: is_significant(p_value),
            large_effect: is_large_effect(a12),
        }
    }
}

pub fn is_significant(p_value: f64) -> bool {
    p_value < SIGNIFICANCE_LEVEL
}

pub fn is_large_effect(a12: f64) -> bool {
    a12 >= LARGE_EFFECT_A12
}

pub fn compare(
    baseline_id: &str,
    baseline: &[f64],
    challenger_id: &str,
    challenger: &[f64],
) -> Result<ComparisonResult, StatsError> {
    let test = mann_whitney_u(challenger, baseline)?;
    let effect = a12(challenger, baseline)?;
    Ok(ComparisonResult::from_scores(
        baseline_id,
        challenger_id,
        test.u,
        test.p_value,
        effect,
    ))
}
