//! Paired non-parametric tests: Wilcoxon signed-rank and the sign test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EscError, Result};

/// Largest sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `x` tends to exceed `y`.
    Greater,
    /// `x` tends to fall below `y`.
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `x - y`.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub method: PMethod,
    /// Fewer than five non-zero pairs; p-values are coarse.
    pub small_sample: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

struct SignedRanks {
    /// Ranks doubled so tie averages stay integral.
    doubled: Vec<u64>,
    positive: Vec<bool>,
}

fn signed_ranks(x: &[f64], y: &[f64]) -> Result<SignedRanks> {
    if x.len() != y.len() {
        return Err(EscError::Config(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(EscError::Degenerate("degenerate pairs: all differences are zero".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(EscError::Degenerate("non-finite paired difference".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let doubled = average_ranks(&abs).iter().map(|r| (r * 2.0).round() as u64).collect();
    Ok(SignedRanks {
        doubled,
        positive: d.iter().map(|v| *v > 0.0).collect(),
    })
}

/// Null distribution of the doubled positive-rank sum: `counts[s]` sign
/// assignments give sum `s`.
fn exact_counts(doubled: &[u64]) -> Vec<u128> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

fn tail_p(counts: &[u128], observed: usize, alt: Alternative) -> f64 {
    let total: u128 = counts.iter().sum();
    let upper: u128 = counts[observed..].iter().sum();
    let lower: u128 = counts[..=observed].iter().sum();
    let p = match alt {
        Alternative::Greater => upper as f64 / total as f64,
        Alternative::Less => lower as f64 / total as f64,
        Alternative::TwoSided => 2.0 * upper.min(lower) as f64 / total as f64,
    };
    p.min(1.0)
}

fn normal_p(sr: &SignedRanks, alt: Alternative) -> f64 {
    let n = sr.doubled.len() as f64;
    let w: f64 = sr
        .doubled
        .iter()
        .zip(&sr.positive)
        .filter(|(_, p)| **p)
        .map(|(r, _)| *r as f64 / 2.0)
        .sum();
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: sum over tie groups of (t^3 - t) / 48
    let mut sorted = sr.doubled.clone();
    sorted.sort_unstable();
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let upper = |stat: f64| 1.0 - std.cdf((stat - 0.5 - mean) / sd);
    let lower = |stat: f64| std.cdf((stat + 0.5 - mean) / sd);
    let p = match alt {
        Alternative::Greater => upper(w),
        Alternative::Less => lower(w),
        Alternative::TwoSided => 2.0 * upper(w).min(lower(w)),
    };
    p.clamp(0.0, 1.0)
}

/// Wilcoxon signed-rank test on paired samples. Zero differences are
/// dropped; tied magnitudes receive average ranks. The p-value is exact for
/// up to [`EXACT_MAX_N`] pairs and uses the tie-corrected normal
/// approximation (with continuity correction) beyond that.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alt: Alternative) -> Result<WilcoxonResult> {
    let sr = signed_ranks(x, y)?;
    let n = sr.doubled.len();
    if n <= EXACT_MAX_N {
        wilcoxon_with(x, y, alt, PMethod::Exact)
    } else {
        Ok(WilcoxonResult {
            statistic: statistic(&sr),
            p_value: normal_p(&sr, alt),
            n,
            method: PMethod::NormalApprox,
            small_sample: false,
        })
    }
}

fn statistic(sr: &SignedRanks) -> f64 {
    sr.doubled
        .iter()
        .zip(&sr.positive)
        .filter(|(_, p)| **p)
        .map(|(r, _)| *r as f64 / 2.0)
        .sum()
}

/// Same test with the p-value method forced.
pub fn wilcoxon_with(x: &[f64], y: &[f64], alt: Alternative, method: PMethod) -> Result<WilcoxonResult> {
    let sr = signed_ranks(x, y)?;
    let n = sr.doubled.len();
    let p_value = match method {
        PMethod::Exact => {
            if n > 60 {
                return Err(EscError::Config(format!("exact distribution for n = {n} is too large")));
            }
            let observed: u64 = sr
                .doubled
                .iter()
                .zip(&sr.positive)
                .filter(|(_, p)| **p)
                .map(|(r, _)| r)
                .sum();
            tail_p(&exact_counts(&sr.doubled), observed as usize, alt)
        }
        PMethod::NormalApprox => normal_p(&sr, alt),
    };
    Ok(WilcoxonResult {
        statistic: statistic(&sr),
        p_value,
        n,
        method,
        small_sample: n < 5,
    })
}

/// Exact binomial sign test on paired samples (zero differences dropped).
pub fn sign_test(x: &[f64], y: &[f64], alt: Alternative) -> Result<(usize, usize, f64)> {
    if x.len() != y.len() {
        return Err(EscError::Config("paired samples differ in length".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(EscError::Degenerate("degenerate pairs: all differences are zero".into()));
    }
    let pos = d.iter().filter(|v| **v > 0.0).count();
    let pmf = |k: usize| binom(n, k) * 0.5f64.powi(n as i32);
    let upper: f64 = (pos..=n).map(pmf).sum();
    let lower: f64 = (0..=pos).map(pmf).sum();
    let p = match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    };
    Ok((pos, n, p))
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
