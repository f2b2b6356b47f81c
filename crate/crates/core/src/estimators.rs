//! Unbiased pass@k, pass@k curves, the Ω reasoning-effectiveness summary and
//! question-level bootstrap intervals for Ω.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimatorError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("undefined result: {0}")]
    Undefined(String),
}

/// Largest integer below which every integer is exactly representable in f64.
const EXACT_F64_INT: u128 = 1 << 53;

fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        // r * (n - i) is divisible by (i + 1) at every step.
        r = r.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(r)
}

/// Unbiased pass@k from `n` samples with `c` correct: `1 - C(n-c, k) / C(n, k)`.
///
/// Returns exactly `0.0` when `c == 0` and exactly `1.0` when `n - c < k`.
/// When `C(n, k)` is below 2^53 the ratio is formed from exact integers and
/// divided once, so the result is the correctly rounded value; otherwise the
/// product `prod_{i<k} (n-c-i)/(n-i)` is used, which never forms a large
/// binomial.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EstimatorError> {
    if k == 0 || k > n {
        return Err(EstimatorError::Domain(format!("need 1 <= k <= n, got n={n}, k={k}")));
    }
    if c > n {
        return Err(EstimatorError::Domain(format!("need c <= n, got n={n}, c={c}")));
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial_u128(n, k), binomial_u128(n - c, k)) {
        if total < EXACT_F64_INT {
            return Ok((total - miss) as f64 / total as f64);
        }
    }
    let all_miss = (0..k).fold(1.0f64, |acc, i| acc * ((n - c - i) as f64 / (n - i) as f64));
    Ok(1.0 - all_miss)
}

/// pass@k for k = 1..=n_max, averaged over questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassCurve {
    pub n_max: usize,
    /// `values[k - 1]` is pass@k.
    pub values: Vec<f64>,
}

impl PassCurve {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            n_max: values.len(),
            values,
        }
    }

    pub fn at(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    /// `k,value` lines with a header, for plotting.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("k,pass_at_k\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

/// Per-question pass@k rows for k = 1..=n_max.
pub fn pass_matrix(counts: &[(u64, u64)], n_max: usize) -> Result<Vec<Vec<f64>>, EstimatorError> {
    if n_max == 0 {
        return Err(EstimatorError::Domain("n_max must be >= 1".into()));
    }
    counts
        .iter()
        .map(|&(n, c)| {
            if n < n_max as u64 {
                return Err(EstimatorError::Domain(format!(
                    "question has n={n} samples, fewer than n_max={n_max}"
                )));
            }
            (1..=n_max as u64).map(|k| pass_at_k(n, c, k)).collect()
        })
        .collect()
}

pub fn pass_curve(counts: &[(u64, u64)], n_max: usize) -> Result<PassCurve, EstimatorError> {
    if counts.is_empty() {
        return Err(EstimatorError::Domain("no questions".into()));
    }
    let rows = pass_matrix(counts, n_max)?;
    Ok(mean_rows(&rows, None))
}

fn mean_rows(rows: &[Vec<f64>], pick: Option<&[usize]>) -> PassCurve {
    let n_max = rows[0].len();
    let mut sums = vec![0.0f64; n_max];
    let mut count = 0usize;
    let mut add = |row: &Vec<f64>| {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
        count += 1;
    };
    match pick {
        Some(ix) => ix.iter().for_each(|&i| add(&rows[i])),
        None => rows.iter().for_each(&mut add),
    }
    PassCurve::new(sums.into_iter().map(|s| s / count as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaResult {
    pub omega: f64,
    pub n_max: usize,
    /// k values where pass@k(OFF) was zero; they are left out of both the
    /// weighted sum and the weight normalization.
    pub skipped_k: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

/// Ω = Σ_k k·(on_k − off_k)/off_k / Σ_k k, over k with off_k > 0.
pub fn omega(curve_on: &PassCurve, curve_off: &PassCurve) -> Result<OmegaResult, EstimatorError> {
    if curve_on.values.len() != curve_off.values.len() {
        return Err(EstimatorError::Domain(format!(
            "curves differ in length: {} vs {}",
            curve_on.values.len(),
            curve_off.values.len()
        )));
    }
    let mut weighted = 0.0;
    let mut weights = 0.0;
    let mut skipped_k = Vec::new();
    for (i, (&on, &off)) in curve_on.values.iter().zip(&curve_off.values).enumerate() {
        let k = i + 1;
        if off > 0.0 {
            weighted += k as f64 * (on - off) / off;
            weights += k as f64;
        } else {
            skipped_k.push(k);
        }
    }
    if weights == 0.0 {
        return Err(EstimatorError::Undefined("pass@k(OFF) is zero for every k".into()));
    }
    Ok(OmegaResult {
        omega: weighted / weights,
        n_max: curve_on.values.len(),
        skipped_k,
        ci_low: None,
        ci_high: None,
    })
}

/// Percentile with linear interpolation between order statistics
/// (`h = (len - 1) * q`). `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for Ω over questions.
///
/// Each resample draws `m` question indices with replacement using
/// `SplitMix64::new(seed)` (`below(m)`, consumed in order across resamples);
/// the same indices are used for the ON and OFF lists. Resamples where Ω is
/// undefined are dropped. The bounds are the `(1 - level) / 2` and
/// `(1 + level) / 2` percentiles of the remaining Ω values.
pub fn bootstrap_ci(
    counts_on: &[(u64, u64)],
    counts_off: &[(u64, u64)],
    n_max: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), EstimatorError> {
    if resamples < 1 {
        return Err(EstimatorError::Domain("resamples must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimatorError::Domain(format!("level must be in (0, 1), got {level}")));
    }
    if counts_on.len() != counts_off.len() {
        return Err(EstimatorError::Domain("ON and OFF lists must be paired".into()));
    }
    if counts_on.is_empty() {
        return Err(EstimatorError::Domain("no questions".into()));
    }
    let rows_on = pass_matrix(counts_on, n_max)?;
    let rows_off = pass_matrix(counts_off, n_max)?;
    let m = rows_on.len();
    let mut rng = SplitMix64::new(seed);
    let mut draws = vec![0usize; m];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for d in draws.iter_mut() {
            *d = rng.below(m);
        }
        let on = mean_rows(&rows_on, Some(&draws));
        let off = mean_rows(&rows_off, Some(&draws));
        if let Ok(r) = omega(&on, &off) {
            stats.push(r.omega);
        }
    }
    if stats.is_empty() {
        return Err(EstimatorError::Undefined("Ω undefined in every resample".into()));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}
