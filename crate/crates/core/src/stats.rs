//! Spearman rank correlation with significance, the Fisher transformation,
//! and per-batch/global correlation summaries.
//!
//! Batches of 5 questions are small enough that the usual t approximation is
//! unreliable, so p-values come from an exact permutation test for n <= 8
//! and from the t approximation above that.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Per-batch p-values switch from the exact permutation test to the t
/// approximation above this sample size (8! = 40320 permutations is cheap,
/// 9! is not worth it).
const EXACT_PERMUTATION_MAX_N: usize = 8;

/// Clamp applied to |rho| before `atanh` so perfect correlations keep the
/// Fisher mean finite.
const FISHER_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("input lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 2 paired samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("correlation undefined: an input has zero rank variance")]
    ZeroVariance,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("no batch had enough valid pairs to correlate")]
    NoValidBatches,
}

/// Row of the correlation report: one (batch size, lambda) configuration.
///
/// `mean_fisher_rho` is the per-batch Spearman rho averaged on the Fisher
/// z-scale and mapped back through `tanh`; `batch_ratio` is the fraction of
/// evaluated batches with p < 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub n_questions: usize,
    pub lambda: f64,
    pub mean_fisher_rho: f64,
    pub batch_ratio: f64,
    pub global_rho: Option<f64>,
    pub global_p_value: Option<f64>,
    pub batches_evaluated: usize,
    pub batches_skipped: usize,
}

/// Average ranks (1-based), assigning tied values the mean of the ranks they
/// occupy.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &slot in &order[i..=j] {
            ranks[slot] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_on_ranks(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cross = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cross += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((cross / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value from the t approximation with n - 2 degrees of freedom.
fn t_approximation_p(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Exact two-sided permutation p-value: the fraction of all n! pairings
/// whose |rho| reaches the observed |rho|. Includes the identity pairing,
/// so the result is at least 1/n!.
fn exact_permutation_p(x_ranks: &[f64], y_ranks: &[f64], observed: f64) -> f64 {
    let n = x_ranks.len();
    let mean_x = x_ranks.iter().sum::<f64>() / n as f64;
    let mean_y = y_ranks.iter().sum::<f64>() / n as f64;
    let dx: Vec<f64> = x_ranks.iter().map(|v| v - mean_x).collect();
    let dy: Vec<f64> = y_ranks.iter().map(|v| v - mean_y).collect();
    let norm = (dx.iter().map(|v| v * v).sum::<f64>() * dy.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
    let threshold = observed.abs() - 1e-12;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    let mut matched = 0u64;
    let mut total = 1u64;

    let rho_of = |perm: &[usize]| -> f64 {
        let cross: f64 = dx.iter().zip(perm).map(|(a, &j)| a * dy[j]).sum();
        cross / norm
    };

    // Heap's algorithm, iterative form.
    if rho_of(&indices).abs() >= threshold {
        matched = 1;
    }
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                indices.swap(0, i);
            } else {
                indices.swap(stack[i], i);
            }
            total += 1;
            if rho_of(&indices).abs() >= threshold {
                matched += 1;
            }
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    matched as f64 / total as f64
}

/// Spearman rank correlation with average-rank tie handling and a two-sided
/// p-value (exact permutation test for n <= 8, t approximation otherwise).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewSamples { n: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let x_ranks = average_ranks(x);
    let y_ranks = average_ranks(y);
    let rho = pearson_on_ranks(&x_ranks, &y_ranks)?;
    let p = if x.len() <= EXACT_PERMUTATION_MAX_N {
        exact_permutation_p(&x_ranks, &y_ranks, rho)
    } else {
        t_approximation_p(rho, x.len())
    };
    Ok((rho, p))
}

/// Fisher z-transformation, `atanh(rho)`, with |rho| clamped to keep the
/// result finite at perfect correlation.
pub fn fisher_z(rho: f64) -> f64 {
    rho.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh()
}

/// Correlates each batch independently and aggregates: the mean of the
/// per-batch Fisher z values is reported back on the rho scale, and
/// `batch_ratio` counts batches significant at p < 0.05. Batches with fewer
/// than two pairs or zero rank variance are skipped and counted.
pub fn batch_correlation_summary(
    batches: &[Vec<(f64, f64)>],
    n_questions: usize,
    lambda: f64,
) -> Result<CorrelationSummary, StatsError> {
    let mut z_values = Vec::with_capacity(batches.len());
    let mut significant = 0usize;
    let mut skipped = 0usize;
    for (index, pairs) in batches.iter().enumerate() {
        if pairs.len() < 2 {
            log::warn!("batch {index} skipped: only {} pair(s)", pairs.len());
            skipped += 1;
            continue;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        match spearman(&x, &y) {
            Ok((rho, p)) => {
                z_values.push(fisher_z(rho));
                if p < 0.05 {
                    significant += 1;
                }
            }
            Err(StatsError::ZeroVariance) => {
                log::warn!("batch {index} skipped: zero rank variance");
                skipped += 1;
            }
            Err(other) => return Err(other),
        }
    }
    if z_values.is_empty() {
        return Err(StatsError::NoValidBatches);
    }
    let mean_z = z_values.iter().sum::<f64>() / z_values.len() as f64;
    Ok(CorrelationSummary {
        n_questions,
        lambda,
        mean_fisher_rho: mean_z.tanh(),
        batch_ratio: significant as f64 / z_values.len() as f64,
        global_rho: None,
        global_p_value: None,
        batches_evaluated: z_values.len(),
        batches_skipped: skipped,
    })
}

/// Single Spearman correlation over all pairs pooled across batches.
pub fn global_correlation(batches: &[Vec<(f64, f64)>]) -> Result<(f64, f64), StatsError> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for pairs in batches {
        for &(a, b) in pairs {
            x.push(a);
            y.push(b);
        }
    }
    spearman(&x, &y)
}
