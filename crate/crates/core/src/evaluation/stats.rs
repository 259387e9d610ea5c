use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub df: usize,
}

/// Mid-ranks (1-based) of `values`.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Tie-corrected H statistic with a chi-square (groups − 1) upper-tail p.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::Argument("Kruskal-Wallis needs at least two groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Argument("Kruskal-Wallis groups must be non-empty".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("Kruskal-Wallis samples must be finite".into()));
    }
    let df = groups.len() - 1;
    let n = all.len() as f64;
    let ranks = midranks(&all);

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - tie_sum / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, df });
    }

    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(KruskalWallis { h, p: chi.sf(h), df })
}
