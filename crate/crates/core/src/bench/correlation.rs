//! Pearson and Spearman coefficients and the Meng-Rosenthal-Rubin test for
//! two correlations sharing a variable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::two_sided_p;

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Correlation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Correlation(format!("need at least 3 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Correlation("non-finite value".into()));
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Correlation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
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

/// Spearman rank-order correlation: Pearson on tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrrResult {
    pub z: f64,
    pub p: f64,
}

/// Meng-Rosenthal-Rubin z test of `r_jk` against `r_jh`, both correlations
/// with a shared variable j, where `r_kh` correlates k with h over `n`
/// samples. Positive z means the first correlation is larger.
pub fn mrr_test(r_jk: f64, r_jh: f64, r_kh: f64, n: usize) -> Result<MrrResult> {
    if n <= 3 {
        return Err(Error::Correlation(format!("need more than 3 samples, got {n}")));
    }
    for (name, r) in [("r_jk", r_jk), ("r_jh", r_jh), ("r_kh", r_kh)] {
        if !(r > -1.0 && r < 1.0) {
            return Err(Error::Correlation(format!("{name} = {r} must lie strictly inside (-1, 1)")));
        }
    }
    let r2_mean = (r_jk * r_jk + r_jh * r_jh) / 2.0;
    let f = ((1.0 - r_kh) / (2.0 * (1.0 - r2_mean))).min(1.0);
    let h = (1.0 - f * r2_mean) / (1.0 - r2_mean);
    let z = (r_jk.atanh() - r_jh.atanh()) * ((n as f64 - 3.0) / (2.0 * (1.0 - r_kh) * h)).sqrt();
    Ok(MrrResult { z, p: two_sided_p(z) })
}
