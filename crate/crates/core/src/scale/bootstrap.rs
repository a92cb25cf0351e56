//! Nonparametric bootstrap confidence bands for the rate-distortion curves.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_from, FitConfig, SourceModel};
use super::likelihood::SourceData;
use super::model::CodecParams;
use crate::design::Method;
use crate::error::{Error, Result};
use crate::prob::percentile_sorted;
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Triplets drawn with replacement from the pooled set.
    #[default]
    Pooled,
    /// Triplets drawn with replacement separately within each method.
    ByMethod,
    /// Every replicate reuses the original data; only useful for checks.
    Identity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub grid_points: usize,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub resampling: Resampling,
    /// Largest tolerated share of replicates whose fit fails.
    pub max_failure_rate: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            grid_points: 100,
            lower_percentile: 2.5,
            upper_percentile: 97.5,
            resampling: Resampling::Pooled,
            max_failure_rate: 0.05,
            seed: 0,
        }
    }
}

/// Pointwise band of one codec's curve on a bitrate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurveBand {
    pub source_id: String,
    pub codec_id: String,
    pub bitrate: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl RdCurveBand {
    /// Vertical band width where the estimated curve crosses `level` JND,
    /// interpolated linearly between grid points.
    pub fn width_at(&self, level: f64) -> Option<f64> {
        let n = self.bitrate.len();
        for i in 0..n.saturating_sub(1) {
            let (a, b) = (self.estimate[i] - level, self.estimate[i + 1] - level);
            if a == 0.0 {
                return Some(self.upper[i] - self.lower[i]);
            }
            if a * b < 0.0 {
                let t = a / (a - b);
                let w0 = self.upper[i] - self.lower[i];
                let w1 = self.upper[i + 1] - self.lower[i + 1];
                return Some(w0 + t * (w1 - w0));
            }
        }
        if n > 0 && self.estimate[n - 1] == level {
            return Some(self.upper[n - 1] - self.lower[n - 1]);
        }
        None
    }

    /// Point estimate at `bpp`, interpolated linearly; `None` outside the grid.
    pub fn estimate_at(&self, bpp: f64) -> Option<f64> {
        let n = self.bitrate.len();
        if n == 0 || bpp < self.bitrate[0] || bpp > self.bitrate[n - 1] {
            return None;
        }
        let i = self.bitrate.partition_point(|x| *x < bpp);
        if self.bitrate[i] == bpp || i == 0 {
            return Some(self.estimate[i]);
        }
        let (x0, x1) = (self.bitrate[i - 1], self.bitrate[i]);
        let t = (bpp - x0) / (x1 - x0);
        Some(self.estimate[i - 1] + t * (self.estimate[i] - self.estimate[i - 1]))
    }

    /// Whether the point estimate lies inside the band at every grid point.
    pub fn contains_estimate(&self) -> bool {
        self.estimate
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(e, (l, u))| l <= e && e <= u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub source_id: String,
    pub replicates: usize,
    pub failed: usize,
    pub bands: Vec<RdCurveBand>,
    /// Fitted parameters of every successful replicate, in replicate order.
    #[serde(skip)]
    pub samples: Vec<Vec<CodecParams>>,
}

/// Resampling weights of one replicate: how often each observation is drawn.
pub fn replicate_weights(data: &SourceData, resampling: Resampling, seed: u64, index: usize) -> Vec<f64> {
    let n = data.observations.len();
    if resampling == Resampling::Identity {
        return vec![1.0; n];
    }
    let mut rng = rng_from(seed, &format!("bootstrap:{}:{index}", data.source_id));
    let mut w = vec![0.0; n];
    let strata: Vec<Vec<usize>> = match resampling {
        Resampling::ByMethod => Method::ALL
            .iter()
            .map(|m| (0..n).filter(|&i| data.observations[i].method == *m).collect())
            .collect(),
        _ => vec![(0..n).collect()],
    };
    for members in strata.iter().filter(|s| !s.is_empty()) {
        for _ in 0..members.len() {
            w[members[rng.gen_range(0..members.len())]] += 1.0;
        }
    }
    w
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Bootstraps the fit of `data`, warm-starting every replicate from `point`.
pub fn bootstrap_source(
    data: &SourceData,
    point: &SourceModel,
    fit: &FitConfig,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if cfg.replicates == 0 {
        return Err(Error::Fit("bootstrap needs at least one replicate".into()));
    }
    let start = point.params();
    let fits: Vec<Option<Vec<CodecParams>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let w = replicate_weights(data, cfg.resampling, cfg.seed, b);
            let resampled = data.reweighted(&w);
            match fit_from(&resampled, fit, &start) {
                Ok(m) if m.params().iter().all(CodecParams::is_valid) => Some(m.params()),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("source {} replicate {b}: {e}", data.source_id);
                    None
                }
            }
        })
        .collect();
    let failed = fits.iter().filter(|f| f.is_none()).count();
    if failed as f64 > cfg.max_failure_rate * cfg.replicates as f64 {
        return Err(Error::Fit(format!(
            "source {}: {failed} of {} bootstrap replicates failed",
            data.source_id, cfg.replicates
        )));
    }
    if failed > 0 {
        log::warn!("source {}: {failed} of {} bootstrap replicates failed", data.source_id, cfg.replicates);
    }
    let samples: Vec<Vec<CodecParams>> = fits.into_iter().flatten().collect();

    let bands = point
        .codecs
        .iter()
        .enumerate()
        .map(|(c, codec)| {
            let (lo, hi) = codec.bitrate_span();
            let bitrate = grid(lo, hi, cfg.grid_points);
            let mut estimate = Vec::with_capacity(bitrate.len());
            let mut lower = Vec::with_capacity(bitrate.len());
            let mut upper = Vec::with_capacity(bitrate.len());
            for &r in &bitrate {
                let est = codec.params.rd_distortion(r);
                let mut values: Vec<f64> = samples.iter().map(|s| s[c].rd_distortion(r)).collect();
                values.sort_by(f64::total_cmp);
                let (l, u) = if values.is_empty() {
                    (est, est)
                } else {
                    (
                        percentile_sorted(&values, cfg.lower_percentile / 100.0),
                        percentile_sorted(&values, cfg.upper_percentile / 100.0),
                    )
                };
                estimate.push(est);
                lower.push(l.min(est));
                upper.push(u.max(est));
            }
            RdCurveBand {
                source_id: point.source_id.clone(),
                codec_id: codec.codec_id.clone(),
                bitrate,
                estimate,
                lower,
                upper,
            }
        })
        .collect();

    Ok(BootstrapResult {
        source_id: point.source_id.clone(),
        replicates: cfg.replicates,
        failed,
        bands,
        samples,
    })
}

const BAND_COLUMNS: [&str; 7] = ["source_id", "codec_id", "point", "bitrate", "estimate", "lower", "upper"];

/// Tab-separated band file, one row per grid point. Values are written in
/// shortest round-trip form, so parsing restores them bit for bit.
pub fn bands_to_tsv(bands: &[RdCurveBand]) -> String {
    let mut out = BAND_COLUMNS.join("\t");
    out.push('\n');
    for b in bands {
        for i in 0..b.bitrate.len() {
            out += &format!(
                "{}\t{}\t{i}\t{}\t{}\t{}\t{}\n",
                b.source_id, b.codec_id, b.bitrate[i], b.estimate[i], b.lower[i], b.upper[i]
            );
        }
    }
    out
}

pub fn parse_bands_tsv(text: &str) -> Result<Vec<RdCurveBand>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    if header != BAND_COLUMNS {
        return Err(Error::parse("band file", format!("expected header {:?}", BAND_COLUMNS.join(" "))));
    }
    let mut bands: Vec<RdCurveBand> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: String| Error::parse("band file", format!("row {}: {m}", n + 1));
        if f.len() != BAND_COLUMNS.len() {
            return Err(bad(format!("expected {} columns, got {}", BAND_COLUMNS.len(), f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let (x, est, lo, hi) = (num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?);
        let same = bands.last().is_some_and(|b| b.source_id == f[0] && b.codec_id == f[1]);
        if !same {
            bands.push(RdCurveBand {
                source_id: f[0].to_string(),
                codec_id: f[1].to_string(),
                bitrate: Vec::new(),
                estimate: Vec::new(),
                lower: Vec::new(),
                upper: Vec::new(),
            });
        }
        let b = bands.last_mut().expect("pushed above");
        if f[2] != b.bitrate.len().to_string() {
            return Err(bad(format!("grid point {} out of order", f[2])));
        }
        b.bitrate.push(x);
        b.estimate.push(est);
        b.lower.push(lo);
        b.upper.push(hi);
    }
    Ok(bands)
}
