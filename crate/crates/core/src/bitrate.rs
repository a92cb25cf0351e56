//! Matching encoder quality settings to target bitrates.
//!
//! The search is a plain bisection over the integer quality range. Every
//! evaluated setting is cached, and the setting with the smallest absolute
//! bitrate error seen so far is kept, so a non-monotone encoder still yields
//! the best candidate it visited.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;

use crate::catalog::{CodecRecipe, QualityDirection, SourceImage};
use crate::error::{Error, Result};

/// Something that produces a compressed size for a quality setting.
pub trait Encoder {
    /// Bits per pixel obtained at `quality`.
    fn encode_bpp(&mut self, quality: i64) -> Result<f64>;
}

impl<F> Encoder for F
where
    F: FnMut(i64) -> Result<f64>,
{
    fn encode_bpp(&mut self, quality: i64) -> Result<f64> {
        self(quality)
    }
}

/// Runs a recipe's command template through `sh -c` and measures the
/// output file.
pub struct CommandEncoder {
    template: String,
    input: PathBuf,
    output: PathBuf,
    pixels: u64,
}

impl CommandEncoder {
    pub fn new(recipe: &CodecRecipe, input: &Path, output: &Path, source: &SourceImage) -> Self {
        Self {
            template: recipe.command.clone(),
            input: input.to_path_buf(),
            output: output.to_path_buf(),
            pixels: source.pixels(),
        }
    }

    pub fn command_line(&self, quality: i64) -> String {
        self.template
            .replace("{q}", &quality.to_string())
            .replace("{input}", &self.input.display().to_string())
            .replace("{output}", &self.output.display().to_string())
    }
}

impl Encoder for CommandEncoder {
    fn encode_bpp(&mut self, quality: i64) -> Result<f64> {
        let line = self.command_line(quality);
        let status = Command::new("sh")
            .arg("-c")
            .arg(&line)
            .status()
            .map_err(|e| Error::Encoder(format!("{line}: {e}")))?;
        if !status.success() {
            return Err(Error::Encoder(format!("{line}: exited with {status}")));
        }
        let bytes = std::fs::metadata(&self.output)
            .map_err(|e| Error::io(&self.output, e))?
            .len();
        Ok(bytes as f64 * 8.0 / self.pixels as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BitrateMatch {
    pub quality: i64,
    pub actual_bpp: f64,
    /// Target after the recipe's bitrate rule.
    pub target_bpp: f64,
    /// (actual - target) / target
    pub relative_deviation: f64,
    /// The target lies outside what the quality range can reach; `quality`
    /// is the boundary setting.
    pub unreachable: bool,
    pub evaluations: usize,
}

/// Upper bound on encoder calls made by [`match_bitrate`].
pub fn max_evaluations(q_min: i64, q_max: i64) -> usize {
    let span = (q_max - q_min).max(1) as u64;
    let ceil_log2 = 64 - (span - 1).leading_zeros() as usize;
    ceil_log2 + 2
}

/// Bisection over `recipe.quality_min..=recipe.quality_max`.
///
/// `tolerance` stops the search early once the relative deviation is within
/// it; `None` runs until the quality interval collapses.
pub fn match_bitrate(
    recipe: &CodecRecipe,
    source_id: &str,
    target_bpp: f64,
    tolerance: Option<f64>,
    encoder: &mut dyn Encoder,
) -> Result<BitrateMatch> {
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(Error::Encoder(format!("tolerance must be positive, got {t}")));
        }
    }
    let target = recipe.adjusted_target(source_id, target_bpp);
    if !(target > 0.0) {
        return Err(Error::Encoder(format!("adjusted target {target} is not positive")));
    }

    let mut cache: BTreeMap<i64, f64> = BTreeMap::new();
    let mut best: Option<(i64, f64)> = None;
    let mut eval = |q: i64, cache: &mut BTreeMap<i64, f64>| -> Result<f64> {
        if let Some(&bpp) = cache.get(&q) {
            return Ok(bpp);
        }
        let bpp = encoder.encode_bpp(q)?;
        if !bpp.is_finite() || bpp < 0.0 {
            return Err(Error::Encoder(format!("quality {q} produced bpp {bpp}")));
        }
        cache.insert(q, bpp);
        let err = (bpp - target).abs();
        let better = match best {
            None => true,
            Some((bq, bb)) => {
                let berr = (bb - target).abs();
                err < berr || (err == berr && q < bq)
            }
        };
        if better {
            best = Some((q, bpp));
        }
        Ok(bpp)
    };
    let within = |bpp: f64| tolerance.is_some_and(|t| ((bpp - target) / target).abs() <= t);

    // `lo` is the low-bitrate end of the bracket in both directions.
    let increasing = recipe.quality_direction == QualityDirection::HigherIsBetter;
    let (mut lo, mut hi) = (recipe.quality_min, recipe.quality_max);
    let mut early = false;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let bpp = eval(mid, &mut cache)?;
        if within(bpp) {
            early = true;
            break;
        }
        let too_small = bpp < target;
        if too_small == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !early {
        for q in [lo, hi] {
            let bpp = eval(q, &mut cache)?;
            if within(bpp) {
                break;
            }
        }
    }

    let (quality, actual_bpp) = best.expect("at least one evaluation happened");
    let boundary = quality == recipe.quality_min || quality == recipe.quality_max;
    let unreachable = boundary && {
        // the target sits beyond the boundary bitrate on the outside
        let at_low_end = (quality == recipe.quality_min) == increasing;
        if at_low_end {
            target < actual_bpp
        } else {
            target > actual_bpp
        }
    };
    if unreachable {
        log::warn!(
            "{}/{source_id}: target {target:.4} bpp unreachable, using boundary quality {quality} ({actual_bpp:.4} bpp)",
            recipe.id
        );
    }
    Ok(BitrateMatch {
        quality,
        actual_bpp,
        target_bpp: target,
        relative_deviation: (actual_bpp - target) / target,
        unreachable,
        evaluations: cache.len(),
    })
}
