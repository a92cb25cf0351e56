//! The per-codec functional model: an exponential rate-distortion curve for
//! plain viewing and a quadratic map from plain to boosted distortion.

use serde::{Deserialize, Serialize};

use crate::prob::normal_cdf;

/// Four parameters of one codec.
///
/// `alpha` is in JND, `beta` in 1/bpp, `gamma1` is unitless and `gamma2`
/// in 1/JND.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl CodecParams {
    pub fn is_valid(&self) -> bool {
        self.alpha > 0.0 && self.beta > 0.0 && self.gamma1 > 0.0 && self.gamma2 >= 0.0
    }

    pub fn rd_distortion(&self, bpp: f64) -> f64 {
        rd_distortion(self, bpp)
    }

    pub fn boost(&self, d: f64) -> f64 {
        boost(self, d)
    }
}

/// `alpha * exp(-beta * bpp)`, in JND.
pub fn rd_distortion(p: &CodecParams, bpp: f64) -> f64 {
    p.alpha * (-p.beta * bpp).exp()
}

/// `gamma1 * d + gamma2 * d^2`: plain-viewing distortion mapped to its
/// boosted-viewing counterpart.
pub fn boost(p: &CodecParams, d: f64) -> f64 {
    p.gamma1 * d + p.gamma2 * d * d
}

/// Probability that the left image is judged the more distorted one under
/// Thurstone Case V, with `k` scaling JND differences onto the unit-variance
/// latent axis.
pub fn choice_probability(d_left: f64, d_right: f64, k: f64) -> f64 {
    normal_cdf(k * (d_left - d_right))
}
