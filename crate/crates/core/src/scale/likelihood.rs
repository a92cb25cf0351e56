//! Negative log-likelihood of triplet responses under the functional model.
//!
//! Responses are aggregated per triplet into fractional left/right counts:
//! a "not sure" adds one half to each side. The optimizer works on an
//! unconstrained vector holding, per codec, `[ln alpha, ln beta, ln gamma1, s]`
//! with `gamma2 = softplus(s)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::CodecParams;
use crate::catalog::StudyManifest;
use crate::design::{Method, StimulusRef};
use crate::error::{Error, Result};
use crate::prob::{normal_cdf, normal_pdf};
use crate::store::{Choice, ResponseRecord};

pub const PARAMS_PER_CODEC: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Scale from JND difference to the unit-variance latent axis.
    pub k: f64,
    /// Probabilities are clamped into `[eps, 1 - eps]`.
    pub eps: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { k: 1.0, eps: 1e-12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Side {
    Source,
    Coded { codec: usize, bpp: f64 },
}

/// All responses to one triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub triplet: usize,
    pub method: Method,
    pub left: Side,
    pub right: Side,
    /// Left choices plus half the "not sure" answers.
    pub w_left: f64,
    pub w_right: f64,
}

impl Observation {
    pub fn responses(&self) -> f64 {
        self.w_left + self.w_right
    }
}

/// Responses of one source image, ready for fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceData {
    pub source_id: String,
    pub codec_ids: Vec<String>,
    /// Per codec: (level, actual bpp), ordered by level.
    pub ladders: Vec<Vec<(u32, f64)>>,
    pub triplet_ids: Vec<String>,
    pub observations: Vec<Observation>,
}

impl SourceData {
    /// Collects the non-skip responses of `source_id`.
    pub fn from_records<'a>(
        manifest: &StudyManifest,
        source_id: &str,
        records: impl IntoIterator<Item = &'a ResponseRecord>,
    ) -> Result<Self> {
        if manifest.source(source_id).is_none() {
            return Err(Error::Unknown {
                kind: "source",
                id: source_id.to_string(),
            });
        }
        let codec_ids: Vec<String> = manifest.codecs.iter().map(|c| c.id.clone()).collect();
        let ladders = codec_ids
            .iter()
            .map(|c| {
                manifest
                    .ladder(source_id, c)
                    .iter()
                    .map(|s| (s.level, s.actual_bpp))
                    .collect()
            })
            .collect();

        let side = |r: &StimulusRef| -> Result<Side> {
            match r {
                StimulusRef::Source => Ok(Side::Source),
                StimulusRef::Coded { codec, level } => {
                    let idx = manifest.codec_index(codec).ok_or_else(|| Error::Unknown {
                        kind: "codec",
                        id: codec.clone(),
                    })?;
                    let st = manifest
                        .stimulus(source_id, codec, *level)
                        .ok_or_else(|| Error::Unknown {
                            kind: "stimulus",
                            id: format!("{source_id}/{r}"),
                        })?;
                    Ok(Side::Coded {
                        codec: idx,
                        bpp: st.actual_bpp,
                    })
                }
            }
        };

        let mut by_triplet: BTreeMap<String, Observation> = BTreeMap::new();
        for r in records {
            if r.triplet.source_id != source_id || r.choice == Choice::Skip {
                continue;
            }
            let obs = match by_triplet.get_mut(&r.triplet.id) {
                Some(o) => o,
                None => {
                    let o = Observation {
                        triplet: 0,
                        method: r.triplet.method,
                        left: side(&r.triplet.left)?,
                        right: side(&r.triplet.right)?,
                        w_left: 0.0,
                        w_right: 0.0,
                    };
                    by_triplet.entry(r.triplet.id.clone()).or_insert(o)
                }
            };
            match r.choice {
                Choice::Left => obs.w_left += 1.0,
                Choice::Right => obs.w_right += 1.0,
                Choice::NotSure => {
                    obs.w_left += 0.5;
                    obs.w_right += 0.5;
                }
                Choice::Skip => unreachable!("skips filtered above"),
            }
        }
        let mut triplet_ids = Vec::with_capacity(by_triplet.len());
        let mut observations = Vec::with_capacity(by_triplet.len());
        for (i, (id, mut o)) in by_triplet.into_iter().enumerate() {
            o.triplet = i;
            triplet_ids.push(id);
            observations.push(o);
        }
        Ok(SourceData {
            source_id: source_id.to_string(),
            codec_ids,
            ladders,
            triplet_ids,
            observations,
        })
    }

    pub fn n_codecs(&self) -> usize {
        self.codec_ids.len()
    }

    pub fn n_params(&self) -> usize {
        PARAMS_PER_CODEC * self.n_codecs()
    }

    /// Codecs that no observation touches.
    pub fn unobserved_codecs(&self) -> Vec<&str> {
        let mut seen = vec![false; self.n_codecs()];
        for o in &self.observations {
            for s in [o.left, o.right] {
                if let Side::Coded { codec, .. } = s {
                    seen[codec] = true;
                }
            }
        }
        self.codec_ids
            .iter()
            .zip(seen)
            .filter(|(_, s)| !s)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// Same data with each observation's counts multiplied by `weights[i]`;
    /// zero-weight observations are dropped.
    pub fn reweighted(&self, weights: &[f64]) -> SourceData {
        assert_eq!(weights.len(), self.observations.len());
        let observations = self
            .observations
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(o, &w)| Observation {
                w_left: o.w_left * w,
                w_right: o.w_right * w,
                ..o.clone()
            })
            .collect();
        SourceData {
            observations,
            ..self.clone()
        }
    }
}

fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp()).ln_1p()
    }
}

pub fn pack(params: &[CodecParams]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| {
            [
                p.alpha.ln(),
                p.beta.ln(),
                p.gamma1.ln(),
                softplus_inverse(p.gamma2),
            ]
        })
        .collect()
}

pub fn unpack(theta: &[f64]) -> Vec<CodecParams> {
    theta
        .chunks_exact(PARAMS_PER_CODEC)
        .map(|c| CodecParams {
            alpha: c[0].exp(),
            beta: c[1].exp(),
            gamma1: c[2].exp(),
            gamma2: softplus(c[3]),
        })
        .collect()
}

/// Distortion of one side and its gradient with respect to that codec's
/// four unconstrained parameters.
fn side_value(theta: &[f64], side: Side, method: Method) -> (f64, Option<(usize, [f64; 4])>) {
    let Side::Coded { codec, bpp } = side else {
        return (0.0, None);
    };
    let t = &theta[codec * PARAMS_PER_CODEC..(codec + 1) * PARAMS_PER_CODEC];
    let (alpha, beta, gamma1, s) = (t[0].exp(), t[1].exp(), t[2].exp(), t[3]);
    let d = alpha * (-beta * bpp).exp();
    let dd_dlnalpha = d;
    let dd_dlnbeta = -beta * bpp * d;
    match method {
        Method::Ptc => (d, Some((codec, [dd_dlnalpha, dd_dlnbeta, 0.0, 0.0]))),
        Method::Btc => {
            let gamma2 = softplus(s);
            let h = gamma1 * d + gamma2 * d * d;
            let dh_dd = gamma1 + 2.0 * gamma2 * d;
            (
                h,
                Some((
                    codec,
                    [
                        dh_dd * dd_dlnalpha,
                        dh_dd * dd_dlnbeta,
                        gamma1 * d,
                        d * d * sigmoid(s),
                    ],
                )),
            )
        }
    }
}

/// Negative log-likelihood at the unconstrained point `theta`, and its
/// gradient when `grad` is given.
pub fn nll_theta(theta: &[f64], data: &SourceData, cfg: &LikelihoodConfig, mut grad: Option<&mut [f64]>) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let lo = cfg.eps;
    let hi = 1.0 - cfg.eps;
    let mut total = 0.0;
    for o in &data.observations {
        let (dl, gl) = side_value(theta, o.left, o.method);
        let (dr, gr) = side_value(theta, o.right, o.method);
        let x = cfg.k * (dl - dr);
        let p = normal_cdf(x);
        let q = normal_cdf(-x);
        let pc = p.clamp(lo, hi);
        let qc = q.clamp(lo, hi);
        total -= o.w_left * pc.ln() + o.w_right * qc.ln();
        if let Some(g) = grad.as_deref_mut() {
            let phi = normal_pdf(x);
            let mut d_dx = 0.0;
            if p > lo && p < hi {
                d_dx -= o.w_left * phi / p;
            }
            if q > lo && q < hi {
                d_dx += o.w_right * phi / q;
            }
            let d_ddelta = d_dx * cfg.k;
            if let Some((c, gv)) = gl {
                for (j, v) in gv.iter().enumerate() {
                    g[c * PARAMS_PER_CODEC + j] += d_ddelta * v;
                }
            }
            if let Some((c, gv)) = gr {
                for (j, v) in gv.iter().enumerate() {
                    g[c * PARAMS_PER_CODEC + j] -= d_ddelta * v;
                }
            }
        }
    }
    total
}

/// Negative log-likelihood of `data` under per-codec parameters `params`.
pub fn negative_log_likelihood(params: &[CodecParams], data: &SourceData, cfg: &LikelihoodConfig) -> f64 {
    assert_eq!(params.len(), data.n_codecs(), "one parameter set per codec");
    // Evaluated directly in the natural parameters so that gamma2 = 0 is
    // representable exactly.
    let side = |s: Side, m: Method| -> f64 {
        match s {
            Side::Source => 0.0,
            Side::Coded { codec, bpp } => {
                let p = &params[codec];
                let d = p.rd_distortion(bpp);
                match m {
                    Method::Ptc => d,
                    Method::Btc => p.boost(d),
                }
            }
        }
    };
    let (lo, hi) = (cfg.eps, 1.0 - cfg.eps);
    data.observations
        .iter()
        .map(|o| {
            let x = cfg.k * (side(o.left, o.method) - side(o.right, o.method));
            let p = normal_cdf(x).clamp(lo, hi);
            let q = normal_cdf(-x).clamp(lo, hi);
            -(o.w_left * p.ln() + o.w_right * q.ln())
        })
        .sum()
}

/// Likelihood of the model in which every stimulus has the same distortion:
/// each triplet contributes as if p = 1/2.
pub fn null_negative_log_likelihood(data: &SourceData) -> f64 {
    data.observations
        .iter()
        .map(|o| o.responses() * std::f64::consts::LN_2)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.01, 0.3, 1.0, 5.0, 40.0] {
            let s = softplus_inverse(y);
            assert!((softplus(s) - y).abs() <= 1e-9 * y.max(1.0), "{y}");
        }
        let params = vec![CodecParams {
            alpha: 3.0,
            beta: 1.2,
            gamma1: 2.0,
            gamma2: 0.3,
        }];
        let back = unpack(&pack(&params));
        assert!((back[0].alpha - 3.0).abs() < 1e-12);
        assert!((back[0].gamma2 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn equal_sides_cost_ln2_each() {
        let data = SourceData {
            source_id: "S".into(),
            codec_ids: vec!["c".into()],
            ladders: vec![vec![(1, 1.0)]],
            triplet_ids: vec!["t".into()],
            observations: vec![Observation {
                triplet: 0,
                method: Method::Ptc,
                left: Side::Coded { codec: 0, bpp: 1.0 },
                right: Side::Coded { codec: 0, bpp: 1.0 },
                w_left: 1.0,
                w_right: 0.0,
            }],
        };
        let params = [CodecParams {
            alpha: 2.0,
            beta: 1.0,
            gamma1: 1.0,
            gamma2: 0.0,
        }];
        let v = negative_log_likelihood(&params, &data, &LikelihoodConfig::default());
        assert!((v + 0.5f64.ln()).abs() < 1e-15);
        assert!((null_negative_log_likelihood(&data) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
