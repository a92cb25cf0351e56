//! Maximum-likelihood fit of the per-source model with multiple starts.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::{self, nll_theta, LikelihoodConfig, SourceData};
use super::model::CodecParams;
use super::optim::{self, Minimum};
use crate::error::{Error, Result};
use crate::prob::median;
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub seed: u64,
    /// Log-normal spread of restart perturbations.
    pub init_sigma: f64,
    pub alpha0: f64,
    pub gamma1_0: f64,
    pub gamma2_0: f64,
    pub likelihood: LikelihoodConfig,
    pub max_iter: usize,
    pub gtol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 8,
            seed: 0,
            init_sigma: 0.3,
            alpha0: 2.0,
            gamma1_0: 2.0,
            gamma2_0: 0.1,
            likelihood: LikelihoodConfig::default(),
            max_iter: 1000,
            gtol: 1e-6,
        }
    }
}

impl FitConfig {
    fn optimizer(&self) -> optim::Options {
        optim::Options {
            max_iter: self.max_iter,
            gtol: self.gtol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecModel {
    pub codec_id: String,
    pub params: CodecParams,
    /// (level, actual bpp) of the stimuli the curve was fitted on.
    pub ladder: Vec<(u32, f64)>,
}

impl CodecModel {
    /// Bitrate range spanned by the ladder.
    pub fn bitrate_span(&self) -> (f64, f64) {
        let lo = self.ladder.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = self.ladder.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub nll: f64,
    pub null_nll: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub restart_index: usize,
    pub converged: bool,
    pub used_fallback: bool,
    pub triplets: usize,
    pub responses: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub source_id: String,
    pub codecs: Vec<CodecModel>,
    pub diagnostics: FitDiagnostics,
}

impl SourceModel {
    pub fn params(&self) -> Vec<CodecParams> {
        self.codecs.iter().map(|c| c.params).collect()
    }

    pub fn codec(&self, codec_id: &str) -> Option<&CodecModel> {
        self.codecs.iter().find(|c| c.codec_id == codec_id)
    }

    /// Plain-viewing distortion in JND of `codec_id` at `bpp`.
    pub fn distortion(&self, codec_id: &str, bpp: f64) -> Option<f64> {
        self.codec(codec_id).map(|c| c.params.rd_distortion(bpp))
    }
}

/// Fitted models of every source, as written by `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub config: FitConfig,
    pub sources: Vec<SourceModel>,
}

impl ModelSet {
    pub fn source(&self, id: &str) -> Option<&SourceModel> {
        self.sources.iter().find(|s| s.source_id == id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("model set", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn check_data(data: &SourceData) -> Result<()> {
    if data.observations.is_empty() {
        return Err(Error::Fit(format!("source {} has no responses", data.source_id)));
    }
    let missing = data.unobserved_codecs();
    if !missing.is_empty() {
        return Err(Error::Fit(format!(
            "source {}: no retained responses for codec(s) {}",
            data.source_id,
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Default starting point: a curve that sits at 1 JND at the median
/// bitrate of each ladder.
pub fn initial_params(data: &SourceData, cfg: &FitConfig) -> Vec<CodecParams> {
    data.ladders
        .iter()
        .map(|ladder| {
            let bpps: Vec<f64> = ladder.iter().map(|x| x.1).collect();
            let med = median(&bpps).filter(|m| *m > 0.0).unwrap_or(1.0);
            let beta = (cfg.alpha0.ln() / med).max(1e-3);
            CodecParams {
                alpha: cfg.alpha0,
                beta,
                gamma1: cfg.gamma1_0,
                gamma2: cfg.gamma2_0,
            }
        })
        .collect()
}

fn run(data: &SourceData, cfg: &FitConfig, start: &[CodecParams]) -> Minimum {
    let lcfg = cfg.likelihood;
    let mut objective = |theta: &[f64], grad: Option<&mut [f64]>| nll_theta(theta, data, &lcfg, grad);
    optim::minimize(&mut objective, &likelihood::pack(start), &cfg.optimizer())
}

fn assemble(data: &SourceData, best: Minimum, restart_index: usize) -> SourceModel {
    let params = likelihood::unpack(&best.x);
    let codecs = data
        .codec_ids
        .iter()
        .zip(params)
        .zip(&data.ladders)
        .map(|((id, params), ladder)| CodecModel {
            codec_id: id.clone(),
            params,
            ladder: ladder.clone(),
        })
        .collect();
    if !best.converged {
        log::warn!(
            "source {}: optimizer stopped without converging after {} iterations (nll {:.6})",
            data.source_id,
            best.iterations,
            best.f
        );
    }
    SourceModel {
        source_id: data.source_id.clone(),
        codecs,
        diagnostics: FitDiagnostics {
            nll: best.f,
            null_nll: likelihood::null_negative_log_likelihood(data),
            iterations: best.iterations,
            evaluations: best.evaluations,
            restart_index,
            converged: best.converged,
            used_fallback: best.used_fallback,
            triplets: data.observations.len(),
            responses: data.observations.iter().map(|o| o.responses()).sum(),
        },
    }
}

/// Starting points of every restart; restart 0 is unperturbed.
pub fn restart_points(data: &SourceData, cfg: &FitConfig) -> Vec<Vec<CodecParams>> {
    let base = initial_params(data, cfg);
    (0..cfg.restarts.max(1))
        .map(|r| {
            if r == 0 {
                return base.clone();
            }
            let mut rng = rng_from(cfg.seed, &format!("restart:{}:{r}", data.source_id));
            let mut jitter = || (cfg.init_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
            base.iter()
                .map(|p| CodecParams {
                    alpha: p.alpha * jitter(),
                    beta: p.beta * jitter(),
                    gamma1: p.gamma1 * jitter(),
                    gamma2: p.gamma2 * jitter(),
                })
                .collect()
        })
        .collect()
}

/// Multi-start maximum-likelihood fit; returns the restart with the lowest
/// negative log-likelihood (earliest restart on ties).
pub fn fit_source(data: &SourceData, cfg: &FitConfig) -> Result<SourceModel> {
    check_data(data)?;
    let starts = restart_points(data, cfg);
    let results: Vec<Minimum> = starts.par_iter().map(|s| run(data, cfg, s)).collect();
    let (idx, best) = results
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.f.is_finite())
        .min_by(|a, b| a.1.f.total_cmp(&b.1.f).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::Fit(format!("source {}: every restart diverged", data.source_id)))?;
    Ok(assemble(data, best, idx))
}

/// Single fit from a given starting point.
pub fn fit_from(data: &SourceData, cfg: &FitConfig, start: &[CodecParams]) -> Result<SourceModel> {
    check_data(data)?;
    let best = run(data, cfg, start);
    if !best.f.is_finite() {
        return Err(Error::Fit(format!("source {}: fit diverged", data.source_id)));
    }
    Ok(assemble(data, best, 0))
}
