//! Synthetic studies: manifests with made-up bitrate ladders, ground-truth
//! model parameters and simulated observers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CodecRecipe, QualityDirection, SourceImage, Stimulus, StudyManifest};
use crate::design::{Method, StimulusRef, Triplet};
use crate::error::{Error, Result};
use crate::scale::model::CodecParams;
use crate::seed::rng_from;
use crate::store::{Choice, Response, ResponseRecord, ResponseStore};

/// Manifest with sources `S1..` and codecs `c1..`, every ladder using the
/// same decreasing bitrates.
pub fn synthetic_manifest(n_sources: usize, n_codecs: usize, ladder_bpp: &[f64]) -> StudyManifest {
    let sources: Vec<SourceImage> = (1..=n_sources)
        .map(|i| SourceImage {
            id: format!("S{i}"),
            width: 840,
            height: 944,
            color_space: "Rec2100PQ".into(),
            file: PathBuf::from(format!("sources/S{i}.png")),
        })
        .collect();
    let codecs: Vec<CodecRecipe> = (1..=n_codecs)
        .map(|i| CodecRecipe {
            id: format!("c{i}"),
            command: "true".into(),
            quality_min: 0,
            quality_max: 100,
            quality_direction: QualityDirection::HigherIsBetter,
            bitrate_rule: None,
        })
        .collect();
    let mut stimuli = Vec::new();
    for s in &sources {
        for c in &codecs {
            for (i, &bpp) in ladder_bpp.iter().enumerate() {
                let level = i as u32 + 1;
                stimuli.push(Stimulus {
                    source: s.id.clone(),
                    codec: c.id.clone(),
                    level,
                    target_bpp: bpp,
                    actual_bpp: bpp,
                    quality: (100 - 10 * level as i64).max(0),
                    file: PathBuf::from(format!("stimuli/{}/{}_{level}.png", s.id, c.id)),
                });
            }
        }
    }
    StudyManifest {
        levels_per_codec: ladder_bpp.len() as u32,
        responses_per_triplet_target: 24,
        sources,
        codecs,
        stimuli,
        base_dir: PathBuf::new(),
    }
}

/// Ground-truth parameters per source, in manifest codec order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sources: BTreeMap<String, Vec<CodecParams>>,
}

impl GroundTruth {
    /// Same parameters for every source and codec.
    pub fn uniform(manifest: &StudyManifest, params: CodecParams) -> Self {
        GroundTruth {
            sources: manifest
                .sources
                .iter()
                .map(|s| (s.id.clone(), vec![params; manifest.codecs.len()]))
                .collect(),
        }
    }

    /// Codecs that differ moderately in efficiency and boost response.
    pub fn spread(manifest: &StudyManifest) -> Self {
        let n = manifest.codecs.len().max(1);
        let codec_params: Vec<CodecParams> = (0..manifest.codecs.len())
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                CodecParams {
                    alpha: 3.0 + 0.6 * t,
                    beta: 1.0 + 0.5 * t,
                    gamma1: 2.0 - 0.4 * t,
                    gamma2: 0.3 + 0.1 * t,
                }
            })
            .collect();
        GroundTruth {
            sources: manifest
                .sources
                .iter()
                .map(|s| (s.id.clone(), codec_params.clone()))
                .collect(),
        }
    }

    /// True distortion of one side of a triplet under `method`.
    pub fn distortion(&self, manifest: &StudyManifest, source: &str, side: &StimulusRef, method: Method) -> Result<f64> {
        let (codec, level) = match side {
            StimulusRef::Source => return Ok(0.0),
            StimulusRef::Coded { codec, level } => (codec, *level),
        };
        let idx = manifest.codec_index(codec).ok_or_else(|| Error::Unknown {
            kind: "codec",
            id: codec.clone(),
        })?;
        let params = self
            .sources
            .get(source)
            .and_then(|v| v.get(idx))
            .ok_or_else(|| Error::Unknown {
                kind: "source",
                id: source.to_string(),
            })?;
        let st = manifest.stimulus(source, codec, level).ok_or_else(|| Error::Unknown {
            kind: "stimulus",
            id: format!("{source}/{side}"),
        })?;
        let d = params.rd_distortion(st.actual_bpp);
        Ok(match method {
            Method::Ptc => d,
            Method::Btc => params.boost(d),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observer {
    /// Thurstone observer with latent noise of unit variance.
    Model {
        k: f64,
        /// Answers "not sure" when the scaled difference is below this.
        unsure_below: f64,
    },
    /// Picks left, right or "not sure" uniformly.
    RandomGuesser,
}

impl Observer {
    pub fn model() -> Self {
        Observer::Model {
            k: 1.0,
            unsure_below: 0.0,
        }
    }

    pub fn respond(
        &self,
        truth: &GroundTruth,
        manifest: &StudyManifest,
        triplet: &Triplet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Choice> {
        match *self {
            Observer::RandomGuesser => Ok(match rng.gen_range(0..3) {
                0 => Choice::Left,
                1 => Choice::NotSure,
                _ => Choice::Right,
            }),
            Observer::Model { k, unsure_below } => {
                let dl = truth.distortion(manifest, &triplet.source_id, &triplet.left, triplet.method)?;
                let dr = truth.distortion(manifest, &triplet.source_id, &triplet.right, triplet.method)?;
                let x = k * (dl - dr);
                if x.abs() < unsure_below {
                    return Ok(Choice::NotSure);
                }
                let p_left = crate::prob::normal_cdf(x);
                Ok(if rng.gen::<f64>() < p_left {
                    Choice::Left
                } else {
                    Choice::Right
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    /// Share of participants that guess at random.
    pub guesser_fraction: f64,
    pub observer: Observer,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 0,
            guesser_fraction: 0.0,
            observer: Observer::model(),
        }
    }
}

fn toggles(method: Method, rng: &mut ChaCha8Rng) -> Option<u32> {
    match method {
        Method::Ptc => Some(rng.gen_range(1..=6)),
        Method::Btc => None,
    }
}

/// `repeats` independent model responses to each triplet, without batches.
pub fn simulate_records(
    manifest: &StudyManifest,
    truth: &GroundTruth,
    triplets: &[Triplet],
    repeats: usize,
    observer: Observer,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ResponseRecord>> {
    let mut out = Vec::with_capacity(triplets.len() * repeats);
    for rep in 0..repeats {
        for (i, t) in triplets.iter().enumerate() {
            let choice = observer.respond(truth, manifest, t, rng)?;
            out.push(ResponseRecord {
                batch_id: "sim".into(),
                participant_id: format!("R{rep:04}"),
                question_index: i,
                triplet: t.clone(),
                choice,
                response_time_ms: rng.gen_range(800..6000),
                toggle_count: toggles(t.method, rng),
                submitted_at: 0,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub participants: usize,
    pub guessers: Vec<String>,
    pub responses: usize,
}

/// Runs simulated participants of `method` through the store until every
/// batch reaches its coverage target.
pub fn simulate_study(
    store: &mut ResponseStore,
    manifest: &StudyManifest,
    truth: &GroundTruth,
    method: Method,
    cfg: &SimulationConfig,
) -> Result<SimulationSummary> {
    let mut rng = rng_from(cfg.seed, &format!("simulate:{method}"));
    let mut summary = SimulationSummary::default();
    let max_batches = store.config().max_batches_per_participant;
    loop {
        let pid = format!("{method}-sim{:04}", summary.participants + 1);
        let observer = if rng.gen::<f64>() < cfg.guesser_fraction {
            Observer::RandomGuesser
        } else {
            cfg.observer
        };
        store.enroll(&pid, method, &format!("tok-{pid}"))?;
        let mut done = 0;
        while done < max_batches {
            let batch = match store.assign_batch(&pid, method) {
                Ok(b) => b,
                Err(Error::StudyComplete) => break,
                Err(e) => return Err(e),
            };
            for t in &batch.questions {
                let choice = observer.respond(truth, manifest, t, &mut rng)?;
                store.record_response(Response {
                    triplet_id: t.id.clone(),
                    batch_id: batch.id.clone(),
                    participant_id: pid.clone(),
                    choice,
                    response_time_ms: rng.gen_range(800..6000),
                    toggle_count: toggles(method, &mut rng),
                    submitted_at: 0,
                })?;
                summary.responses += 1;
            }
            done += 1;
        }
        if done == 0 {
            return Ok(summary);
        }
        summary.participants += 1;
        if observer == Observer::RandomGuesser {
            summary.guessers.push(pid);
        }
    }
}
