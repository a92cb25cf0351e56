#![allow(dead_code)]

use aic_core::catalog::StudyManifest;
use aic_core::design::{Method, StimulusRef, Triplet};
use aic_core::scale::CodecParams;
use aic_core::store::{Choice, ResponseRecord};

pub const LADDER: [f64; 5] = [2.0, 1.5, 1.0, 0.6, 0.3];

/// Standard normal CDF by its Taylor series near zero and a continued
/// fraction for the tails. Independent of the library's implementation.
pub fn phi(x: f64) -> f64 {
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if x.abs() <= 3.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 2.0;
            term *= x * x / n;
            sum += term;
        }
        return 0.5 + density * sum;
    }
    let z = x.abs();
    let mut cf = z;
    for k in (1..=300).rev() {
        cf = z + k as f64 / cf;
    }
    let upper = density / cf;
    if x > 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

pub fn record(t: &Triplet, choice: Choice) -> ResponseRecord {
    ResponseRecord {
        batch_id: "b".into(),
        participant_id: "p".into(),
        question_index: 0,
        triplet: t.clone(),
        choice,
        response_time_ms: 1000,
        toggle_count: Some(1),
        submitted_at: 0,
    }
}

pub fn params(alpha: f64, beta: f64, gamma1: f64, gamma2: f64) -> CodecParams {
    CodecParams {
        alpha,
        beta,
        gamma1,
        gamma2,
    }
}

/// Per-response summation of the log-likelihood, with probabilities clamped
/// into [1e-12, 1 - 1e-12].
pub fn oracle_nll(params: &[CodecParams], manifest: &StudyManifest, records: &[ResponseRecord]) -> f64 {
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    let dist = |t: &Triplet, s: &StimulusRef| -> f64 {
        match s {
            StimulusRef::Source => 0.0,
            StimulusRef::Coded { codec, level } => {
                let ci = manifest.codec_index(codec).unwrap();
                let p = params[ci];
                let bpp = manifest.stimulus(&t.source_id, codec, *level).unwrap().actual_bpp;
                let d = p.alpha * (-p.beta * bpp).exp();
                match t.method {
                    Method::Ptc => d,
                    Method::Btc => p.gamma1 * d + p.gamma2 * d * d,
                }
            }
        }
    };
    let mut total = 0.0;
    for r in records {
        let x = dist(&r.triplet, &r.triplet.left) - dist(&r.triplet, &r.triplet.right);
        let pl = clamp(phi(x));
        let pr = clamp(phi(-x));
        total -= match r.choice {
            Choice::Left => pl.ln(),
            Choice::Right => pr.ln(),
            Choice::NotSure => 0.5 * pl.ln() + 0.5 * pr.ln(),
            Choice::Skip => 0.0,
        };
    }
    total
}

