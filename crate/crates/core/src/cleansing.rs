//! Reliability screening of batch instances.
//!
//! A batch instance is one participant's sitting of one batch. It gets an
//! accuracy and a consistency score, both computed over same-codec
//! questions only and weighted by the absolute distortion-level difference
//! of the two test images (the source counts as level 0). Instances whose
//! mean score falls below the threshold are dropped as a whole.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::catalog::StudyManifest;
use crate::design::Method;
use crate::error::{Error, Result};
use crate::store::{expected_choice, Choice, ResponseRecord, ResponseTable};

pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// Pair score when exactly one of the two mirrored answers is "not sure".
pub const HALF_UNSURE_PAIR_SCORE: f64 = 0.375;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchInstance {
    pub participant_id: String,
    pub batch_id: String,
    pub method: Method,
    pub responses: Vec<ResponseRecord>,
}

/// Splits a response table into batch instances, ordered by
/// (batch, participant).
pub fn group_instances(table: &ResponseTable) -> Vec<BatchInstance> {
    let mut groups: BTreeMap<(String, String), Vec<ResponseRecord>> = BTreeMap::new();
    for r in &table.records {
        groups
            .entry((r.batch_id.clone(), r.participant_id.clone()))
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|((batch_id, participant_id), responses)| BatchInstance {
            method: responses[0].triplet.method,
            participant_id,
            batch_id,
            responses,
        })
        .collect()
}

/// Outcome of one answer relative to the lower-bitrate ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    Incorrect,
    Unsure,
}

fn outcome(r: &ResponseRecord, manifest: Option<&StudyManifest>) -> Option<Outcome> {
    let expected = expected_choice(&r.triplet, manifest)?;
    match r.choice {
        Choice::Skip => None,
        Choice::NotSure => Some(Outcome::Unsure),
        c if c == expected => Some(Outcome::Correct),
        _ => Some(Outcome::Incorrect),
    }
}

fn weight(r: &ResponseRecord) -> f64 {
    f64::from(r.triplet.level_gap())
}

/// Weighted share of correct same-codec answers; "not sure" earns half.
pub fn accuracy(instance: &BatchInstance, manifest: &StudyManifest) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for r in &instance.responses {
        let Some(o) = outcome(r, Some(manifest)) else {
            continue;
        };
        let w = weight(r);
        den += w;
        num += w * match o {
            Outcome::Correct => 1.0,
            Outcome::Unsure => 0.5,
            Outcome::Incorrect => 0.0,
        };
    }
    if den == 0.0 {
        return Err(Error::Scoring(format!(
            "instance {}/{} has no scorable same-codec responses",
            instance.participant_id, instance.batch_id
        )));
    }
    Ok(num / den)
}

/// 1 for matching outcomes, 0.375 when exactly one side is unsure, else 0.
pub fn pair_score(a: Outcome, b: Outcome) -> f64 {
    let unsure = |o: Outcome| o == Outcome::Unsure;
    if a == b {
        1.0
    } else if unsure(a) || unsure(b) {
        HALF_UNSURE_PAIR_SCORE
    } else {
        0.0
    }
}

/// Weighted mean agreement between each question and its mirror.
pub fn consistency(instance: &BatchInstance) -> Result<f64> {
    let by_id: BTreeMap<&str, &ResponseRecord> = instance
        .responses
        .iter()
        .map(|r| (r.triplet.id.as_str(), r))
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for r in &instance.responses {
        let mirror_id = r.triplet.mirror_id();
        // visit each pair once
        if r.triplet.id.as_str() > mirror_id.as_str() {
            continue;
        }
        let Some(m) = by_id.get(mirror_id.as_str()) else {
            continue;
        };
        let (Some(a), Some(b)) = (outcome(r, None), outcome(m, None)) else {
            continue;
        };
        let w = weight(r);
        den += w;
        num += w * pair_score(a, b);
    }
    if den == 0.0 {
        return Err(Error::Scoring(format!(
            "instance {}/{} has no scorable mirror pairs",
            instance.participant_id, instance.batch_id
        )));
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceScore {
    pub participant_id: String,
    pub batch_id: String,
    pub method: Method,
    pub responses: usize,
    pub accuracy: f64,
    pub consistency: f64,
}

impl InstanceScore {
    pub fn mean(&self) -> f64 {
        0.5 * (self.accuracy + self.consistency)
    }
}

pub fn score_instance(instance: &BatchInstance, manifest: &StudyManifest) -> Result<InstanceScore> {
    Ok(InstanceScore {
        participant_id: instance.participant_id.clone(),
        batch_id: instance.batch_id.clone(),
        method: instance.method,
        responses: instance.responses.len(),
        accuracy: accuracy(instance, manifest)?,
        consistency: consistency(instance)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cleansed {
    pub retained: Vec<InstanceScore>,
    pub excluded: Vec<InstanceScore>,
}

/// Keeps instances whose mean of accuracy and consistency reaches the
/// threshold.
pub fn filter_instances(scores: Vec<InstanceScore>, threshold: f64) -> Cleansed {
    let (retained, excluded) = scores.into_iter().partition(|s| s.mean() >= threshold);
    Cleansed { retained, excluded }
}

impl Cleansed {
    pub fn retained_count(&self, method: Method) -> usize {
        self.retained.iter().filter(|s| s.method == method).count()
    }

    /// Tab-separated audit of every instance and its verdict.
    pub fn audit_report(&self, threshold: f64) -> String {
        let mut out = format!("# cleansing threshold {threshold}\n");
        for m in Method::ALL {
            let total = self.retained_count(m) + self.excluded.iter().filter(|s| s.method == m).count();
            let _ = writeln!(out, "# {m}: retained {} of {total}", self.retained_count(m));
        }
        out.push_str("method\tbatch_id\tparticipant_id\tresponses\taccuracy\tconsistency\tmean\tverdict\n");
        let mut rows: Vec<(&InstanceScore, &str)> = self
            .retained
            .iter()
            .map(|s| (s, "retained"))
            .chain(self.excluded.iter().map(|s| (s, "excluded")))
            .collect();
        rows.sort_by(|a, b| {
            (a.0.method, &a.0.batch_id, &a.0.participant_id).cmp(&(b.0.method, &b.0.batch_id, &b.0.participant_id))
        });
        for (s, verdict) in rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{verdict}",
                s.method,
                s.batch_id,
                s.participant_id,
                s.responses,
                s.accuracy,
                s.consistency,
                s.mean()
            );
        }
        out
    }
}

/// Scores every instance of `table` and returns the verdicts together with
/// the responses of retained instances.
///
/// Instances that cannot be scored at all are excluded with zero scores.
pub fn cleanse(table: &ResponseTable, manifest: &StudyManifest, threshold: f64) -> (Cleansed, ResponseTable) {
    let instances = group_instances(table);
    let mut scores = Vec::with_capacity(instances.len());
    for inst in &instances {
        match score_instance(inst, manifest) {
            Ok(s) => scores.push(s),
            Err(e) => {
                log::warn!("{e}; excluding");
                scores.push(InstanceScore {
                    participant_id: inst.participant_id.clone(),
                    batch_id: inst.batch_id.clone(),
                    method: inst.method,
                    responses: inst.responses.len(),
                    accuracy: 0.0,
                    consistency: 0.0,
                });
            }
        }
    }
    let cleansed = filter_instances(scores, threshold);
    let keep: std::collections::BTreeSet<(&str, &str)> = cleansed
        .retained
        .iter()
        .map(|s| (s.batch_id.as_str(), s.participant_id.as_str()))
        .collect();
    let retained = table
        .records
        .iter()
        .filter(|r| keep.contains(&(r.batch_id.as_str(), r.participant_id.as_str())))
        .cloned()
        .collect();
    (cleansed, ResponseTable::new(retained))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{StimulusRef, Triplet};
    use crate::synthetic::synthetic_manifest;

    fn m() -> StudyManifest {
        synthetic_manifest(1, 2, &[2.0, 1.6, 1.2, 0.8, 0.4])
    }

    fn r(left: &str, right: &str, choice: Choice) -> ResponseRecord {
        ResponseRecord {
            batch_id: "b".into(),
            participant_id: "p".into(),
            question_index: 0,
            triplet: Triplet::new(Method::Btc, "S1", left.parse().unwrap(), right.parse().unwrap()),
            choice,
            response_time_ms: 1000,
            toggle_count: None,
            submitted_at: 0,
        }
    }

    fn inst(responses: Vec<ResponseRecord>) -> BatchInstance {
        BatchInstance {
            participant_id: "p".into(),
            batch_id: "b".into(),
            method: Method::Btc,
            responses,
        }
    }

    #[test]
    fn all_correct_and_all_unsure() {
        let i = inst(vec![
            r("c1@1", "c1@3", Choice::Right),
            r("c1@3", "c1@1", Choice::Left),
            r("SOURCE", "c1@2", Choice::Right),
            r("c1@2", "SOURCE", Choice::Left),
        ]);
        assert_eq!(accuracy(&i, &m()).unwrap(), 1.0);
        assert_eq!(consistency(&i).unwrap(), 1.0);
        let unsure = inst(i.responses.iter().map(|x| ResponseRecord { choice: Choice::NotSure, ..x.clone() }).collect());
        assert_eq!(accuracy(&unsure, &m()).unwrap(), 0.5);
        assert_eq!(consistency(&unsure).unwrap(), 1.0);
    }

    #[test]
    fn weighted_accuracy_hand_value() {
        // weight 1 question wrong, weight 5 question right
        let i = inst(vec![r("c1@1", "c1@2", Choice::Left), r("SOURCE", "c1@5", Choice::Right)]);
        let a = accuracy(&i, &m()).unwrap();
        assert!((a - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pair_scores() {
        // (correct, not sure) with equal weight next to (correct, correct)
        let i = inst(vec![
            r("c1@1", "c1@2", Choice::Right),
            r("c1@2", "c1@1", Choice::NotSure),
            r("c1@3", "c1@4", Choice::Right),
            r("c1@4", "c1@3", Choice::Left),
        ]);
        assert!((consistency(&i).unwrap() - 0.6875).abs() < 1e-15);
        // "left" on both presentations: one correct, one incorrect
        let i = inst(vec![r("c1@1", "c1@2", Choice::Left), r("c1@2", "c1@1", Choice::Left)]);
        assert_eq!(consistency(&i).unwrap(), 0.0);
        // both wrong is still consistent
        let i = inst(vec![r("c1@1", "c1@2", Choice::Left), r("c1@2", "c1@1", Choice::Right)]);
        assert_eq!(consistency(&i).unwrap(), 1.0);
        assert_eq!(pair_score(Outcome::Incorrect, Outcome::Unsure), 0.375);
    }

    #[test]
    fn skips_and_cross_codec_are_ignored() {
        let i = inst(vec![
            r("c1@1", "c1@2", Choice::Right),
            r("c1@2", "c1@1", Choice::Skip),
            r("c1@1", "c2@2", Choice::Left),
            r("c2@2", "c1@1", Choice::Left),
        ]);
        assert_eq!(accuracy(&i, &m()).unwrap(), 1.0);
        assert!(consistency(&i).is_err());
        let only_skips = inst(vec![r("c1@1", "c1@2", Choice::Skip)]);
        assert!(accuracy(&only_skips, &m()).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        let s = |a: f64, c: f64| InstanceScore {
            participant_id: format!("{a}{c}"),
            batch_id: "b".into(),
            method: Method::Ptc,
            responses: 120,
            accuracy: a,
            consistency: c,
        };
        let out = filter_instances(vec![s(0.9, 0.6), s(0.7, 0.69), s(0.7, 0.7)], DEFAULT_THRESHOLD);
        assert_eq!(out.retained.len(), 2);
        assert_eq!(out.excluded.len(), 1);
        assert_eq!(out.excluded[0].accuracy, 0.7);
        let report = out.audit_report(0.7);
        assert!(report.contains("# ptc: retained 2 of 3"));
        assert!(report.contains("excluded"));
    }

    #[test]
    fn source_sentinel_on_either_side() {
        let t = Triplet::new(Method::Ptc, "S1", StimulusRef::coded("c1", 3), StimulusRef::Source);
        assert_eq!(t.level_gap(), 3);
    }
}
