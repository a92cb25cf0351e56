//! Participant enrollment, batch assignment and response recording.
//!
//! State lives in memory and is mirrored to an append-only JSON-lines event
//! log (`events.jsonl` in the data directory). Every mutation is written and
//! synced before it is acknowledged; reopening the store replays the log. A
//! torn final line left by a crash is discarded on open.

mod records;
pub mod service;

pub use records::{
    expected_choice, Choice, ChoiceCounts, GapSummary, Response, ResponseRecord, ResponseSummary,
    ResponseTable,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::{Batch, Method, Triplet};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_BATCHES_PER_PARTICIPANT: usize = 2;

const LOG_FILE: &str = "events.jsonl";

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub max_batches_per_participant: usize,
    /// Batch instances wanted per batch; one instance yields one response
    /// per triplet of the batch.
    pub coverage_target: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            max_batches_per_participant: DEFAULT_MAX_BATCHES_PER_PARTICIPANT,
            coverage_target: crate::catalog::DEFAULT_RESPONSES_PER_TRIPLET as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enrolled {
        participant_id: String,
        method: Method,
        token: String,
    },
    Assigned {
        participant_id: String,
        batch_id: String,
    },
    Responded {
        response: Response,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Participant {
    pub id: String,
    pub method: Method,
    pub completed_batches: Vec<String>,
    pub active_batch: Option<String>,
    #[serde(skip)]
    token: String,
    #[serde(skip)]
    answered: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ack {
    /// The response was already stored; nothing was appended.
    pub duplicate: bool,
    pub stored: usize,
    /// This response finished the participant's batch.
    pub batch_complete: bool,
}

pub struct ResponseStore {
    dir: PathBuf,
    log: File,
    config: StoreConfig,
    batches: BTreeMap<String, Batch>,
    participants: BTreeMap<String, Participant>,
    tokens: HashMap<String, String>,
    /// Assigned instances per batch, including ones still in progress.
    coverage: BTreeMap<String, usize>,
    responses: Vec<Response>,
    index: HashMap<(String, String, String), usize>,
}

impl ResponseStore {
    /// Opens (or creates) the store in `dir` and replays its log.
    pub fn open(dir: impl AsRef<Path>, batches: Vec<Batch>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(LOG_FILE);

        let mut events = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut reader = BufReader::new(file);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| Error::io(&path, e))?;
                if n == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    log::warn!("{}: dropping torn trailing record", path.display());
                    break;
                }
                match serde_json::from_str::<Event>(line.trim_end()) {
                    Ok(ev) => {
                        events.push(ev);
                        good_len += n as u64;
                    }
                    Err(e) => {
                        return Err(Error::parse(
                            path.display().to_string(),
                            format!("record {}: {e}", events.len() + 1),
                        ))
                    }
                }
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        log.set_len(good_len).map_err(|e| Error::io(&path, e))?;

        let mut store = ResponseStore {
            dir,
            log,
            config,
            coverage: batches.iter().map(|b| (b.id.clone(), 0)).collect(),
            batches: batches.into_iter().map(|b| (b.id.clone(), b)).collect(),
            participants: BTreeMap::new(),
            tokens: HashMap::new(),
            responses: Vec::new(),
            index: HashMap::new(),
        };
        for ev in events {
            store.apply(ev)?;
        }
        Ok(store)
    }

    pub fn data_dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn append(&mut self, ev: &Event) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        let mut line = serde_json::to_string(ev).map_err(|e| Error::parse("event", e))?;
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .and_then(|_| self.log.sync_data())
            .map_err(|e| Error::io(&path, e))
    }

    fn apply(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Enrolled {
                participant_id,
                method,
                token,
            } => {
                self.tokens.insert(token.clone(), participant_id.clone());
                self.participants.insert(
                    participant_id.clone(),
                    Participant {
                        id: participant_id,
                        method,
                        completed_batches: Vec::new(),
                        active_batch: None,
                        token,
                        answered: BTreeSet::new(),
                    },
                );
            }
            Event::Assigned {
                participant_id,
                batch_id,
            } => {
                let p = self
                    .participants
                    .get_mut(&participant_id)
                    .ok_or_else(|| Error::Unknown {
                        kind: "participant",
                        id: participant_id.clone(),
                    })?;
                p.active_batch = Some(batch_id.clone());
                p.answered.clear();
                *self.coverage.entry(batch_id).or_default() += 1;
            }
            Event::Responded { response } => {
                let p = self
                    .participants
                    .get_mut(&response.participant_id)
                    .ok_or_else(|| Error::Unknown {
                        kind: "participant",
                        id: response.participant_id.clone(),
                    })?;
                p.answered.insert(response.triplet_id.clone());
                let batch_len = self
                    .batches
                    .get(&response.batch_id)
                    .map_or(usize::MAX, |b| b.questions.len());
                if p.answered.len() >= batch_len {
                    p.completed_batches.push(response.batch_id.clone());
                    p.active_batch = None;
                    p.answered.clear();
                }
                self.index.insert(response.key(), self.responses.len());
                self.responses.push(response);
            }
        }
        Ok(())
    }

    fn commit(&mut self, ev: Event) -> Result<()> {
        self.append(&ev)?;
        self.apply(ev)
    }

    pub fn enroll(&mut self, participant_id: &str, method: Method, token: &str) -> Result<()> {
        if let Some(p) = self.participants.get(participant_id) {
            if p.method == method && p.token == token {
                return Ok(());
            }
            return Err(Error::Rejected(format!(
                "participant {participant_id} is already enrolled"
            )));
        }
        if self.tokens.contains_key(token) {
            return Err(Error::Rejected("token already in use".into()));
        }
        self.commit(Event::Enrolled {
            participant_id: participant_id.to_string(),
            method,
            token: token.to_string(),
        })
    }

    pub fn participant_for_token(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.get(id)
    }

    pub fn batch(&self, id: &str) -> Option<&Batch> {
        self.batches.get(id)
    }

    pub fn triplet(&self, id: &str) -> Option<&Triplet> {
        self.batches
            .values()
            .flat_map(|b| b.questions.iter())
            .find(|t| t.id == id)
    }

    pub fn coverage(&self) -> &BTreeMap<String, usize> {
        &self.coverage
    }

    /// Picks the least-covered batch of `method` that the participant has
    /// not done yet, ties broken by batch id. A participant with an
    /// unfinished batch gets that batch back.
    pub fn assign_batch(&mut self, participant_id: &str, method: Method) -> Result<Batch> {
        let p = self
            .participants
            .get(participant_id)
            .ok_or_else(|| Error::Unknown {
                kind: "participant",
                id: participant_id.to_string(),
            })?;
        if p.method != method {
            return Err(Error::Rejected(format!(
                "participant {participant_id} is enrolled for {}, not {method}",
                p.method
            )));
        }
        if let Some(active) = &p.active_batch {
            return Ok(self.batches[active].clone());
        }
        if p.completed_batches.len() >= self.config.max_batches_per_participant {
            return Err(Error::LimitReached(participant_id.to_string()));
        }
        let chosen = self
            .batches
            .values()
            .filter(|b| b.method == method && !p.completed_batches.contains(&b.id))
            .map(|b| (self.coverage[&b.id], &b.id))
            .filter(|(cov, _)| *cov < self.config.coverage_target)
            .min()
            .map(|(_, id)| id.clone());
        let Some(batch_id) = chosen else {
            return Err(Error::StudyComplete);
        };
        self.commit(Event::Assigned {
            participant_id: participant_id.to_string(),
            batch_id: batch_id.clone(),
        })?;
        Ok(self.batches[&batch_id].clone())
    }

    pub fn record_response(&mut self, r: Response) -> Result<Ack> {
        if let Some(&i) = self.index.get(&r.key()) {
            return if self.responses[i].same_judgment(&r) {
                Ok(Ack {
                    duplicate: true,
                    stored: self.responses.len(),
                    batch_complete: false,
                })
            } else {
                Err(Error::Duplicate(r.triplet_id))
            };
        }
        let p = self
            .participants
            .get(&r.participant_id)
            .ok_or_else(|| Error::Unknown {
                kind: "participant",
                id: r.participant_id.clone(),
            })?;
        if p.active_batch.as_deref() != Some(r.batch_id.as_str()) {
            return Err(Error::Rejected(format!(
                "batch {} is not the active batch of {}",
                r.batch_id, r.participant_id
            )));
        }
        let batch = &self.batches[&r.batch_id];
        let triplet = batch
            .questions
            .iter()
            .find(|t| t.id == r.triplet_id)
            .ok_or_else(|| Error::Unknown {
                kind: "triplet",
                id: r.triplet_id.clone(),
            })?;
        if triplet.method == Method::Ptc
            && r.choice != Choice::Skip
            && r.toggle_count.unwrap_or(0) < 1
        {
            return Err(Error::Rejected(
                "plain comparisons need at least one toggle before answering".into(),
            ));
        }
        let before = p.completed_batches.len();
        let participant_id = r.participant_id.clone();
        self.commit(Event::Responded { response: r })?;
        let batch_complete = self.participants[&participant_id].completed_batches.len() > before;
        Ok(Ack {
            duplicate: false,
            stored: self.responses.len(),
            batch_complete,
        })
    }

    pub fn responses(&self) -> &[Response] {
        &self.responses
    }

    /// All responses joined with their triplets, in export order.
    pub fn table(&self, method: Option<Method>) -> ResponseTable {
        let records = self
            .responses
            .iter()
            .filter_map(|r| {
                let batch = self.batches.get(&r.batch_id)?;
                let question_index = batch.position(&r.triplet_id)?;
                let triplet = batch.questions[question_index].clone();
                if method.is_some_and(|m| m != triplet.method) {
                    return None;
                }
                Some(ResponseRecord {
                    batch_id: r.batch_id.clone(),
                    participant_id: r.participant_id.clone(),
                    question_index,
                    triplet,
                    choice: r.choice,
                    response_time_ms: r.response_time_ms,
                    toggle_count: r.toggle_count,
                    submitted_at: r.submitted_at,
                })
            })
            .collect();
        ResponseTable::new(records)
    }

    /// Rewrites the log from the in-memory state and atomically replaces it.
    pub fn compact(&mut self) -> Result<()> {
        let mut events = Vec::new();
        for p in self.participants.values() {
            events.push(Event::Enrolled {
                participant_id: p.id.clone(),
                method: p.method,
                token: p.token.clone(),
            });
        }
        // replay order matters for completion bookkeeping: keep assignment
        // and response interleaving per participant
        for p in self.participants.values() {
            let mut order: Vec<&String> = p.completed_batches.iter().collect();
            order.extend(p.active_batch.iter());
            for batch_id in order {
                events.push(Event::Assigned {
                    participant_id: p.id.clone(),
                    batch_id: batch_id.clone(),
                });
                for r in self
                    .responses
                    .iter()
                    .filter(|r| r.participant_id == p.id && &r.batch_id == batch_id)
                {
                    events.push(Event::Responded { response: r.clone() });
                }
            }
        }
        let path = self.dir.join(LOG_FILE);
        let tmp = self.dir.join(format!("{LOG_FILE}.tmp"));
        {
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            for ev in &events {
                let line = serde_json::to_string(ev).map_err(|e| Error::parse("event", e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(&tmp, e))?;
            }
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;

        // rebuild so response order matches the compacted log
        let batches: Vec<Batch> = std::mem::take(&mut self.batches).into_values().collect();
        let fresh = ResponseStore::open(&self.dir, batches, self.config.clone())?;
        *self = fresh;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{BatchPlan, StimulusRef};
    use crate::synthetic::synthetic_manifest;

    fn plan(method: Method) -> Vec<Batch> {
        let m = synthetic_manifest(5, 4, &[2.0, 1.5, 1.0, 0.6, 0.3]);
        BatchPlan::generate(&m, method, 24, 120, 1).unwrap().batches
    }

    fn tiny_batches() -> Vec<Batch> {
        let t1 = Triplet::new(Method::Ptc, "S", StimulusRef::Source, StimulusRef::coded("c", 1));
        let t2 = t1.mirror();
        vec![
            Batch {
                id: "b1".into(),
                method: Method::Ptc,
                questions: vec![t1.clone(), t2.clone()],
            },
            Batch {
                id: "b2".into(),
                method: Method::Ptc,
                questions: vec![t2, t1],
            },
        ]
    }

    fn answer(b: &Batch, p: &str, i: usize, choice: Choice) -> Response {
        Response {
            triplet_id: b.questions[i].id.clone(),
            batch_id: b.id.clone(),
            participant_id: p.into(),
            choice,
            response_time_ms: 1200,
            toggle_count: Some(1),
            submitted_at: 0,
        }
    }

    fn finish(store: &mut ResponseStore, b: &Batch, p: &str) {
        for i in 0..b.questions.len() {
            store.record_response(answer(b, p, i, Choice::Left)).unwrap();
        }
    }

    #[test]
    fn fresh_participant_gets_lowest_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResponseStore::open(dir.path(), plan(Method::Btc), StoreConfig::default()).unwrap();
        s.enroll("p1", Method::Btc, "t1").unwrap();
        let b = s.assign_batch("p1", Method::Btc).unwrap();
        assert_eq!(b.id, "btc-b01");
        // resuming returns the same batch
        assert_eq!(s.assign_batch("p1", Method::Btc).unwrap().id, "btc-b01");
        assert_eq!(s.coverage()["btc-b01"], 1);
    }

    #[test]
    fn limit_after_two_batches() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResponseStore::open(dir.path(), tiny_batches(), StoreConfig::default()).unwrap();
        s.enroll("p", Method::Ptc, "t").unwrap();
        let b = s.assign_batch("p", Method::Ptc).unwrap();
        finish(&mut s, &b, "p");
        let b2 = s.assign_batch("p", Method::Ptc).unwrap();
        assert_ne!(b.id, b2.id);
        finish(&mut s, &b2, "p");
        assert_eq!(s.participant("p").unwrap().completed_batches.len(), 2);
        let err = s.assign_batch("p", Method::Ptc).unwrap_err();
        assert!(matches!(err, Error::LimitReached(_)));
        assert!(err.to_string().contains("limit"));
    }

    #[test]
    fn under_covered_batch_is_preferred() {
        let dir = tempfile::tempdir().unwrap();
        let batches = plan(Method::Btc);
        let mut s = ResponseStore::open(dir.path(), batches.clone(), StoreConfig::default()).unwrap();
        let target = [24usize, 24, 24, 24, 24, 23];
        // a tiny fake population: assign directly until counts match
        let mut n = 0;
        for (bi, &want) in target.iter().enumerate() {
            for _ in 0..want {
                let id = format!("q{n}");
                n += 1;
                s.enroll(&id, Method::Btc, &id).unwrap();
                s.commit(Event::Assigned {
                    participant_id: id,
                    batch_id: batches[bi].id.clone(),
                })
                .unwrap();
            }
        }
        // oracle: scan coverage counts for the minimum
        let oracle = s
            .coverage()
            .iter()
            .min_by_key(|(id, c)| (**c, (*id).clone()))
            .map(|(id, _)| id.clone())
            .unwrap();
        s.enroll("new", Method::Btc, "new-token").unwrap();
        assert_eq!(s.assign_batch("new", Method::Btc).unwrap().id, oracle);
        assert_eq!(oracle, "btc-b06");
        s.enroll("late", Method::Btc, "late-token").unwrap();
        assert!(matches!(s.assign_batch("late", Method::Btc), Err(Error::StudyComplete)));
    }

    #[test]
    fn coverage_spread_never_grows_beyond_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResponseStore::open(dir.path(), plan(Method::Btc), StoreConfig::default()).unwrap();
        for i in 0..100 {
            let id = format!("p{i}");
            s.enroll(&id, Method::Btc, &id).unwrap();
            s.assign_batch(&id, Method::Btc).unwrap();
            let max = s.coverage().values().max().unwrap();
            let min = s.coverage().values().min().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn record_and_idempotency() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResponseStore::open(dir.path(), tiny_batches(), StoreConfig::default()).unwrap();
        s.enroll("p", Method::Ptc, "t").unwrap();
        let b = s.assign_batch("p", Method::Ptc).unwrap();
        let r = answer(&b, "p", 0, Choice::Left);
        let ack = s.record_response(r.clone()).unwrap();
        assert_eq!((ack.duplicate, ack.stored), (false, 1));
        let ack = s.record_response(r.clone()).unwrap();
        assert_eq!((ack.duplicate, ack.stored), (true, 1));
        let mut changed = r.clone();
        changed.choice = Choice::Right;
        assert!(matches!(s.record_response(changed), Err(Error::Duplicate(_))));

        let mut no_toggle = answer(&b, "p", 1, Choice::Left);
        no_toggle.toggle_count = Some(0);
        assert!(matches!(s.record_response(no_toggle.clone()), Err(Error::Rejected(_))));
        no_toggle.choice = Choice::Skip;
        let ack = s.record_response(no_toggle).unwrap();
        assert!(ack.batch_complete);

        let mut unknown = answer(&b, "p", 0, Choice::Left);
        unknown.participant_id = "ghost".into();
        assert!(s.record_response(unknown).is_err());
    }

    #[test]
    fn unknown_triplet_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResponseStore::open(dir.path(), tiny_batches(), StoreConfig::default()).unwrap();
        s.enroll("p", Method::Ptc, "t").unwrap();
        let b = s.assign_batch("p", Method::Ptc).unwrap();
        let mut r = answer(&b, "p", 0, Choice::Left);
        r.triplet_id = "ptc:S:c@9:SOURCE".into();
        assert!(matches!(s.record_response(r), Err(Error::Unknown { .. })));
    }

    #[test]
    fn crash_and_restart_keeps_acknowledged() {
        let dir = tempfile::tempdir().unwrap();
        let batches = plan(Method::Ptc);
        let mut acked = Vec::new();
        {
            let mut s = ResponseStore::open(dir.path(), batches.clone(), StoreConfig::default()).unwrap();
            s.enroll("p", Method::Ptc, "t").unwrap();
            let b = s.assign_batch("p", Method::Ptc).unwrap();
            for i in 0..17 {
                let r = answer(&b, "p", i, Choice::NotSure);
                s.record_response(r.clone()).unwrap();
                acked.push(r);
            }
            // dropped without compaction; simulate a torn write
        }
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"event\":\"responded\",\"respo").unwrap();
        drop(f);

        let mut s = ResponseStore::open(dir.path(), batches.clone(), StoreConfig::default()).unwrap();
        assert_eq!(s.responses(), &acked[..]);
        assert_eq!(s.participant("p").unwrap().active_batch.as_deref(), Some("ptc-b01"));
        // the store keeps working after recovery
        let b = s.assign_batch("p", Method::Ptc).unwrap();
        s.record_response(answer(&b, "p", 17, Choice::Left)).unwrap();
        s.compact().unwrap();
        let s2 = ResponseStore::open(dir.path(), batches, StoreConfig::default()).unwrap();
        assert_eq!(s2.responses().len(), 18);
        assert_eq!(s2.table(None), s.table(None));
    }

    #[test]
    fn export_is_pure_function_of_contents() {
        let dir = tempfile::tempdir().unwrap();
        let batches = tiny_batches();
        let mut s = ResponseStore::open(dir.path(), batches.clone(), StoreConfig::default()).unwrap();
        s.enroll("b", Method::Ptc, "tb").unwrap();
        s.enroll("a", Method::Ptc, "ta").unwrap();
        let bb = s.assign_batch("b", Method::Ptc).unwrap();
        let ba = s.assign_batch("a", Method::Ptc).unwrap();
        s.record_response(answer(&bb, "b", 1, Choice::Right)).unwrap();
        s.record_response(answer(&ba, "a", 0, Choice::Left)).unwrap();
        s.record_response(answer(&bb, "b", 0, Choice::Left)).unwrap();
        let text = s.table(None).to_tsv(None);
        let reopened = ResponseStore::open(dir.path(), batches, StoreConfig::default()).unwrap();
        assert_eq!(reopened.table(None).to_tsv(None), text);
        let t = s.table(None);
        let order: Vec<(&str, &str, usize)> = t
            .records
            .iter()
            .map(|r| (r.batch_id.as_str(), r.participant_id.as_str(), r.question_index))
            .collect();
        assert_eq!(order, vec![("b1", "b", 0), ("b1", "b", 1), ("b2", "a", 0)]);
        assert!(s.table(Some(Method::Btc)).is_empty());
    }
}
