//! Response records and the tab-separated response file.
//!
//! The response file is the hand-off between collection, cleansing and
//! reconstruction. Each row carries the full triplet description, so later
//! stages need only this file and the manifest.
//!
//! ```text
//! # aic responses v1
//! # choice: side judged more distorted (left|not_sure|right|skip)
//! # toggle_count: number of in-place toggles (ptc); '-' when not recorded
//! batch_id  participant_id  question_index  triplet_id  method  source_id  kind  left  right  choice  response_time_ms  toggle_count  submitted_at
//! ...
//! # summary counts left=.. not_sure=.. right=.. skip=.. total=..
//! # summary gap=1 n=.. correct=.. not_sure=.. incorrect=.. mean_time_s=..
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::StudyManifest;
use crate::design::{Method, StimulusRef, Triplet, TripletKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    NotSure,
    Right,
    Skip,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Left => "left",
            Choice::NotSure => "not_sure",
            Choice::Right => "right",
            Choice::Skip => "skip",
        }
    }

    /// The same judgment expressed on a left/right swapped presentation.
    pub fn mirrored(self) -> Choice {
        match self {
            Choice::Left => Choice::Right,
            Choice::Right => Choice::Left,
            other => other,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Choice::Left),
            "not_sure" => Ok(Choice::NotSure),
            "right" => Ok(Choice::Right),
            "skip" => Ok(Choice::Skip),
            other => Err(Error::parse("choice", format!("{other:?}"))),
        }
    }
}

/// One observer judgment as submitted by the client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub triplet_id: String,
    pub batch_id: String,
    pub participant_id: String,
    pub choice: Choice,
    pub response_time_ms: u64,
    #[serde(default)]
    pub toggle_count: Option<u32>,
    /// Unix time in milliseconds.
    #[serde(default)]
    pub submitted_at: u64,
}

impl Response {
    pub fn key(&self) -> (String, String, String) {
        (
            self.participant_id.clone(),
            self.triplet_id.clone(),
            self.batch_id.clone(),
        )
    }

    /// Same judgment, ignoring the submission timestamp.
    pub fn same_judgment(&self, other: &Response) -> bool {
        self.triplet_id == other.triplet_id
            && self.batch_id == other.batch_id
            && self.participant_id == other.participant_id
            && self.choice == other.choice
            && self.response_time_ms == other.response_time_ms
            && self.toggle_count == other.toggle_count
    }
}

/// A response joined with its triplet and position in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseRecord {
    pub batch_id: String,
    pub participant_id: String,
    pub question_index: usize,
    pub triplet: Triplet,
    pub choice: Choice,
    pub response_time_ms: u64,
    pub toggle_count: Option<u32>,
    pub submitted_at: u64,
}

const COLUMNS: [&str; 13] = [
    "batch_id",
    "participant_id",
    "question_index",
    "triplet_id",
    "method",
    "source_id",
    "kind",
    "left",
    "right",
    "choice",
    "response_time_ms",
    "toggle_count",
    "submitted_at",
];

/// Which side a correct observer picks as more distorted, for same-codec
/// triplets: the lower-bitrate side. `None` for cross-codec triplets.
///
/// With a manifest the decision uses actual bitrates (the source counts as
/// infinite bitrate); without one it falls back to level order, which the
/// manifest invariants make equivalent.
pub fn expected_choice(triplet: &Triplet, manifest: Option<&StudyManifest>) -> Option<Choice> {
    if triplet.kind != TripletKind::SameCodec {
        return None;
    }
    let bitrate = |side: &StimulusRef| -> f64 {
        match side {
            StimulusRef::Source => f64::INFINITY,
            StimulusRef::Coded { codec, level } => match manifest {
                Some(m) => m
                    .stimulus(&triplet.source_id, codec, *level)
                    .map_or(-f64::from(*level), |s| s.actual_bpp),
                None => -f64::from(*level),
            },
        }
    };
    let (l, r) = (bitrate(&triplet.left), bitrate(&triplet.right));
    if l < r {
        Some(Choice::Left)
    } else if r < l {
        Some(Choice::Right)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceCounts {
    pub left: usize,
    pub not_sure: usize,
    pub right: usize,
    pub skip: usize,
    pub total: usize,
}

impl ChoiceCounts {
    pub fn add(&mut self, c: Choice) {
        match c {
            Choice::Left => self.left += 1,
            Choice::NotSure => self.not_sure += 1,
            Choice::Right => self.right += 1,
            Choice::Skip => self.skip += 1,
        }
        self.total += 1;
    }
}

/// Outcome ratios for one distortion-level difference, over same-codec
/// non-skip responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub gap: u32,
    pub n: usize,
    pub correct: f64,
    pub not_sure: f64,
    pub incorrect: f64,
    pub mean_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseSummary {
    pub counts: ChoiceCounts,
    pub by_gap: Vec<GapSummary>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResponseTable {
    pub records: Vec<ResponseRecord>,
}

impl ResponseTable {
    pub fn new(mut records: Vec<ResponseRecord>) -> Self {
        records.sort_by(|a, b| {
            (&a.batch_id, &a.participant_id, a.question_index)
                .cmp(&(&b.batch_id, &b.participant_id, b.question_index))
        });
        ResponseTable { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter_method(&self, method: Method) -> ResponseTable {
        ResponseTable {
            records: self
                .records
                .iter()
                .filter(|r| r.triplet.method == method)
                .cloned()
                .collect(),
        }
    }

    pub fn summary(&self, manifest: Option<&StudyManifest>) -> ResponseSummary {
        let mut counts = ChoiceCounts::default();
        // gap -> (n, correct, not_sure, incorrect, total_ms)
        let mut gaps: BTreeMap<u32, (usize, usize, usize, usize, u64)> = BTreeMap::new();
        for r in &self.records {
            counts.add(r.choice);
            if r.choice == Choice::Skip {
                continue;
            }
            let Some(expected) = expected_choice(&r.triplet, manifest) else {
                continue;
            };
            let e = gaps.entry(r.triplet.level_gap()).or_default();
            e.0 += 1;
            if r.choice == Choice::NotSure {
                e.2 += 1;
            } else if r.choice == expected {
                e.1 += 1;
            } else {
                e.3 += 1;
            }
            e.4 += r.response_time_ms;
        }
        let by_gap = gaps
            .into_iter()
            .map(|(gap, (n, c, ns, inc, ms))| {
                let n_f = n as f64;
                GapSummary {
                    gap,
                    n,
                    correct: c as f64 / n_f,
                    not_sure: ns as f64 / n_f,
                    incorrect: inc as f64 / n_f,
                    mean_time_s: ms as f64 / n_f / 1000.0,
                }
            })
            .collect();
        ResponseSummary { counts, by_gap }
    }

    /// Renders the file. Identical tables render to identical bytes.
    pub fn to_tsv(&self, manifest: Option<&StudyManifest>) -> String {
        let mut out = String::new();
        out.push_str("# aic responses v1\n");
        out.push_str("# choice: side judged more distorted (left|not_sure|right|skip)\n");
        out.push_str("# toggle_count: number of in-place toggles (ptc); '-' when not recorded\n");
        out.push_str(&COLUMNS.join("\t"));
        out.push('\n');
        for r in &self.records {
            let toggles = r.toggle_count.map_or_else(|| "-".to_string(), |t| t.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.batch_id,
                r.participant_id,
                r.question_index,
                r.triplet.id,
                r.triplet.method,
                r.triplet.source_id,
                r.triplet.kind.as_str(),
                r.triplet.left,
                r.triplet.right,
                r.choice,
                r.response_time_ms,
                toggles,
                r.submitted_at
            );
        }
        let s = self.summary(manifest);
        let c = s.counts;
        let _ = writeln!(
            out,
            "# summary counts left={} not_sure={} right={} skip={} total={}",
            c.left, c.not_sure, c.right, c.skip, c.total
        );
        for g in &s.by_gap {
            let _ = writeln!(
                out,
                "# summary gap={} n={} correct={:.3} not_sure={:.3} incorrect={:.3} mean_time_s={:.1}",
                g.gap, g.n, g.correct, g.not_sure, g.incorrect, g.mean_time_s
            );
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !header_seen {
                if fields != COLUMNS {
                    return Err(Error::parse(
                        "response file",
                        format!("line {}: unexpected header {line:?}", lineno + 1),
                    ));
                }
                header_seen = true;
                continue;
            }
            let err = |m: String| Error::parse("response file", format!("line {}: {m}", lineno + 1));
            if fields.len() != COLUMNS.len() {
                return Err(err(format!("expected {} fields, got {}", COLUMNS.len(), fields.len())));
            }
            let method: Method = fields[4].parse()?;
            let left: StimulusRef = fields[7].parse()?;
            let right: StimulusRef = fields[8].parse()?;
            let triplet = Triplet::new(method, fields[5], left, right);
            if triplet.id != fields[3] {
                return Err(err(format!("triplet id {} disagrees with its sides", fields[3])));
            }
            if triplet.kind.as_str() != fields[6] {
                return Err(err(format!("kind {} disagrees with its sides", fields[6])));
            }
            let num = |s: &str, what: &str| -> Result<u64> {
                s.parse::<u64>().map_err(|e| err(format!("{what}: {e}")))
            };
            records.push(ResponseRecord {
                batch_id: fields[0].to_string(),
                participant_id: fields[1].to_string(),
                question_index: num(fields[2], "question_index")? as usize,
                triplet,
                choice: fields[9].parse()?,
                response_time_ms: num(fields[10], "response_time_ms")?,
                toggle_count: match fields[11] {
                    "-" => None,
                    t => Some(num(t, "toggle_count")? as u32),
                },
                submitted_at: num(fields[12], "submitted_at")?,
            });
        }
        Ok(ResponseTable::new(records))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>, manifest: Option<&StudyManifest>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv(manifest)).map_err(|e| Error::io(path, e))
    }
}
