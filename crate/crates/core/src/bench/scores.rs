//! Metric score files.
//!
//! ```text
//! # metric: PSNR-Y
//! # polarity: higher-is-better
//! source_id  codec_id  level  score
//! S1         c1        1      41.2
//! S1         c1        2      NA
//! ```
//!
//! Columns are separated by tabs or spaces; `NA` marks a missing score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::StudyManifest;
use crate::error::{Error, Result};

/// (source id, codec id, level).
pub type StimulusKey = (String, String, u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    HigherIsBetter,
    HigherIsWorse,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::HigherIsBetter => "higher-is-better",
            Polarity::HigherIsWorse => "higher-is-worse",
        })
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "higher-is-better" => Ok(Polarity::HigherIsBetter),
            "higher-is-worse" => Ok(Polarity::HigherIsWorse),
            other => Err(Error::parse("polarity", format!("unknown polarity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScoreTable {
    pub metric: String,
    pub polarity: Polarity,
    /// `None` is an explicitly missing score.
    pub scores: BTreeMap<StimulusKey, Option<f64>>,
}

impl MetricScoreTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut metric = None;
        let mut polarity = None;
        let mut header_seen = false;
        let mut scores = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse("score file", format!("line {}: {m}", no + 1));
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once(':') {
                    match key.trim() {
                        "metric" => metric = Some(value.trim().to_string()),
                        "polarity" => polarity = Some(value.parse::<Polarity>().map_err(|e| err(e.to_string()))?),
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if !header_seen {
                if cols != ["source_id", "codec_id", "level", "score"] {
                    return Err(err(format!("expected header `source_id codec_id level score`, got {line:?}")));
                }
                header_seen = true;
                continue;
            }
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, got {}", cols.len())));
            }
            let level: u32 = cols[2].parse().map_err(|_| err(format!("bad level {:?}", cols[2])))?;
            let score = if cols[3] == "NA" {
                None
            } else {
                let v: f64 = cols[3].parse().map_err(|_| err(format!("bad score {:?}", cols[3])))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite score {:?}", cols[3])));
                }
                Some(v)
            };
            let key = (cols[0].to_string(), cols[1].to_string(), level);
            if scores.insert(key, score).is_some() {
                return Err(err(format!("duplicate entry for {}/{}@{}", cols[0], cols[1], level)));
            }
        }
        let metric = metric.ok_or_else(|| Error::parse("score file", "missing `# metric:` header"))?;
        let polarity = polarity.ok_or_else(|| Error::parse("score file", "missing `# polarity:` header"))?;
        Ok(MetricScoreTable {
            metric,
            polarity,
            scores,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# metric: {}\n# polarity: {}\nsource_id\tcodec_id\tlevel\tscore\n",
            self.metric, self.polarity
        );
        for ((s, c, l), v) in &self.scores {
            match v {
                Some(v) => out.push_str(&format!("{s}\t{c}\t{l}\t{v}\n")),
                None => out.push_str(&format!("{s}\t{c}\t{l}\tNA\n")),
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Every manifest stimulus must be listed, with a score or `NA`, and
    /// nothing else may be.
    pub fn check_against(&self, manifest: &StudyManifest) -> Result<()> {
        for st in &manifest.stimuli {
            let key = (st.source.clone(), st.codec.clone(), st.level);
            if !self.scores.contains_key(&key) {
                return Err(Error::parse(
                    self.metric.clone(),
                    format!("no entry for stimulus {}/{}@{}", st.source, st.codec, st.level),
                ));
            }
        }
        for (s, c, l) in self.scores.keys() {
            if manifest.stimulus(s, c, *l).is_none() {
                return Err(Error::parse(self.metric.clone(), format!("unknown stimulus {s}/{c}@{l}")));
            }
        }
        Ok(())
    }
}

/// Score files (`*.tsv` or `*.txt`) of a directory, sorted by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<MetricScoreTable>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("tsv" | "txt")))
        .collect();
    paths.sort();
    let tables = paths.iter().map(MetricScoreTable::load).collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = tables.iter().map(|t| t.metric.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::parse(dir.display().to_string(), format!("metric {} appears twice", w[0])));
    }
    Ok(tables)
}
