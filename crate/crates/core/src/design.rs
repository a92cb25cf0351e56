//! Triplet generation and batch assignment.
//!
//! A triplet `(left, source, right)` always shows the pristine source as the
//! pivot. Every comparison is generated in both orders, and the two orders
//! (a mirror pair) always travel together into the same batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::StudyManifest;
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Boosted: zoomed, flickering against the source.
    Btc,
    /// Plain: side by side with in-place toggling.
    Ptc,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Btc, Method::Ptc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Btc => "btc",
            Method::Ptc => "ptc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "btc" => Ok(Method::Btc),
            "ptc" => Ok(Method::Ptc),
            other => Err(Error::parse("method", format!("expected btc or ptc, got {other:?}"))),
        }
    }
}

/// One side of a triplet: the untouched source or a coded stimulus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StimulusRef {
    Source,
    Coded { codec: String, level: u32 },
}

impl StimulusRef {
    pub fn coded(codec: impl Into<String>, level: u32) -> Self {
        StimulusRef::Coded {
            codec: codec.into(),
            level,
        }
    }

    /// Distortion level, with the source counted as level 0.
    pub fn level(&self) -> u32 {
        match self {
            StimulusRef::Source => 0,
            StimulusRef::Coded { level, .. } => *level,
        }
    }

    pub fn codec(&self) -> Option<&str> {
        match self {
            StimulusRef::Source => None,
            StimulusRef::Coded { codec, .. } => Some(codec),
        }
    }

    pub fn is_source(&self) -> bool {
        matches!(self, StimulusRef::Source)
    }
}

impl fmt::Display for StimulusRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StimulusRef::Source => f.write_str("SOURCE"),
            StimulusRef::Coded { codec, level } => write!(f, "{codec}@{level}"),
        }
    }
}

impl FromStr for StimulusRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "SOURCE" {
            return Ok(StimulusRef::Source);
        }
        let (codec, level) = s
            .rsplit_once('@')
            .ok_or_else(|| Error::parse("stimulus reference", format!("{s:?} lacks '@'")))?;
        let level = level
            .parse()
            .map_err(|e| Error::parse("stimulus reference", format!("{s:?}: {e}")))?;
        if codec.is_empty() || level == 0 {
            return Err(Error::parse("stimulus reference", format!("{s:?}")));
        }
        Ok(StimulusRef::coded(codec, level))
    }
}

impl Serialize for StimulusRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StimulusRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletKind {
    SameCodec,
    CrossCodec,
}

impl TripletKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TripletKind::SameCodec => "same_codec",
            TripletKind::CrossCodec => "cross_codec",
        }
    }
}

impl FromStr for TripletKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_codec" => Ok(TripletKind::SameCodec),
            "cross_codec" => Ok(TripletKind::CrossCodec),
            other => Err(Error::parse("triplet kind", other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub method: Method,
    pub source_id: String,
    pub left: StimulusRef,
    pub right: StimulusRef,
    pub kind: TripletKind,
}

pub fn triplet_id(method: Method, source_id: &str, left: &StimulusRef, right: &StimulusRef) -> String {
    format!("{method}:{source_id}:{left}:{right}")
}

impl Triplet {
    pub fn new(method: Method, source_id: &str, left: StimulusRef, right: StimulusRef) -> Self {
        let kind = match (left.codec(), right.codec()) {
            (Some(a), Some(b)) if a != b => TripletKind::CrossCodec,
            _ => TripletKind::SameCodec,
        };
        Triplet {
            id: triplet_id(method, source_id, &left, &right),
            method,
            source_id: source_id.to_string(),
            left,
            right,
            kind,
        }
    }

    pub fn mirror(&self) -> Triplet {
        Triplet::new(self.method, &self.source_id, self.right.clone(), self.left.clone())
    }

    pub fn mirror_id(&self) -> String {
        triplet_id(self.method, &self.source_id, &self.right, &self.left)
    }

    /// Absolute level difference between the two sides.
    pub fn level_gap(&self) -> u32 {
        self.left.level().abs_diff(self.right.level())
    }
}

/// Both orders of every unordered pair drawn from `{SOURCE, 1..=L}` of one
/// codec ladder.
pub fn generate_same_codec(
    manifest: &StudyManifest,
    source_id: &str,
    codec_id: &str,
    method: Method,
) -> Result<Vec<Triplet>> {
    let ladder = manifest.ladder(source_id, codec_id);
    if ladder.is_empty() {
        return Err(Error::Design(format!(
            "no ladder for source {source_id:?} and codec {codec_id:?}"
        )));
    }
    let mut sides = vec![StimulusRef::Source];
    sides.extend(ladder.iter().map(|s| StimulusRef::coded(codec_id, s.level)));
    let mut out = Vec::with_capacity(sides.len() * (sides.len() - 1));
    for i in 0..sides.len() {
        for j in (i + 1)..sides.len() {
            out.push(Triplet::new(method, source_id, sides[i].clone(), sides[j].clone()));
            out.push(Triplet::new(method, source_id, sides[j].clone(), sides[i].clone()));
        }
    }
    Ok(out)
}

/// `count` cross-codec triplets spread evenly over the codec pairs. Each
/// selected comparison contributes both orders; level pairs are drawn
/// uniformly without replacement per codec pair, never involving the source.
pub fn generate_cross_codec(
    manifest: &StudyManifest,
    source_id: &str,
    method: Method,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let codecs: Vec<&str> = manifest.codecs.iter().map(|c| c.id.as_str()).collect();
    if codecs.len() < 2 {
        return Err(Error::Design("cross-codec triplets need at least two codecs".into()));
    }
    let n_pairs = codecs.len() * (codecs.len() - 1) / 2;
    if count % (2 * n_pairs) != 0 {
        return Err(Error::Design(format!(
            "cross-codec count {count} cannot be balanced over {n_pairs} codec pairs in mirrored \
             orders (needs a multiple of {})",
            2 * n_pairs
        )));
    }
    let per_pair = count / (2 * n_pairs);
    let mut rng = rng_from(seed, &format!("cross:{method}:{source_id}"));
    let mut out = Vec::with_capacity(count);
    for a in 0..codecs.len() {
        for b in (a + 1)..codecs.len() {
            let la: Vec<u32> = manifest.ladder(source_id, codecs[a]).iter().map(|s| s.level).collect();
            let lb: Vec<u32> = manifest.ladder(source_id, codecs[b]).iter().map(|s| s.level).collect();
            let mut combos: Vec<(u32, u32)> =
                la.iter().flat_map(|&x| lb.iter().map(move |&y| (x, y))).collect();
            if combos.len() < per_pair {
                return Err(Error::Design(format!(
                    "codec pair ({}, {}) has only {} level combinations, {} requested",
                    codecs[a],
                    codecs[b],
                    combos.len(),
                    per_pair
                )));
            }
            let (picked, _) = combos.partial_shuffle(&mut rng, per_pair);
            let mut picked = picked.to_vec();
            picked.sort_unstable();
            for (x, y) in picked {
                let mut left = StimulusRef::coded(codecs[a], x);
                let mut right = StimulusRef::coded(codecs[b], y);
                if rng.gen_bool(0.5) {
                    std::mem::swap(&mut left, &mut right);
                }
                let t = Triplet::new(method, source_id, left, right);
                let m = t.mirror();
                out.push(t);
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// Same-codec triplets for every codec plus `cross_count` cross-codec
/// triplets, for one source.
pub fn generate_source(
    manifest: &StudyManifest,
    source_id: &str,
    method: Method,
    cross_count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for codec in &manifest.codecs {
        out.extend(generate_same_codec(manifest, source_id, &codec.id, method)?);
    }
    out.extend(generate_cross_codec(manifest, source_id, method, cross_count, seed)?);
    Ok(out)
}

pub fn generate_all(
    manifest: &StudyManifest,
    method: Method,
    cross_count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for s in &manifest.sources {
        out.extend(generate_source(manifest, &s.id, method, cross_count, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub id: String,
    pub method: Method,
    /// Questions in presentation order.
    pub questions: Vec<Triplet>,
}

impl Batch {
    pub fn position(&self, triplet_id: &str) -> Option<usize> {
        self.questions.iter().position(|t| t.id == triplet_id)
    }
}

/// Splits mirror-closed triplets into batches of `batch_size`.
///
/// Mirror pairs are grouped by (source, kind), shuffled within each group,
/// and dealt round-robin over the batches so every batch sees each group
/// as evenly as integrality allows. The question order inside each batch is
/// then shuffled so that no triplet sits next to its mirror.
pub fn assign_batches(triplets: &[Triplet], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if triplets.is_empty() {
        return Ok(Vec::new());
    }
    let method = triplets[0].method;
    if triplets.iter().any(|t| t.method != method) {
        return Err(Error::Design("all triplets of a batch plan must share one method".into()));
    }
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Design(format!("batch size {batch_size} must be positive and even")));
    }
    if triplets.len() % batch_size != 0 {
        return Err(Error::Design(format!(
            "{} triplets cannot be divided into batches of {batch_size}",
            triplets.len()
        )));
    }

    let by_id: BTreeMap<&str, &Triplet> = triplets.iter().map(|t| (t.id.as_str(), t)).collect();
    if by_id.len() != triplets.len() {
        return Err(Error::Design("duplicate triplet ids".into()));
    }
    let mut groups: BTreeMap<(String, TripletKind), Vec<(&Triplet, &Triplet)>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for t in triplets {
        if seen.contains(t.id.as_str()) {
            continue;
        }
        let mirror_id = t.mirror_id();
        let mirror = by_id
            .get(mirror_id.as_str())
            .ok_or_else(|| Error::Design(format!("triplet {} has no mirror", t.id)))?;
        seen.insert(t.id.as_str());
        seen.insert(mirror.id.as_str());
        groups
            .entry((t.source_id.clone(), t.kind))
            .or_default()
            .push((t, mirror));
    }

    let n_batches = triplets.len() / batch_size;
    let mut rng = rng_from(seed, &format!("batches:{method}"));
    let mut pairs_per_batch: Vec<Vec<(&Triplet, &Triplet)>> = vec![Vec::new(); n_batches];
    let mut slot = 0usize;
    for pairs in groups.values_mut() {
        pairs.shuffle(&mut rng);
        for &pair in pairs.iter() {
            pairs_per_batch[slot % n_batches].push(pair);
            slot += 1;
        }
    }

    let mut batches = Vec::with_capacity(n_batches);
    for (i, pairs) in pairs_per_batch.into_iter().enumerate() {
        let questions = order_without_adjacent_mirrors(&pairs, &mut rng);
        batches.push(Batch {
            id: format!("{method}-b{:02}", i + 1),
            method,
            questions,
        });
    }
    Ok(batches)
}

fn has_adjacent_mirror(order: &[Triplet]) -> bool {
    order.windows(2).any(|w| w[1].id == w[0].mirror_id())
}

fn order_without_adjacent_mirrors<R: Rng>(pairs: &[(&Triplet, &Triplet)], rng: &mut R) -> Vec<Triplet> {
    let mut order: Vec<Triplet> = pairs
        .iter()
        .flat_map(|(a, b)| [(*a).clone(), (*b).clone()])
        .collect();
    if pairs.len() < 2 {
        order.shuffle(rng);
        return order;
    }
    for _ in 0..1000 {
        order.shuffle(rng);
        if !has_adjacent_mirror(&order) {
            return order;
        }
    }
    // Constructive fallback: all first members, then all second members
    // rotated so the seam does not join a pair.
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(rng);
    let mut out: Vec<Triplet> = idx.iter().map(|&i| pairs[i].0.clone()).collect();
    let mut tail: Vec<usize> = idx.clone();
    tail.rotate_left(1);
    out.extend(tail.iter().map(|&i| pairs[i].1.clone()));
    debug_assert!(!has_adjacent_mirror(&out));
    out
}

/// Serialized batch plan, as written by `design gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub method: Method,
    pub seed: u64,
    pub cross_count: usize,
    pub batch_size: usize,
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn generate(
        manifest: &StudyManifest,
        method: Method,
        cross_count: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let triplets = generate_all(manifest, method, cross_count, seed)?;
        let batches = assign_batches(&triplets, batch_size, seed)?;
        Ok(BatchPlan {
            method,
            seed,
            cross_count,
            batch_size,
            batches,
        })
    }

    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.batches.iter().flat_map(|b| b.questions.iter())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("batch plan", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
