//! Study manifest: source images, codec recipes and the compressed stimuli.
//!
//! The manifest is a TOML file. Paths inside it are relative to the
//! manifest's own directory; [`StudyManifest::resolve`] turns them into
//! usable paths.
//!
//! ```toml
//! levels_per_codec = 5
//! responses_per_triplet_target = 24
//!
//! [[sources]]
//! id = "S1"
//! width = 840
//! height = 944
//! color_space = "Rec2100PQ"
//! file = "sources/S1.png"
//!
//! [[codecs]]
//! id = "jxl"
//! command = "cjxl {input} {output} -q {q}"
//! quality_min = 1
//! quality_max = 100
//! quality_direction = "higher-is-better"
//!
//! [[stimuli]]
//! source = "S1"
//! codec = "jxl"
//! level = 1
//! target_bpp = 2.0
//! actual_bpp = 1.98
//! quality = 92
//! file = "stimuli/S1_jxl_1.png"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS_PER_CODEC: u32 = 5;
pub const DEFAULT_RESPONSES_PER_TRIPLET: u32 = 24;

fn default_levels() -> u32 {
    DEFAULT_LEVELS_PER_CODEC
}

fn default_responses() -> u32 {
    DEFAULT_RESPONSES_PER_TRIPLET
}

fn default_width() -> u32 {
    840
}

fn default_height() -> u32 {
    944
}

fn default_color_space() -> String {
    "Rec2100PQ".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceImage {
    pub id: String,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_color_space")]
    pub color_space: String,
    pub file: PathBuf,
}

impl SourceImage {
    pub fn pixels(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QualityDirection {
    /// Larger quality setting gives larger files.
    #[default]
    HigherIsBetter,
    /// Larger setting means stronger compression (quantizer-style knobs).
    HigherIsWorse,
}

/// Affine rule applied to a nominal target bitrate before matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitrateRule {
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    /// Per-source offsets overriding `offset`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub offset_by_source: BTreeMap<String, f64>,
}

impl BitrateRule {
    pub fn apply(&self, source_id: &str, target_bpp: f64) -> f64 {
        let offset = self
            .offset_by_source
            .get(source_id)
            .copied()
            .unwrap_or(self.offset);
        self.scale * target_bpp + offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecRecipe {
    pub id: String,
    /// Shell command with `{q}`, `{input}` and `{output}` placeholders.
    pub command: String,
    pub quality_min: i64,
    pub quality_max: i64,
    #[serde(default)]
    pub quality_direction: QualityDirection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bitrate_rule: Option<BitrateRule>,
}

impl CodecRecipe {
    pub fn adjusted_target(&self, source_id: &str, target_bpp: f64) -> f64 {
        match &self.bitrate_rule {
            Some(rule) => rule.apply(source_id, target_bpp),
            None => target_bpp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub source: String,
    pub codec: String,
    /// 1 is the highest bitrate of the ladder.
    pub level: u32,
    pub target_bpp: f64,
    pub actual_bpp: f64,
    pub quality: i64,
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    #[serde(default = "default_levels")]
    pub levels_per_codec: u32,
    #[serde(default = "default_responses")]
    pub responses_per_triplet_target: u32,
    pub sources: Vec<SourceImage>,
    pub codecs: Vec<CodecRecipe>,
    #[serde(default)]
    pub stimuli: Vec<Stimulus>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Ids end up inside triplet ids and stimulus references, which use `:`
/// and `@` as separators.
fn check_id(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && id != "SOURCE";
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!(
            "{kind} id {id:?} must be non-empty, not \"SOURCE\", and use only [A-Za-z0-9_.-]"
        )))
    }
}

impl StudyManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::from_toml_str(&text)?;
        manifest.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(manifest)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let manifest: StudyManifest =
            toml::from_str(text).map_err(|e| Error::parse("manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("manifest", e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            relative.to_path_buf()
        } else {
            self.base_dir.join(relative)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels_per_codec == 0 {
            return Err(Error::Manifest("levels_per_codec must be positive".into()));
        }
        let mut source_ids = BTreeSet::new();
        for s in &self.sources {
            check_id("source", &s.id)?;
            if !source_ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate source id {:?}", s.id)));
            }
            if s.width == 0 || s.height == 0 {
                return Err(Error::Manifest(format!(
                    "source {:?} has zero width or height",
                    s.id
                )));
            }
        }
        let mut codec_ids = BTreeSet::new();
        for c in &self.codecs {
            check_id("codec", &c.id)?;
            if !codec_ids.insert(c.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate codec id {:?}", c.id)));
            }
            if c.quality_min >= c.quality_max {
                return Err(Error::Manifest(format!(
                    "codec {:?}: quality_min {} must be below quality_max {}",
                    c.id, c.quality_min, c.quality_max
                )));
            }
            if let Some(rule) = &c.bitrate_rule {
                if !(rule.scale > 0.0) {
                    return Err(Error::Manifest(format!(
                        "codec {:?}: bitrate_rule scale must be positive",
                        c.id
                    )));
                }
            }
        }

        let mut ladders: BTreeMap<(&str, &str), Vec<&Stimulus>> = BTreeMap::new();
        for st in &self.stimuli {
            if !source_ids.contains(st.source.as_str()) {
                return Err(Error::Manifest(format!(
                    "stimulus {}/{}/{} references unknown source {:?}",
                    st.source, st.codec, st.level, st.source
                )));
            }
            if !codec_ids.contains(st.codec.as_str()) {
                return Err(Error::Manifest(format!(
                    "stimulus {}/{}/{} references unknown codec {:?}",
                    st.source, st.codec, st.level, st.codec
                )));
            }
            if st.level == 0 || st.level > self.levels_per_codec {
                return Err(Error::Manifest(format!(
                    "stimulus {}/{}/{}: level outside 1..={}",
                    st.source, st.codec, st.level, self.levels_per_codec
                )));
            }
            if !(st.actual_bpp > 0.0) || !st.actual_bpp.is_finite() {
                return Err(Error::Manifest(format!(
                    "stimulus {}/{}/{}: actual_bpp must be positive",
                    st.source, st.codec, st.level
                )));
            }
            ladders
                .entry((st.source.as_str(), st.codec.as_str()))
                .or_default()
                .push(st);
        }

        // a manifest without stimuli describes a study not yet encoded
        if self.stimuli.is_empty() {
            return Ok(());
        }
        for s in &self.sources {
            for c in &self.codecs {
                let ladder = ladders.get_mut(&(s.id.as_str(), c.id.as_str()));
                let count = ladder.as_ref().map_or(0, |l| l.len());
                if count != self.levels_per_codec as usize {
                    return Err(Error::Manifest(format!(
                        "pair ({}, {}) has {} stimuli, expected {}",
                        s.id, c.id, count, self.levels_per_codec
                    )));
                }
                let ladder = ladder.expect("count checked above");
                ladder.sort_by_key(|st| st.level);
                for w in ladder.windows(2) {
                    if w[0].level == w[1].level {
                        return Err(Error::Manifest(format!(
                            "pair ({}, {}) has level {} twice",
                            s.id, c.id, w[0].level
                        )));
                    }
                    if w[1].actual_bpp >= w[0].actual_bpp {
                        return Err(Error::Manifest(format!(
                            "pair ({}, {}): actual_bpp must strictly decrease with level \
                             (level {} has {}, level {} has {})",
                            s.id, c.id, w[0].level, w[0].actual_bpp, w[1].level, w[1].actual_bpp
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn source(&self, id: &str) -> Option<&SourceImage> {
        self.sources.iter().find(|s| s.id == id)
    }

    pub fn codec(&self, id: &str) -> Option<&CodecRecipe> {
        self.codecs.iter().find(|c| c.id == id)
    }

    pub fn codec_index(&self, id: &str) -> Option<usize> {
        self.codecs.iter().position(|c| c.id == id)
    }

    pub fn stimulus(&self, source: &str, codec: &str, level: u32) -> Option<&Stimulus> {
        self.stimuli
            .iter()
            .find(|s| s.source == source && s.codec == codec && s.level == level)
    }

    /// Stimuli of one (source, codec) pair ordered by level.
    pub fn ladder(&self, source: &str, codec: &str) -> Vec<&Stimulus> {
        let mut ladder: Vec<&Stimulus> = self
            .stimuli
            .iter()
            .filter(|s| s.source == source && s.codec == codec)
            .collect();
        ladder.sort_by_key(|s| s.level);
        ladder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest_text(sources: usize, codecs: usize, levels: u32) -> String {
        let mut out = format!("levels_per_codec = {levels}\n");
        for s in 0..sources {
            out += &format!("[[sources]]\nid = \"S{s}\"\nfile = \"src/S{s}.png\"\n");
        }
        for c in 0..codecs {
            out += &format!(
                "[[codecs]]\nid = \"c{c}\"\ncommand = \"enc -q {{q}} {{input}} {{output}}\"\n\
                 quality_min = 1\nquality_max = 100\n"
            );
        }
        for s in 0..sources {
            for c in 0..codecs {
                for l in 1..=levels {
                    let bpp = 3.0 / f64::from(l);
                    out += &format!(
                        "[[stimuli]]\nsource = \"S{s}\"\ncodec = \"c{c}\"\nlevel = {l}\n\
                         target_bpp = {bpp}\nactual_bpp = {bpp}\nquality = {q}\n\
                         file = \"st/S{s}_c{c}_{l}.png\"\n",
                        q = 100 - l
                    );
                }
            }
        }
        out
    }

    #[test]
    fn full_study_has_100_stimuli() {
        let m = StudyManifest::from_toml_str(&manifest_text(5, 4, 5)).unwrap();
        assert_eq!(m.stimuli.len(), 100);
        assert_eq!(m.sources[0].width, 840);
        assert_eq!(m.sources[0].height, 944);
    }

    #[test]
    fn minimal_manifest() {
        let m = StudyManifest::from_toml_str(&manifest_text(1, 1, 5)).unwrap();
        assert_eq!(m.stimuli.len(), 5);
        assert_eq!(m.ladder("S0", "c0").len(), 5);
    }

    #[test]
    fn manifest_before_encoding_has_no_stimuli() {
        let text = manifest_text(2, 2, 5);
        let cut = text.find("[[stimuli]]").unwrap();
        let m = StudyManifest::from_toml_str(&text[..cut]).unwrap();
        assert!(m.stimuli.is_empty());
        assert!(crate::design::generate_all(&m, crate::design::Method::Btc, 0, 0).is_err());
    }

    #[test]
    fn short_ladder_names_the_pair() {
        let text = manifest_text(1, 1, 5).replace("levels_per_codec = 5", "levels_per_codec = 6");
        let err = StudyManifest::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("(S0, c0)"), "{err}");
        assert!(err.contains("has 5 stimuli"), "{err}");

        // drop one stimulus instead
        let text = manifest_text(1, 1, 5);
        let cut = text.rfind("[[stimuli]]").unwrap();
        let err = StudyManifest::from_toml_str(&text[..cut])
            .unwrap_err()
            .to_string();
        assert!(err.contains("(S0, c0) has 4 stimuli"), "{err}");
    }

    #[test]
    fn rejects_bad_invariants() {
        let text = manifest_text(1, 1, 2).replace("quality_min = 1", "quality_min = 100");
        assert!(StudyManifest::from_toml_str(&text).is_err());

        let text = manifest_text(1, 1, 2).replace("actual_bpp = 1.5", "actual_bpp = 3.5");
        let err = StudyManifest::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("strictly decrease"), "{err}");

        let text = manifest_text(1, 1, 2).replace("source = \"S0\"", "source = \"S9\"");
        assert!(StudyManifest::from_toml_str(&text).is_err());

        let mut text = manifest_text(1, 1, 2);
        text = text.replacen("id = \"S0\"", "id = \"S0\"\nwidth = 0", 1);
        assert!(StudyManifest::from_toml_str(&text).is_err());
    }

    #[test]
    fn bitrate_rule_uses_source_offset() {
        let rule = BitrateRule {
            scale: 2.0,
            offset: 0.1,
            offset_by_source: [("S2".to_string(), 0.3)].into_iter().collect(),
        };
        assert!((rule.apply("S1", 0.5) - 1.1).abs() < 1e-12);
        assert!((rule.apply("S2", 0.5) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_semantic_identity() {
        let m = StudyManifest::from_toml_str(&manifest_text(2, 3, 4)).unwrap();
        let again = StudyManifest::from_toml_str(&m.to_toml_string().unwrap()).unwrap();
        assert_eq!(m, again);
    }
}
