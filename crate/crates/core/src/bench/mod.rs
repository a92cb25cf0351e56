//! Correlation of metric scores with reconstructed JND values.

pub mod correlation;
pub mod scores;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{average_ranks, mrr_test, pearson, spearman, MrrResult};
pub use scores::{MetricScoreTable, Polarity, StimulusKey};

use crate::error::{Error, Result};
use crate::catalog::StudyManifest;
use crate::scale::{ModelSet, RdCurveBand};

/// JND of every fitted stimulus: the fitted curve of its (source, codec)
/// evaluated at its actual bitrate.
pub fn jnd_values(models: &ModelSet) -> BTreeMap<StimulusKey, f64> {
    let mut out = BTreeMap::new();
    for s in &models.sources {
        for c in &s.codecs {
            for &(level, bpp) in &c.ladder {
                out.insert((s.source_id.clone(), c.codec_id.clone(), level), c.params.rd_distortion(bpp));
            }
        }
    }
    out
}

/// JND values read off the band estimates at each stimulus bitrate of
/// `manifest`, for when only a band file is at hand.
pub fn jnd_from_bands(bands: &[RdCurveBand], manifest: &StudyManifest) -> Result<BTreeMap<StimulusKey, f64>> {
    let mut out = BTreeMap::new();
    for b in bands {
        for s in manifest.ladder(&b.source_id, &b.codec_id) {
            // grid endpoints are the ladder extremes; allow for rounding there
            let lo = b.bitrate.first().copied().unwrap_or(f64::NAN);
            let hi = b.bitrate.last().copied().unwrap_or(f64::NAN);
            let bpp = s.actual_bpp.clamp(lo.min(hi), hi.max(lo));
            if (bpp - s.actual_bpp).abs() > 1e-9 * s.actual_bpp.abs().max(1.0) {
                return Err(Error::Correlation(format!(
                    "{}/{} level {}: bitrate {} lies outside the band grid",
                    b.source_id, b.codec_id, s.level, s.actual_bpp
                )));
            }
            let d = b.estimate_at(bpp).ok_or_else(|| {
                Error::Correlation(format!("band {}/{} has an empty grid", b.source_id, b.codec_id))
            })?;
            out.insert((b.source_id.clone(), b.codec_id.clone(), s.level), d);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Codec,
    Source,
}

impl GroupBy {
    fn key<'a>(&self, k: &'a StimulusKey) -> &'a str {
        match self {
            GroupBy::Codec => &k.1,
            GroupBy::Source => &k.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub plcc: f64,
    pub srcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDetail {
    pub group: String,
    pub n: usize,
    /// `None` when the group was degenerate and left out of the mean.
    pub coefficients: Option<Coefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedCorrelation {
    pub group_by: GroupBy,
    /// Unweighted mean over non-degenerate groups.
    pub mean: Option<Coefficients>,
    pub groups: Vec<GroupDetail>,
}

/// Paired (score, JND) values over stimuli that have both.
fn paired<'a>(
    table: &'a MetricScoreTable,
    jnd: &'a BTreeMap<StimulusKey, f64>,
) -> impl Iterator<Item = (&'a StimulusKey, f64, f64)> + 'a {
    table
        .scores
        .iter()
        .filter_map(move |(k, v)| Some((k, (*v)?, *jnd.get(k)?)))
}

fn coefficients(x: &[f64], y: &[f64]) -> Result<Coefficients> {
    Ok(Coefficients {
        plcc: pearson(x, y)?,
        srcc: spearman(x, y)?,
    })
}

pub fn grouped_correlation(
    table: &MetricScoreTable,
    jnd: &BTreeMap<StimulusKey, f64>,
    group_by: GroupBy,
) -> GroupedCorrelation {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, s, j) in paired(table, jnd) {
        let g = groups.entry(group_by.key(k)).or_default();
        g.0.push(s);
        g.1.push(j);
    }
    let mut details = Vec::with_capacity(groups.len());
    let mut sums = (0.0, 0.0, 0usize);
    for (name, (x, y)) in groups {
        match coefficients(&x, &y) {
            Ok(c) => {
                sums.0 += c.plcc;
                sums.1 += c.srcc;
                sums.2 += 1;
                details.push(GroupDetail {
                    group: name.to_string(),
                    n: x.len(),
                    coefficients: Some(c),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("{}: group {name} excluded from the mean: {e}", table.metric);
                details.push(GroupDetail {
                    group: name.to_string(),
                    n: x.len(),
                    coefficients: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let mean = (sums.2 > 0).then(|| Coefficients {
        plcc: sums.0 / sums.2 as f64,
        srcc: sums.1 / sums.2 as f64,
    });
    GroupedCorrelation {
        group_by,
        mean,
        groups: details,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    pub polarity: Polarity,
    pub n: usize,
    pub overall: Coefficients,
    pub per_codec: GroupedCorrelation,
    pub per_source: GroupedCorrelation,
    /// Stimuli with a JND but no usable score.
    pub missing: Vec<String>,
}

pub fn evaluate_metric(table: &MetricScoreTable, jnd: &BTreeMap<StimulusKey, f64>) -> Result<CorrelationReport> {
    let (x, y): (Vec<f64>, Vec<f64>) = paired(table, jnd).map(|(_, s, j)| (s, j)).unzip();
    let missing: Vec<String> = jnd
        .keys()
        .filter(|k| !matches!(table.scores.get(*k), Some(Some(_))))
        .map(|(s, c, l)| format!("{s}/{c}@{l}"))
        .collect();
    if !missing.is_empty() {
        log::warn!("{}: {} stimuli without a score dropped", table.metric, missing.len());
    }
    let overall = coefficients(&x, &y).map_err(|e| Error::Correlation(format!("{}: {e}", table.metric)))?;
    Ok(CorrelationReport {
        metric: table.metric.clone(),
        polarity: table.polarity,
        n: x.len(),
        overall,
        per_codec: grouped_correlation(table, jnd, GroupBy::Codec),
        per_source: grouped_correlation(table, jnd, GroupBy::Source),
        missing,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceScope {
    /// One test over all stimuli scored by both metrics.
    #[default]
    Overall,
    /// One test within each group; the matrix holds the mean z of the groups.
    Grouped(GroupBy),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub metric_a: String,
    pub metric_b: String,
    pub n: usize,
    pub srcc_a: f64,
    pub srcc_b: f64,
    /// SRCC between the two metrics' scores.
    pub r_ab: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub scope: SignificanceScope,
    pub metrics: Vec<String>,
    /// Row-major; `None` on the diagonal and where the test was undefined.
    pub tests: Vec<Vec<Option<PairTest>>>,
}

/// Absolute SRCCs are compared, so the test ranks metrics by strength of
/// association regardless of polarity.
fn pair_test(
    a: &MetricScoreTable,
    b: &MetricScoreTable,
    jnd: &BTreeMap<StimulusKey, f64>,
    filter: impl Fn(&StimulusKey) -> bool,
) -> Result<PairTest> {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    let mut y = Vec::new();
    for (k, j) in jnd.iter().filter(|(k, _)| filter(k)) {
        if let (Some(Some(sa)), Some(Some(sb))) = (a.scores.get(k), b.scores.get(k)) {
            xa.push(*sa);
            xb.push(*sb);
            y.push(*j);
        }
    }
    let srcc_a = spearman(&xa, &y)?;
    let srcc_b = spearman(&xb, &y)?;
    let r_ab = spearman(&xa, &xb)?;
    // orient both metrics to correlate positively with JND
    let r_ab_oriented = r_ab * srcc_a.signum() * srcc_b.signum();
    let t = mrr_test(srcc_a.abs(), srcc_b.abs(), r_ab_oriented, y.len())?;
    Ok(PairTest {
        metric_a: a.metric.clone(),
        metric_b: b.metric.clone(),
        n: y.len(),
        srcc_a,
        srcc_b,
        r_ab,
        z: t.z,
        p: t.p,
    })
}

pub fn significance_matrix(
    tables: &[MetricScoreTable],
    jnd: &BTreeMap<StimulusKey, f64>,
    scope: SignificanceScope,
) -> SignificanceMatrix {
    let n = tables.len();
    let tests = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return None;
                    }
                    let (a, b) = (&tables[i], &tables[j]);
                    let res = match scope {
                        SignificanceScope::Overall => pair_test(a, b, jnd, |_| true),
                        SignificanceScope::Grouped(g) => grouped_pair_test(a, b, jnd, g),
                    };
                    res.map_err(|e| log::warn!("significance {} vs {}: {e}", a.metric, b.metric))
                        .ok()
                })
                .collect()
        })
        .collect();
    SignificanceMatrix {
        scope,
        metrics: tables.iter().map(|t| t.metric.clone()).collect(),
        tests,
    }
}

fn grouped_pair_test(
    a: &MetricScoreTable,
    b: &MetricScoreTable,
    jnd: &BTreeMap<StimulusKey, f64>,
    group_by: GroupBy,
) -> Result<PairTest> {
    let groups: std::collections::BTreeSet<&str> = jnd.keys().map(|k| group_by.key(k)).collect();
    let tests: Vec<PairTest> = groups
        .iter()
        .filter_map(|g| pair_test(a, b, jnd, |k| group_by.key(k) == *g).ok())
        .collect();
    if tests.is_empty() {
        return Err(Error::Correlation("no group admits the test".into()));
    }
    let m = tests.len() as f64;
    let mean = |f: fn(&PairTest) -> f64| tests.iter().map(f).sum::<f64>() / m;
    let z = mean(|t| t.z);
    Ok(PairTest {
        metric_a: a.metric.clone(),
        metric_b: b.metric.clone(),
        n: tests.iter().map(|t| t.n).sum(),
        srcc_a: mean(|t| t.srcc_a),
        srcc_b: mean(|t| t.srcc_b),
        r_ab: mean(|t| t.r_ab),
        z,
        p: crate::prob::two_sided_p(z),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metrics: Vec<CorrelationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceMatrix>,
}

pub fn run_bench(
    tables: &[MetricScoreTable],
    jnd: &BTreeMap<StimulusKey, f64>,
    significance: Option<SignificanceScope>,
) -> Result<BenchReport> {
    let metrics = tables
        .par_iter()
        .map(|t| evaluate_metric(t, jnd))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        metrics,
        significance: significance.map(|s| significance_matrix(tables, jnd, s)),
    })
}

fn cell(c: Option<Coefficients>) -> (String, String) {
    match c {
        Some(c) => (format!("{:+.3}", c.plcc), format!("{:+.3}", c.srcc)),
        None => ("n/a".into(), "n/a".into()),
    }
}

impl BenchReport {
    /// Plain-text tables: coefficients per metric, then pairwise z and p.
    pub fn render(&self) -> String {
        let width = self.metrics.iter().map(|m| m.metric.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7} {:>7}  {:>7} {:>7}  {:>7} {:>7}",
            "", "overall", "", "codec", "", "source", ""
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>7} {:>7}  {:>7} {:>7}  {:>7} {:>7}",
            "metric", "PLCC", "SRCC", "PLCC", "SRCC", "PLCC", "SRCC"
        );
        for m in &self.metrics {
            let (op, os) = cell(Some(m.overall));
            let (cp, cs) = cell(m.per_codec.mean);
            let (sp, ss) = cell(m.per_source.mean);
            let _ = writeln!(out, "{:<width$}  {op:>7} {os:>7}  {cp:>7} {cs:>7}  {sp:>7} {ss:>7}", m.metric);
        }
        if let Some(sig) = &self.significance {
            let _ = writeln!(out);
            let scope = match sig.scope {
                SignificanceScope::Overall => "all stimuli".to_string(),
                SignificanceScope::Grouped(GroupBy::Codec) => "mean over codecs".to_string(),
                SignificanceScope::Grouped(GroupBy::Source) => "mean over sources".to_string(),
            };
            let _ = writeln!(
                out,
                "Meng-Rosenthal-Rubin z of |SRCC| (row minus column), {scope}; Fisher transform applied to rank correlations as an approximation"
            );
            let w = sig.metrics.iter().map(|m| m.len()).max().unwrap_or(6).max(15);
            let _ = write!(out, "{:<w$}", "");
            for m in &sig.metrics {
                let _ = write!(out, "  {m:>w$}");
            }
            let _ = writeln!(out);
            for (i, row) in sig.tests.iter().enumerate() {
                let _ = write!(out, "{:<w$}", sig.metrics[i]);
                for t in row {
                    let text = match t {
                        Some(t) => format!("{:+.2} (p={:.3})", t.z, t.p),
                        None => "-".to_string(),
                    };
                    let _ = write!(out, "  {text:>w$}");
                }
                let _ = writeln!(out);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(name: &str, entries: &[(&str, &str, u32, f64)]) -> MetricScoreTable {
        MetricScoreTable {
            metric: name.into(),
            polarity: Polarity::HigherIsWorse,
            scores: entries
                .iter()
                .map(|(s, c, l, v)| ((s.to_string(), c.to_string(), *l), Some(*v)))
                .collect(),
        }
    }

    #[test]
    fn band_jnd_reads_estimate_at_stimulus_bitrate() {
        let m = crate::synthetic::synthetic_manifest(1, 1, &[2.0, 1.0, 0.5]);
        let band = RdCurveBand {
            source_id: "S1".into(),
            codec_id: "c1".into(),
            bitrate: vec![0.5, 1.5, 2.0],
            estimate: vec![3.0, 1.0, 0.4],
            lower: vec![2.0, 0.5, 0.1],
            upper: vec![4.0, 1.5, 0.8],
        };
        let jnd = jnd_from_bands(&[band.clone()], &m).unwrap();
        let key = |l: u32| ("S1".to_string(), "c1".to_string(), l);
        assert_eq!(jnd[&key(1)], 0.4);
        assert_eq!(jnd[&key(2)], 2.0);
        assert_eq!(jnd[&key(3)], 3.0);
        let short = RdCurveBand {
            bitrate: vec![0.8, 1.5, 2.0],
            ..band
        };
        assert!(jnd_from_bands(&[short], &m).is_err());
    }

    #[test]
    fn per_group_exceeds_overall_for_offset_groups() {
        let mut jnd = BTreeMap::new();
        let mut entries = Vec::new();
        for (g, offset) in [("c1", 0.0), ("c2", 5.0)] {
            for l in 1..=4u32 {
                let d = 0.5 * l as f64;
                jnd.insert(("S1".to_string(), g.to_string(), l), d);
                entries.push(("S1", g, l, d + offset));
            }
        }
        let t = table("m", &entries);
        let r = evaluate_metric(&t, &jnd).unwrap();
        let per = r.per_codec.mean.unwrap();
        assert!((per.plcc - 1.0).abs() < 1e-12);
        assert!(r.overall.plcc < 1.0);
        assert_eq!(r.per_codec.groups.len(), 2);
    }

    #[test]
    fn degenerate_group_is_excluded() {
        let mut jnd = BTreeMap::new();
        let mut entries = Vec::new();
        for l in 1..=3u32 {
            jnd.insert(("S1".to_string(), "c1".to_string(), l), l as f64);
            entries.push(("S1", "c1", l, l as f64));
            jnd.insert(("S1".to_string(), "c2".to_string(), l), l as f64);
            entries.push(("S1", "c2", l, 7.0));
        }
        let g = grouped_correlation(&table("m", &entries), &jnd, GroupBy::Codec);
        assert!((g.mean.unwrap().plcc - 1.0).abs() < 1e-12);
        assert!(g.groups[1].coefficients.is_none());
    }

    #[test]
    fn significance_is_antisymmetric() {
        let mut jnd = BTreeMap::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for l in 1..=12u32 {
            let d = l as f64 * 0.3;
            jnd.insert(("S1".to_string(), "c1".to_string(), l), d);
            a.push(("S1", "c1", l, d + 0.3 * ((l * 7 % 5) as f64)));
            b.push(("S1", "c1", l, -d + 0.9 * ((l * 3 % 4) as f64)));
        }
        let tables = [table("a", &a), table("b", &b)];
        let m = significance_matrix(&tables, &jnd, SignificanceScope::Overall);
        let ab = m.tests[0][1].as_ref().unwrap();
        let ba = m.tests[1][0].as_ref().unwrap();
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
        let report = BenchReport {
            metrics: tables.iter().map(|t| evaluate_metric(t, &jnd).unwrap()).collect(),
            significance: Some(m),
        };
        assert!(report.render().contains("Meng-Rosenthal-Rubin"));
    }
}
