//! End-to-end analysis run driven by a TOML config, with a run report that
//! records seeds and the SHA-256 of every stage input and output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{self, GroupBy, SignificanceScope};
use crate::catalog::StudyManifest;
use crate::cleansing::{self, DEFAULT_THRESHOLD};
use crate::design::{BatchPlan, Method};
use crate::error::{Error, Result};
use crate::scale::{bands_to_tsv, bootstrap_source, fit_source, BootstrapConfig, BootstrapResult, FitConfig, ModelSet, RdCurveBand, Resampling, SourceData};
use crate::seed::derive_seed;
use crate::store::{ResponseStore, ResponseTable, StoreConfig};
use crate::synthetic::{GroundTruth, Observer, SimulationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Design,
    Simulate,
    Export,
    Clean,
    Fit,
    Bootstrap,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Design,
        Stage::Simulate,
        Stage::Export,
        Stage::Clean,
        Stage::Fit,
        Stage::Bootstrap,
        Stage::Bench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Design => "design",
            Stage::Simulate => "simulate",
            Stage::Export => "export",
            Stage::Clean => "clean",
            Stage::Fit => "fit",
            Stage::Bootstrap => "bootstrap",
            Stage::Bench => "bench",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::parse("stage", format!("unknown stage {s:?}")))
    }
}

/// Parses a comma-separated stage list; the result is in pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut stages = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<Vec<_>>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub cross_count: usize,
    pub batch_size: usize,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection {
            cross_count: 24,
            batch_size: 120,
            methods: all_methods(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    #[default]
    Spread,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub guesser_fraction: f64,
    #[serde(default)]
    pub truth: TruthKind,
    #[serde(default)]
    pub unsure_below: f64,
    #[serde(default = "default_max_batches")]
    pub max_batches_per_participant: usize,
    #[serde(default = "default_coverage")]
    pub coverage_target: usize,
}

fn default_max_batches() -> usize {
    crate::store::DEFAULT_MAX_BATCHES_PER_PARTICIPANT
}

fn default_coverage() -> usize {
    crate::catalog::DEFAULT_RESPONSES_PER_TRIPLET as usize
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            guesser_fraction: 0.0,
            truth: TruthKind::Spread,
            unsure_below: 0.0,
            max_batches_per_participant: default_max_batches(),
            coverage_target: default_coverage(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanSection {
    pub threshold: f64,
}

impl Default for CleanSection {
    fn default() -> Self {
        CleanSection {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub restarts: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection { restarts: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    #[serde(default)]
    pub resampling: Resampling,
}

fn default_grid() -> usize {
    100
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            replicates: 1000,
            grid_points: default_grid(),
            resampling: Resampling::Pooled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceSetting {
    #[default]
    None,
    Overall,
    Codec,
    Source,
}

impl SignificanceSetting {
    pub fn scope(self) -> Option<SignificanceScope> {
        match self {
            SignificanceSetting::None => None,
            SignificanceSetting::Overall => Some(SignificanceScope::Overall),
            SignificanceSetting::Codec => Some(SignificanceScope::Grouped(GroupBy::Codec)),
            SignificanceSetting::Source => Some(SignificanceScope::Grouped(GroupBy::Source)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Directory of metric score files, relative to the config file.
    pub scores: PathBuf,
    #[serde(default)]
    pub significance: SignificanceSetting,
}

/// Run configuration. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub root_seed: u64,
    pub manifest: PathBuf,
    /// Directory receiving every stage output.
    pub work_dir: PathBuf,
    /// Externally collected responses; when set, `clean` reads this file
    /// instead of the exported one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub clean: CleanSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("run config", e))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::parse("run config", m.to_string()));
        if !(0.0..=1.0).contains(&self.clean.threshold) {
            return bad("clean.threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.simulate.guesser_fraction) {
            return bad("simulate.guesser_fraction must lie in [0, 1]");
        }
        if self.fit.restarts == 0 {
            return bad("fit.restarts must be at least 1");
        }
        if self.bootstrap.replicates == 0 || self.bootstrap.grid_points < 2 {
            return bad("bootstrap needs at least 1 replicate and 2 grid points");
        }
        if self.design.methods.is_empty() {
            return bad("design.methods must not be empty");
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.work_dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.root_seed, stage.as_str())
    }
}

/// Output file names inside the work directory.
pub mod files {
    pub const REPORT: &str = "run-report.json";
    pub const STORE_DIR: &str = "store";
    pub const RESPONSES: &str = "responses.tsv";
    pub const CLEAN_RESPONSES: &str = "responses-clean.tsv";
    pub const CLEAN_AUDIT: &str = "cleansing-audit.tsv";
    pub const MODELS: &str = "models.json";
    pub const BANDS: &str = "bands.json";
    pub const BANDS_TABLE: &str = "bands.tsv";
    pub const BENCH_TEXT: &str = "bench.txt";
    pub const BENCH_JSON: &str = "bench.json";

    pub fn plan(method: crate::design::Method) -> String {
        format!("plan-{method}.json")
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes every file under `dir`, keyed by relative path.
fn hash_tree(dir: &Path, prefix: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let name = format!("{prefix}/{}", p.file_name().unwrap_or_default().to_string_lossy());
        if p.is_dir() {
            hash_tree(&p, &name, out)?;
        } else {
            out.insert(name, sha256_file(&p)?);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    /// Artifact name → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub root_seed: u64,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl RunReport {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    /// Latest recorded hash of an artifact across all stage outputs.
    fn produced(&self, artifact: &str) -> Option<&str> {
        self.stages
            .iter()
            .rev()
            .find_map(|r| r.outputs.get(artifact).map(String::as_str))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("run report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean width of the bootstrap bands where the curves cross 1 JND.
pub fn mean_width_at_one_jnd(results: &[BootstrapResult]) -> Option<f64> {
    let widths: Vec<f64> = results
        .iter()
        .flat_map(|r| r.bands.iter().filter_map(|b| b.width_at(1.0)))
        .collect();
    (!widths.is_empty()).then(|| widths.iter().sum::<f64>() / widths.len() as f64)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    config_sha: String,
    work: PathBuf,
    manifest: StudyManifest,
    report: RunReport,
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            message: other.to_string(),
        },
    }
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Hashes `name` in the work directory and, when a recorded producer
    /// exists, checks that it still matches.
    fn input(&self, stage: Stage, name: &str, inputs: &mut BTreeMap<String, String>) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Stage {
                stage: stage.to_string(),
                message: format!("missing input {}; run the producing stage first", p.display()),
            });
        }
        let h = sha256_file(&p)?;
        if let Some(expected) = self.report.produced(name) {
            if expected != h {
                return Err(Error::Stage {
                    stage: stage.to_string(),
                    message: format!("input {name} changed since it was produced (sha256 {h}, recorded {expected})"),
                });
            }
        }
        inputs.insert(name.to_string(), h);
        Ok(p)
    }

    fn external(&self, key: &str, path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<()> {
        inputs.insert(key.to_string(), sha256_file(path)?);
        Ok(())
    }

    fn record(&mut self, stage: Stage, inputs: BTreeMap<String, String>, outputs: &[&str], summary: serde_json::Value) -> Result<()> {
        let mut out = BTreeMap::new();
        for name in outputs {
            let p = self.path(name);
            if p.is_dir() {
                hash_tree(&p, name, &mut out)?;
            } else {
                out.insert(name.to_string(), sha256_file(&p)?);
            }
        }
        self.report.stages.retain(|r| r.stage != stage);
        self.report.stages.push(StageRecord {
            stage,
            seed: self.cfg.stage_seed(stage),
            inputs,
            outputs: out,
            summary,
        });
        self.report.stages.sort_by_key(|r| r.stage);
        Ok(())
    }

    fn design(&mut self) -> Result<()> {
        let seed = self.cfg.stage_seed(Stage::Design);
        let mut inputs = BTreeMap::new();
        self.external("manifest", &self.cfg.manifest_path(), &mut inputs)?;
        let mut outputs = Vec::new();
        let mut summary = serde_json::Map::new();
        for &m in &self.cfg.design.methods {
            let plan = BatchPlan::generate(&self.manifest, m, self.cfg.design.cross_count, self.cfg.design.batch_size, seed)?;
            let name = files::plan(m);
            plan.write(self.path(&name))?;
            summary.insert(
                m.to_string(),
                serde_json::json!({
                    "triplets": plan.triplets().count(),
                    "batches": plan.batches.len(),
                }),
            );
            outputs.push(name);
        }
        let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.record(Stage::Design, inputs, &refs, summary.into())
    }

    fn plans(&self, stage: Stage, inputs: &mut BTreeMap<String, String>) -> Result<Vec<BatchPlan>> {
        self.cfg
            .design
            .methods
            .iter()
            .map(|&m| {
                let p = self.input(stage, &files::plan(m), inputs)?;
                BatchPlan::load(p)
            })
            .collect()
    }

    fn open_store(&self, plans: &[BatchPlan]) -> Result<ResponseStore> {
        let batches = plans.iter().flat_map(|p| p.batches.iter().cloned()).collect();
        ResponseStore::open(
            self.path(files::STORE_DIR),
            batches,
            StoreConfig {
                max_batches_per_participant: self.cfg.simulate.max_batches_per_participant,
                coverage_target: self.cfg.simulate.coverage_target,
            },
        )
    }

    fn simulate(&mut self) -> Result<()> {
        let seed = self.cfg.stage_seed(Stage::Simulate);
        let mut inputs = BTreeMap::new();
        let plans = self.plans(Stage::Simulate, &mut inputs)?;
        let store_dir = self.path(files::STORE_DIR);
        if store_dir.exists() {
            std::fs::remove_dir_all(&store_dir).map_err(|e| Error::io(&store_dir, e))?;
        }
        let mut store = self.open_store(&plans)?;
        let truth = match self.cfg.simulate.truth {
            TruthKind::Spread => GroundTruth::spread(&self.manifest),
            TruthKind::Uniform => GroundTruth::uniform(
                &self.manifest,
                crate::scale::CodecParams {
                    alpha: 3.0,
                    beta: 1.2,
                    gamma1: 2.0,
                    gamma2: 0.3,
                },
            ),
        };
        let mut summary = serde_json::Map::new();
        for plan in &plans {
            let sim = SimulationConfig {
                seed,
                guesser_fraction: self.cfg.simulate.guesser_fraction,
                observer: Observer::Model {
                    k: 1.0,
                    unsure_below: self.cfg.simulate.unsure_below,
                },
            };
            let s = crate::synthetic::simulate_study(&mut store, &self.manifest, &truth, plan.method, &sim)?;
            summary.insert(plan.method.to_string(), serde_json::to_value(&s).unwrap_or_default());
        }
        store.compact()?;
        self.record(Stage::Simulate, inputs, &[files::STORE_DIR], summary.into())
    }

    fn export(&mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        let plans = self.plans(Stage::Export, &mut inputs)?;
        let store_dir = self.path(files::STORE_DIR);
        if !store_dir.exists() {
            return Err(Error::Stage {
                stage: "export".into(),
                message: format!("missing input {}; run the simulate stage or collect responses first", store_dir.display()),
            });
        }
        hash_tree(&store_dir, files::STORE_DIR, &mut inputs)?;
        if let Some(rec) = self.report.stage(Stage::Simulate) {
            for (k, v) in &rec.outputs {
                if inputs.get(k) != Some(v) {
                    return Err(Error::Stage {
                        stage: "export".into(),
                        message: format!("store file {k} changed since it was produced"),
                    });
                }
            }
        }
        let store = self.open_store(&plans)?;
        let table = store.table(None);
        table.write(self.path(files::RESPONSES), Some(&self.manifest))?;
        let summary = serde_json::to_value(table.summary(Some(&self.manifest))).unwrap_or_default();
        self.record(Stage::Export, inputs, &[files::RESPONSES], summary)
    }

    fn clean(&mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        let path = match &self.cfg.responses {
            Some(p) => {
                let p = self.cfg.resolve(p);
                self.external("responses", &p, &mut inputs)?;
                p
            }
            None => self.input(Stage::Clean, files::RESPONSES, &mut inputs)?,
        };
        self.external("manifest", &self.cfg.manifest_path(), &mut inputs)?;
        let table = ResponseTable::load(&path)?;
        let threshold = self.cfg.clean.threshold;
        let (cleansed, kept) = cleansing::cleanse(&table, &self.manifest, threshold);
        std::fs::write(self.path(files::CLEAN_AUDIT), cleansed.audit_report(threshold))
            .map_err(|e| Error::io(self.path(files::CLEAN_AUDIT), e))?;
        kept.write(self.path(files::CLEAN_RESPONSES), Some(&self.manifest))?;
        let mut summary = serde_json::Map::new();
        summary.insert("threshold".into(), threshold.into());
        for m in Method::ALL {
            let total = cleansed.retained_count(m) + cleansed.excluded.iter().filter(|s| s.method == m).count();
            summary.insert(
                m.to_string(),
                serde_json::json!({"retained": cleansed.retained_count(m), "instances": total}),
            );
        }
        self.record(Stage::Clean, inputs, &[files::CLEAN_AUDIT, files::CLEAN_RESPONSES], summary.into())
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            restarts: self.cfg.fit.restarts,
            seed: self.cfg.stage_seed(Stage::Fit),
            ..FitConfig::default()
        }
    }

    fn source_data(&self, table: &ResponseTable) -> Result<Vec<SourceData>> {
        self.manifest
            .sources
            .iter()
            .map(|s| SourceData::from_records(&self.manifest, &s.id, &table.records))
            .collect()
    }

    fn fit(&mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        let path = self.input(Stage::Fit, files::CLEAN_RESPONSES, &mut inputs)?;
        self.external("manifest", &self.cfg.manifest_path(), &mut inputs)?;
        let table = ResponseTable::load(path)?;
        let data = self.source_data(&table)?;
        let fc = self.fit_config();
        let sources = data.par_iter().map(|d| fit_source(d, &fc)).collect::<Result<Vec<_>>>()?;
        let set = ModelSet { config: fc, sources };
        set.write(self.path(files::MODELS))?;
        let summary: serde_json::Map<String, serde_json::Value> = set
            .sources
            .iter()
            .map(|s| {
                (
                    s.source_id.clone(),
                    serde_json::json!({
                        "nll": s.diagnostics.nll,
                        "converged": s.diagnostics.converged,
                        "restart": s.diagnostics.restart_index,
                    }),
                )
            })
            .collect();
        self.record(Stage::Fit, inputs, &[files::MODELS], summary.into())
    }

    fn bootstrap(&mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        let resp = self.input(Stage::Bootstrap, files::CLEAN_RESPONSES, &mut inputs)?;
        let models = self.input(Stage::Bootstrap, files::MODELS, &mut inputs)?;
        let table = ResponseTable::load(resp)?;
        let set = ModelSet::load(models)?;
        let data = self.source_data(&table)?;
        let bc = BootstrapConfig {
            replicates: self.cfg.bootstrap.replicates,
            grid_points: self.cfg.bootstrap.grid_points,
            resampling: self.cfg.bootstrap.resampling,
            seed: self.cfg.stage_seed(Stage::Bootstrap),
            ..BootstrapConfig::default()
        };
        let mut results = Vec::with_capacity(data.len());
        for d in &data {
            let point = set.source(&d.source_id).ok_or_else(|| Error::Unknown {
                kind: "model for source",
                id: d.source_id.clone(),
            })?;
            results.push(bootstrap_source(d, point, &set.config, &bc)?);
        }
        let text = serde_json::to_string_pretty(&results).map_err(|e| Error::parse("bands", e))?;
        std::fs::write(self.path(files::BANDS), text + "\n").map_err(|e| Error::io(self.path(files::BANDS), e))?;
        let bands: Vec<RdCurveBand> = results.iter().flat_map(|r| r.bands.iter().cloned()).collect();
        std::fs::write(self.path(files::BANDS_TABLE), bands_to_tsv(&bands))
            .map_err(|e| Error::io(self.path(files::BANDS_TABLE), e))?;
        let summary = serde_json::json!({
            "replicates": bc.replicates,
            "failed": results.iter().map(|r| r.failed).sum::<usize>(),
            "mean_width_at_1jnd": mean_width_at_one_jnd(&results),
        });
        self.record(Stage::Bootstrap, inputs, &[files::BANDS, files::BANDS_TABLE], summary)
    }

    fn bench(&mut self) -> Result<()> {
        let section = self.cfg.bench.clone().ok_or_else(|| Error::Stage {
            stage: "bench".into(),
            message: "config has no [bench] section".into(),
        })?;
        let mut inputs = BTreeMap::new();
        let models = self.input(Stage::Bench, files::MODELS, &mut inputs)?;
        let set = ModelSet::load(models)?;
        let dir = self.cfg.resolve(&section.scores);
        let tables = bench::scores::load_dir(&dir)?;
        for t in &tables {
            t.check_against(&self.manifest)?;
        }
        for t in &tables {
            inputs.insert(format!("scores/{}", t.metric), sha256_hex(t.to_text().as_bytes()));
        }
        let jnd = bench::jnd_values(&set);
        let report = bench::run_bench(&tables, &jnd, section.significance.scope())?;
        std::fs::write(self.path(files::BENCH_TEXT), report.render()).map_err(|e| Error::io(self.path(files::BENCH_TEXT), e))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::parse("bench report", e))?;
        std::fs::write(self.path(files::BENCH_JSON), json + "\n").map_err(|e| Error::io(self.path(files::BENCH_JSON), e))?;
        let summary: serde_json::Map<String, serde_json::Value> = report
            .metrics
            .iter()
            .map(|m| {
                (
                    m.metric.clone(),
                    serde_json::json!({"plcc": m.overall.plcc, "srcc": m.overall.srcc}),
                )
            })
            .collect();
        self.record(Stage::Bench, inputs, &[files::BENCH_TEXT, files::BENCH_JSON], summary.into())
    }
}

/// Runs `stages` in pipeline order and writes the updated run report.
/// A failing stage stops the run; the report keeps the stages that finished.
pub fn run(cfg: &RunConfig, stages: &[Stage]) -> Result<RunReport> {
    let work = cfg.work_dir();
    std::fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    let manifest = StudyManifest::load(cfg.manifest_path())?;
    let config_sha = sha256_hex(toml::to_string(cfg).map_err(|e| Error::parse("run config", e))?.as_bytes());
    let report_path = work.join(files::REPORT);
    let mut report = if report_path.exists() {
        RunReport::load(&report_path)?
    } else {
        RunReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed: cfg.root_seed,
            config_sha256: config_sha.clone(),
            stages: Vec::new(),
        }
    };
    if report.config_sha256 != config_sha || report.root_seed != cfg.root_seed {
        log::info!("config changed since the last run; starting a fresh report");
        report.stages.clear();
        report.root_seed = cfg.root_seed;
        report.config_sha256 = config_sha.clone();
    }
    let mut runner = Runner {
        cfg,
        config_sha,
        work,
        manifest,
        report,
    };
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    for stage in stages {
        log::info!("stage {stage}");
        let res = match stage {
            Stage::Design => runner.design(),
            Stage::Simulate => runner.simulate(),
            Stage::Export => runner.export(),
            Stage::Clean => runner.clean(),
            Stage::Fit => runner.fit(),
            Stage::Bootstrap => runner.bootstrap(),
            Stage::Bench => runner.bench(),
        };
        if let Err(e) = res {
            runner.report.write(&report_path)?;
            return Err(stage_err(stage)(e));
        }
    }
    debug_assert_eq!(runner.report.config_sha256, runner.config_sha);
    runner.report.write(&report_path)?;
    Ok(runner.report)
}
