use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aic_core::bench::{self, GroupBy, SignificanceScope};
use aic_core::bitrate::{match_bitrate, CommandEncoder};
use aic_core::catalog::StudyManifest;
use aic_core::cleansing;
use aic_core::design::{Batch, BatchPlan, Method};
use aic_core::pipeline::{self, parse_stages, RunConfig, Stage};
use aic_core::scale::{
    bands_to_tsv, bootstrap_source, fit_source, parse_bands_tsv, BootstrapConfig, FitConfig, ModelSet, RdCurveBand,
    Resampling, SourceData,
};
use aic_core::store::service::{self, Service};
use aic_core::store::{ResponseStore, ResponseTable, StoreConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Triplet-comparison image quality studies: design, collection, cleansing,
/// JND scale reconstruction and metric benchmarking.
#[derive(Parser)]
#[command(name = "aic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stimulus catalog tools.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Triplet and batch design.
    #[command(subcommand)]
    Design(DesignCmd),
    /// Serve batches to observers over HTTP and record their responses.
    Serve(ServeArgs),
    /// Write every stored response to a response file.
    Export(ExportArgs),
    /// Score batch instances and drop unreliable ones.
    Clean(CleanArgs),
    /// Fit rate-distortion curves in JND units.
    Fit(FitArgs),
    /// Bootstrap confidence bands around fitted curves.
    Bootstrap(BootstrapArgs),
    /// Per-source curve, band and stimulus series for plotting.
    PlotData(PlotDataArgs),
    /// Correlate metric scores with reconstructed JND values.
    Bench(BenchArgs),
    /// Run pipeline stages from a run config.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Find the quality setting whose output best matches a target bitrate.
    Match(MatchArgs),
    /// Validate a manifest and list its contents.
    Check {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    codec: String,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target_bpp: f64,
    /// Relative deviation at which the search may stop early.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Where the encoder writes; a temporary file by default.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DesignCmd {
    /// Generate triplets and partition them into batches.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 24)]
        cross_count: usize,
        #[arg(long, default_value_t = 120)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Batch plan written by `design gen`; repeat for several methods.
    #[arg(long, required = true)]
    batches: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Token for the export endpoint; random when omitted.
    #[arg(long, env = "AIC_ADMIN_TOKEN")]
    admin_token: Option<String>,
    #[arg(long, default_value_t = aic_core::store::DEFAULT_MAX_BATCHES_PER_PARTICIPANT)]
    max_batches_per_participant: usize,
    #[arg(long, default_value_t = 24)]
    coverage_target: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Batch plans; defaults to the copies `serve` keeps in the data dir.
    #[arg(long)]
    batches: Vec<PathBuf>,
    /// Adds bitrate-aware columns to the summary printed on stderr.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = cleansing::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResamplingArg {
    Pooled,
    ByMethod,
    Identity,
}

impl From<ResamplingArg> for Resampling {
    fn from(r: ResamplingArg) -> Self {
        match r {
            ResamplingArg::Pooled => Resampling::Pooled,
            ResamplingArg::ByMethod => Resampling::ByMethod,
            ResamplingArg::Identity => Resampling::Identity,
        }
    }
}

#[derive(Args)]
struct BootstrapArgs {
    /// Retained responses the models were fitted on.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Model file written by `fit`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ResamplingArg::Pooled)]
    resampling: ResamplingArg,
    /// Tab-separated band file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotDataArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    bands: PathBuf,
    /// Receives one `<source>.tsv` per source.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Overall,
    Codec,
    Source,
}

impl From<ScopeArg> for SignificanceScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Overall => SignificanceScope::Overall,
            ScopeArg::Codec => SignificanceScope::Grouped(GroupBy::Codec),
            ScopeArg::Source => SignificanceScope::Grouped(GroupBy::Source),
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Model file from `fit`, or a band file from `bootstrap` (needs --manifest).
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of metric score files.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Pairwise significance tests; bare flag means `overall`.
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "overall")]
    significance: Option<ScopeArg>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset; all stages when omitted.
    #[arg(long)]
    stages: Option<String>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn catalog_match(a: &MatchArgs) -> Result<()> {
    let m = StudyManifest::load(&a.manifest)?;
    let recipe = m.codec(&a.codec).with_context(|| format!("unknown codec {}", a.codec))?;
    let source = m.source(&a.source).with_context(|| format!("unknown source {}", a.source))?;
    let output = a.output.clone().unwrap_or_else(|| {
        std::env::temp_dir().join(format!("aic-match-{}-{}-{}", std::process::id(), a.source, a.codec))
    });
    let mut enc = CommandEncoder::new(recipe, &m.resolve(&source.file), &output, source);
    let res = match_bitrate(recipe, &a.source, a.target_bpp, a.tolerance, &mut enc);
    if a.output.is_none() {
        let _ = std::fs::remove_file(&output);
    }
    print!("{}", to_json(&res?)?);
    Ok(())
}

fn catalog_check(path: &Path) -> Result<()> {
    let m = StudyManifest::load(path)?;
    println!(
        "{} sources, {} codecs, {} levels per codec, {} stimuli",
        m.sources.len(),
        m.codecs.len(),
        m.levels_per_codec,
        m.stimuli.len()
    );
    for s in &m.sources {
        for c in &m.codecs {
            let ladder: Vec<String> = m.ladder(&s.id, &c.id).iter().map(|x| format!("{:.3}", x.actual_bpp)).collect();
            println!("{}\t{}\t{}", s.id, c.id, ladder.join(" "));
        }
    }
    Ok(())
}

fn load_batches(paths: &[PathBuf]) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for p in paths {
        let plan = BatchPlan::load(p)?;
        out.extend(plan.batches);
    }
    Ok(out)
}

/// Plans `serve` keeps beside the event log so `export` needs only the
/// data directory.
fn stored_plans(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut plans: Vec<PathBuf> = std::fs::read_dir(data_dir)
        .with_context(|| format!("reading {}", data_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("plan-") && n.ends_with(".json"))
        })
        .collect();
    plans.sort();
    if plans.is_empty() {
        bail!("no batch plans in {}; pass --batches", data_dir.display());
    }
    Ok(plans)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let m = StudyManifest::load(&a.manifest)?;
    std::fs::create_dir_all(&a.data_dir).with_context(|| format!("creating {}", a.data_dir.display()))?;
    for p in &a.batches {
        let plan = BatchPlan::load(p)?;
        plan.write(a.data_dir.join(format!("plan-{}.json", plan.method)))?;
    }
    let batches = load_batches(&a.batches)?;
    let cfg = StoreConfig {
        max_batches_per_participant: a.max_batches_per_participant,
        coverage_target: a.coverage_target,
    };
    let store = ResponseStore::open(&a.data_dir, batches, cfg)?;
    let svc = Arc::new(Service::new(store, Some(m), a.admin_token.clone()));
    let handle = service::spawn(Arc::clone(&svc), &format!("{}:{}", a.bind, a.port), a.threads)?;
    eprintln!("listening on http://{}:{}", a.bind, handle.port);
    if a.admin_token.is_none() {
        eprintln!("admin token: {}", svc.admin_token());
    }
    handle.join();
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let plans = if a.batches.is_empty() {
        stored_plans(&a.data_dir)?
    } else {
        a.batches.clone()
    };
    let store = ResponseStore::open(&a.data_dir, load_batches(&plans)?, StoreConfig::default())?;
    let manifest = a.manifest.as_ref().map(StudyManifest::load).transpose()?;
    let table = store.table(None);
    table.write(&a.out, manifest.as_ref())?;
    eprint!("{}", render_summary(&table, manifest.as_ref()));
    Ok(())
}

fn render_summary(table: &ResponseTable, manifest: Option<&StudyManifest>) -> String {
    let mut out = String::new();
    for m in Method::ALL {
        let s = table.filter_method(m).summary(manifest);
        let c = s.counts;
        let _ = writeln!(
            out,
            "{m}: left {} / not sure {} / right {} / skip {} (total {})",
            c.left, c.not_sure, c.right, c.skip, c.total
        );
        for g in &s.by_gap {
            let _ = writeln!(
                out,
                "  gap {}: n {} correct {:.3} not sure {:.3} incorrect {:.3} mean time {:.2} s",
                g.gap, g.n, g.correct, g.not_sure, g.incorrect, g.mean_time_s
            );
        }
    }
    out
}

fn clean(a: &CleanArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("--threshold must lie in [0, 1]");
    }
    let m = StudyManifest::load(&a.manifest)?;
    let table = ResponseTable::load(&a.responses)?;
    let (cleansed, kept) = cleansing::cleanse(&table, &m, a.threshold);
    kept.write(&a.out, Some(&m))?;
    write_file(&a.report, &cleansed.audit_report(a.threshold))?;
    for method in Method::ALL {
        let total = cleansed.retained_count(method) + cleansed.excluded.iter().filter(|s| s.method == method).count();
        eprintln!("{method}: retained {} of {total} batch instances", cleansed.retained_count(method));
    }
    Ok(())
}

fn source_data(m: &StudyManifest, table: &ResponseTable) -> Result<Vec<SourceData>> {
    Ok(m.sources
        .iter()
        .map(|s| SourceData::from_records(m, &s.id, &table.records))
        .collect::<aic_core::Result<Vec<_>>>()?)
}

fn fit(a: &FitArgs) -> Result<()> {
    if a.restarts == 0 {
        bail!("--restarts must be at least 1");
    }
    let m = StudyManifest::load(&a.manifest)?;
    let table = ResponseTable::load(&a.responses)?;
    let cfg = FitConfig {
        restarts: a.restarts,
        seed: a.seed,
        ..FitConfig::default()
    };
    let mut sources = Vec::new();
    for d in source_data(&m, &table)? {
        let s = fit_source(&d, &cfg)?;
        eprintln!(
            "{}: nll {:.4} (null {:.4}), restart {}, {}",
            s.source_id,
            s.diagnostics.nll,
            s.diagnostics.null_nll,
            s.diagnostics.restart_index,
            if s.diagnostics.converged { "converged" } else { "NOT converged" }
        );
        sources.push(s);
    }
    ModelSet { config: cfg, sources }.write(&a.out)?;
    Ok(())
}

fn bootstrap(a: &BootstrapArgs) -> Result<()> {
    if a.n == 0 || a.grid < 2 {
        bail!("need --n >= 1 and --grid >= 2");
    }
    let m = StudyManifest::load(&a.manifest)?;
    let table = ResponseTable::load(&a.responses)?;
    let set = ModelSet::load(&a.models)?;
    let cfg = BootstrapConfig {
        replicates: a.n,
        grid_points: a.grid,
        resampling: a.resampling.into(),
        seed: a.seed,
        ..BootstrapConfig::default()
    };
    let mut bands = Vec::new();
    let mut results = Vec::new();
    for d in source_data(&m, &table)? {
        let point = set
            .source(&d.source_id)
            .with_context(|| format!("{} has no model for source {}", a.models.display(), d.source_id))?;
        let r = bootstrap_source(&d, point, &set.config, &cfg)?;
        if r.failed > 0 {
            eprintln!("{}: {} of {} replicates failed", r.source_id, r.failed, r.replicates);
        }
        bands.extend(r.bands.iter().cloned());
        results.push(r);
    }
    write_file(&a.out, &bands_to_tsv(&bands))?;
    if let Some(w) = pipeline::mean_width_at_one_jnd(&results) {
        eprintln!("mean band width at 1 JND: {w:.4}");
    }
    Ok(())
}

fn load_bands(path: &Path) -> Result<Vec<RdCurveBand>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_bands_tsv(&text).with_context(|| path.display().to_string())?)
}

/// Rows `series codec_id bitrate value lower upper`: `curve` rows carry the
/// band, `stimulus` rows the fitted JND at each stimulus bitrate.
fn plot_data(a: &PlotDataArgs) -> Result<()> {
    let set = ModelSet::load(&a.models)?;
    let bands = load_bands(&a.bands)?;
    let mut panels: BTreeMap<&str, String> = BTreeMap::new();
    for s in &set.sources {
        panels.insert(&s.source_id, "series\tcodec_id\tbitrate\tvalue\tlower\tupper\n".into());
    }
    for b in &bands {
        let Some(text) = panels.get_mut(b.source_id.as_str()) else {
            bail!("band for source {} has no model", b.source_id);
        };
        for i in 0..b.bitrate.len() {
            let _ = writeln!(
                text,
                "curve\t{}\t{}\t{}\t{}\t{}",
                b.codec_id, b.bitrate[i], b.estimate[i], b.lower[i], b.upper[i]
            );
        }
    }
    for s in &set.sources {
        let text = panels.get_mut(s.source_id.as_str()).expect("inserted above");
        for c in &s.codecs {
            for &(_, bpp) in &c.ladder {
                let _ = writeln!(text, "stimulus\t{}\t{bpp}\t{}\tNA\tNA", c.codec_id, c.params.rd_distortion(bpp));
            }
        }
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (source, text) in panels {
        write_file(&a.out_dir.join(format!("{source}.tsv")), &text)?;
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.models).with_context(|| format!("reading {}", a.models.display()))?;
    let jnd = if text.trim_start().starts_with('{') {
        bench::jnd_values(&ModelSet::load(&a.models)?)
    } else {
        let manifest = a
            .manifest
            .as_ref()
            .context("a band file needs --manifest for the stimulus bitrates")?;
        let m = StudyManifest::load(manifest)?;
        bench::jnd_from_bands(&parse_bands_tsv(&text)?, &m)?
    };
    let tables = bench::scores::load_dir(&a.scores)?;
    if tables.is_empty() {
        bail!("no score files in {}", a.scores.display());
    }
    let report = bench::run_bench(&tables, &jnd, a.significance.map(Into::into))?;
    write_file(&a.out, &report.render())?;
    if let Some(p) = &a.json {
        write_file(p, &to_json(&report)?)?;
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let stages = match &a.stages {
        Some(list) => parse_stages(list)?,
        None => Stage::ALL.to_vec(),
    };
    let stages: Vec<Stage> = if cfg.bench.is_none() && a.stages.is_none() {
        stages.into_iter().filter(|s| *s != Stage::Bench).collect()
    } else {
        stages
    };
    let report = pipeline::run(&cfg, &stages)?;
    for r in &report.stages {
        eprintln!("{:<10} ok  {}", r.stage, r.summary);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Catalog(CatalogCmd::Match(a)) => catalog_match(a),
        Command::Catalog(CatalogCmd::Check { manifest }) => catalog_check(manifest),
        Command::Design(DesignCmd::Gen {
            manifest,
            method,
            cross_count,
            batch_size,
            seed,
            out,
        }) => {
            let m = StudyManifest::load(manifest)?;
            let plan = BatchPlan::generate(&m, *method, *cross_count, *batch_size, *seed)?;
            plan.write(out)?;
            eprintln!(
                "{method}: {} triplets in {} batches",
                plan.triplets().count(),
                plan.batches.len()
            );
            Ok(())
        }
        Command::Serve(a) => serve(a),
        Command::Export(a) => export(a),
        Command::Clean(a) => clean(a),
        Command::Fit(a) => fit(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::PlotData(a) => plot_data(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Run(a) => run(a),
    }
}
