use std::path::{Path, PathBuf};

use aic_core::pipeline::{files, parse_stages, run, RunConfig, RunReport, Stage};
use aic_core::scale::{parse_bands_tsv, ModelSet};
use aic_core::Error;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

/// The bundled run config with a lighter bootstrap and a private work dir.
fn bundled(work: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(data_dir().join("run.toml")).unwrap();
    cfg.work_dir = work.to_path_buf();
    cfg.bootstrap.replicates = 40;
    cfg
}

fn outputs(r: &RunReport) -> Vec<(Stage, Vec<(String, String)>)> {
    r.stages
        .iter()
        .map(|s| (s.stage, s.outputs.clone().into_iter().collect()))
        .collect()
}

#[test]
fn bundled_study_runs_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(&bundled(a.path()), &Stage::ALL).unwrap();
    let ran: Vec<Stage> = first.stages.iter().map(|s| s.stage).collect();
    assert_eq!(ran, Stage::ALL);

    let clean = &first.stage(Stage::Clean).unwrap().summary;
    let retained = clean["btc"]["retained"].as_u64().unwrap();
    assert!(retained < clean["btc"]["instances"].as_u64().unwrap(), "guessers should be dropped");
    let models = ModelSet::load(a.path().join(files::MODELS)).unwrap();
    assert_eq!(models.sources.len(), 5);
    assert!(models.sources.iter().all(|s| s.diagnostics.nll < s.diagnostics.null_nll));
    let bands = parse_bands_tsv(&std::fs::read_to_string(a.path().join(files::BANDS_TABLE)).unwrap()).unwrap();
    assert_eq!(bands.len(), 20);
    let bench = std::fs::read_to_string(a.path().join(files::BENCH_TEXT)).unwrap();
    assert!(bench.contains("vdp-like") && bench.contains("Meng-Rosenthal-Rubin"));

    let second = run(&bundled(b.path()), &Stage::ALL).unwrap();
    assert_eq!(outputs(&first), outputs(&second));
    assert_eq!(
        std::fs::read(a.path().join(files::BANDS)).unwrap(),
        std::fs::read(b.path().join(files::BANDS)).unwrap()
    );

    // re-running one stage over its recorded inputs is accepted and stable
    let again = run(&bundled(a.path()), &[Stage::Fit]).unwrap();
    assert_eq!(outputs(&again), outputs(&first));

    // a changed intermediate is refused by the next consumer
    let clean_file = a.path().join(files::CLEAN_RESPONSES);
    let mut text = std::fs::read_to_string(&clean_file).unwrap();
    text.push_str(&text.lines().nth(1).unwrap().replace("\tleft\t", "\tright\t"));
    std::fs::write(&clean_file, text).unwrap();
    let err = run(&bundled(a.path()), &[Stage::Fit]).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "fit"), "{err}");
    assert!(err.to_string().contains("changed since it was produced"), "{err}");
}

#[test]
fn external_responses_feed_the_clean_stage() {
    let work = tempfile::tempdir().unwrap();
    let mut cfg = bundled(work.path());
    cfg.fit.restarts = 2;
    run(&cfg, &parse_stages("design,simulate,export").unwrap()).unwrap();
    let external = work.path().join("collected.tsv");
    std::fs::copy(work.path().join(files::RESPONSES), &external).unwrap();
    std::fs::remove_file(work.path().join(files::RESPONSES)).unwrap();

    cfg.responses = Some(external.clone());
    let report = run(&cfg, &[Stage::Clean, Stage::Fit]).unwrap();
    let clean = report.stage(Stage::Clean).unwrap();
    assert_eq!(
        clean.inputs["responses"],
        aic_core::pipeline::sha256_file(&external).unwrap()
    );
    assert!(report.stage(Stage::Fit).is_some());
}

#[test]
fn stage_errors_name_the_stage() {
    let work = tempfile::tempdir().unwrap();
    let mut cfg = bundled(work.path());
    let err = run(&cfg, &[Stage::Fit]).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "fit"), "{err}");
    assert!(err.to_string().contains("run the producing stage first"));

    cfg.bench = None;
    run(&cfg, &[Stage::Design]).unwrap();
    let err = run(&cfg, &[Stage::Bench]).unwrap_err();
    assert!(err.to_string().contains("[bench]"), "{err}");

    let text = std::fs::read_to_string(data_dir().join("run.toml")).unwrap();
    let typo = text.replace("threshold = 0.7", "treshold = 0.7");
    assert!(RunConfig::from_toml_str(&typo, data_dir()).is_err());
    let bad = text.replace("threshold = 0.7", "threshold = 1.7");
    assert!(RunConfig::from_toml_str(&bad, data_dir()).is_err());
    assert!(parse_stages("design,serve").is_err());
}
