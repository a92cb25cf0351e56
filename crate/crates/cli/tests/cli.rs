use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn aic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aic"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aic(args);
    assert!(
        out.status.success(),
        "aic {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap() + &String::from_utf8(out.stderr).unwrap()
}

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Bundled run config pointed at `work`, with a short bootstrap.
fn run_config(work: &Path) -> PathBuf {
    let text = std::fs::read_to_string(data().join("run.toml"))
        .unwrap()
        .replace("manifest = \"manifest.toml\"", &format!("manifest = {:?}", s(&data().join("manifest.toml"))))
        .replace("work_dir = \"../../target/aic-run\"", &format!("work_dir = {:?}", s(work)))
        .replace("scores = \"scores\"", &format!("scores = {:?}", s(&data().join("scores"))))
        .replace("replicates = 1000", "replicates = 20");
    let path = work.with_extension("toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("run");
    let manifest = data().join("manifest.toml");
    let cfg = run_config(&work);
    let log = ok(&["run", "--config", s(&cfg), "--stages", "design,simulate,export"]);
    assert!(log.contains("export"), "{log}");

    // the stand-alone export reads the same store as the pipeline stage
    let exported = tmp.path().join("responses.tsv");
    ok(&[
        "export",
        "--data-dir",
        s(&work.join("store")),
        "--batches",
        s(&work.join("plan-btc.json")),
        "--batches",
        s(&work.join("plan-ptc.json")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&exported),
    ]);
    assert_eq!(std::fs::read(&exported).unwrap(), std::fs::read(work.join("responses.tsv")).unwrap());

    let retained = tmp.path().join("retained.tsv");
    let audit = tmp.path().join("audit.tsv");
    let log = ok(&[
        "clean", "--responses", s(&exported), "--manifest", s(&manifest), "--threshold", "0.7", "--out", s(&retained),
        "--report", s(&audit),
    ]);
    assert!(log.contains("btc: retained"), "{log}");
    assert!(std::fs::read_to_string(&audit).unwrap().contains("excluded"));

    let models = tmp.path().join("models.json");
    ok(&["fit", "--responses", s(&retained), "--manifest", s(&manifest), "--out", s(&models), "--restarts", "2"]);
    let bands = tmp.path().join("bands.tsv");
    let log = ok(&[
        "bootstrap", "--responses", s(&retained), "--manifest", s(&manifest), "--models", s(&models), "--n", "20",
        "--grid", "50", "--seed", "3", "--out", s(&bands),
    ]);
    assert!(log.contains("mean band width at 1 JND"), "{log}");
    let band_text = std::fs::read_to_string(&bands).unwrap();
    assert!(band_text.starts_with("source_id\tcodec_id\tpoint\tbitrate\testimate\tlower\tupper\n"));
    assert_eq!(band_text.lines().count(), 1 + 20 * 50);

    let panels = tmp.path().join("panels");
    ok(&["plot-data", "--models", s(&models), "--bands", s(&bands), "--out-dir", s(&panels)]);
    let s1 = std::fs::read_to_string(panels.join("S1.tsv")).unwrap();
    assert_eq!(s1.lines().filter(|l| l.starts_with("curve\t")).count(), 4 * 50);
    assert_eq!(s1.lines().filter(|l| l.starts_with("stimulus\t")).count(), 4 * 5);
    assert_eq!(std::fs::read_dir(&panels).unwrap().count(), 5);

    let report = tmp.path().join("bench.txt");
    let json = tmp.path().join("bench.json");
    ok(&[
        "bench", "--models", s(&models), "--scores", s(&data().join("scores")), "--out", s(&report), "--json", s(&json),
        "--significance",
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("psnr-like") && text.contains("(p="), "{text}");
    let from_bands = tmp.path().join("bench-bands.txt");
    ok(&[
        "bench", "--models", s(&bands), "--manifest", s(&manifest), "--scores", s(&data().join("scores")), "--out",
        s(&from_bands), "--significance", "codec",
    ]);
    assert!(std::fs::read_to_string(&from_bands).unwrap().contains("mean over codecs"));
    let out = aic(&["bench", "--models", s(&bands), "--scores", s(&data().join("scores")), "--out", s(&from_bands)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
}

#[test]
fn design_and_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = data().join("manifest.toml");
    let listing = ok(&["catalog", "check", "--manifest", s(&manifest)]);
    assert!(listing.starts_with("5 sources, 4 codecs, 5 levels per codec, 100 stimuli"), "{listing}");

    let plan = tmp.path().join("plan.json");
    let log = ok(&[
        "design", "gen", "--manifest", s(&manifest), "--method", "ptc", "--cross-count", "24", "--batch-size", "120",
        "--seed", "7", "--out", s(&plan),
    ]);
    assert!(log.contains("ptc: 720 triplets in 6 batches"), "{log}");
    let again = tmp.path().join("again.json");
    ok(&["design", "gen", "--manifest", s(&manifest), "--method", "ptc", "--seed", "7", "--out", s(&again)]);
    assert_eq!(std::fs::read(&plan).unwrap(), std::fs::read(&again).unwrap());
    let out = aic(&["design", "gen", "--manifest", s(&manifest), "--method", "ptc", "--batch-size", "7", "--out", s(&again)]);
    assert!(!out.status.success());

    // an "encoder" writing q*100 bytes for a 100x100 source: 0.08 bpp per step
    let m = tmp.path().join("m.toml");
    std::fs::write(
        &m,
        r#"
[[sources]]
id = "S1"
width = 100
height = 100
file = "S1.png"

[[codecs]]
id = "zero"
command = "head -c $(({q} * 100)) /dev/zero > {output}"
quality_min = 1
quality_max = 100
"#,
    )
    .unwrap();
    let out = ok(&["catalog", "match", "--manifest", s(&m), "--codec", "zero", "--source", "S1", "--target-bpp", "2.0"]);
    assert!(out.contains("\"quality\": 25") && out.contains("\"unreachable\": false"), "{out}");
    let out = ok(&["catalog", "match", "--manifest", s(&m), "--codec", "zero", "--source", "S1", "--target-bpp", "20"]);
    assert!(out.contains("\"quality\": 100") && out.contains("\"unreachable\": true"), "{out}");
}

fn http(port: u16, method: &str, path: &str, token: Option<&str>, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\n{auth}Content-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).unwrap();
    let status = text[9..12].parse().unwrap();
    let body = text.split_once("\r\n\r\n").map(|x| x.1.to_string()).unwrap_or_default();
    (status, body)
}

#[test]
fn serve_then_export_from_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = data().join("manifest.toml");
    let plan = tmp.path().join("plan-btc.json");
    ok(&["design", "gen", "--manifest", s(&manifest), "--method", "btc", "--out", s(&plan)]);
    let store = tmp.path().join("store");
    let mut child = Command::new(env!("CARGO_BIN_EXE_aic"))
        .args([
            "serve", "--manifest", s(&manifest), "--batches", s(&plan), "--port", "0", "--data-dir", s(&store),
            "--admin-token", "adm",
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let port: u16 = line.trim().rsplit(':').next().unwrap().parse().unwrap();

    let (status, body) = http(port, "POST", "/api/enroll", None, r#"{"method":"btc","participant_id":"alice"}"#);
    assert_eq!(status, 201, "{body}");
    let token = body.split("\"token\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    let (status, batch) = http(port, "GET", "/api/batch/next", Some(&token), "");
    assert_eq!(status, 200);
    let batch_id = batch.split("\"id\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    let triplet = batch.split("\"id\":\"").nth(2).unwrap().split('"').next().unwrap().to_string();
    let answer = format!(
        r#"{{"triplet_id":"{triplet}","batch_id":"{batch_id}","choice":"not_sure","response_time_ms":1500}}"#
    );
    let (status, ack) = http(port, "POST", "/api/response", Some(&token), &answer);
    assert_eq!(status, 200, "{ack}");
    let (status, _) = http(port, "GET", "/api/admin/export", Some("adm"), "");
    assert_eq!(status, 200);
    child.kill().unwrap();
    child.wait().unwrap();

    let out = tmp.path().join("responses.tsv");
    ok(&["export", "--data-dir", s(&store), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(text.contains("alice") && text.contains("not_sure"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = aic(&["fit", "--responses", "/nonexistent.tsv", "--manifest", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    let out = aic(&["run", "--config", s(&data().join("run.toml")), "--stages", "design,nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    assert!(!aic(&["design", "gen"]).status.success());
}
