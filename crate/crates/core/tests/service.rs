use std::path::Path;
use std::sync::Arc;

use aic_core::catalog::StudyManifest;
use aic_core::design::{Batch, BatchPlan, Method};
use aic_core::store::service::{spawn, Service};
use aic_core::store::{ResponseStore, ResponseTable, StoreConfig};
use aic_core::synthetic::synthetic_manifest;
use serde_json::{json, Value};

struct Client {
    base: String,
    token: Option<String>,
}

impl Client {
    fn call(&self, method: &str, path: &str, body: Option<Value>) -> (u16, String) {
        let mut req = ureq::request(method, &format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let res = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        match res {
            Ok(r) => (r.status(), r.into_string().unwrap()),
            Err(ureq::Error::Status(code, r)) => (code, r.into_string().unwrap()),
            Err(e) => panic!("transport error: {e}"),
        }
    }

    fn json(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let (s, text) = self.call(method, path, body);
        (s, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    fn enroll(base: &str, method: &str, id: Option<&str>) -> Client {
        let anon = Client {
            base: base.to_string(),
            token: None,
        };
        let mut body = json!({ "method": method });
        if let Some(id) = id {
            body["participant_id"] = json!(id);
        }
        let (s, v) = anon.json("POST", "/api/enroll", Some(body));
        assert_eq!(s, 201, "{v}");
        Client {
            base: base.to_string(),
            token: Some(v["token"].as_str().unwrap().to_string()),
        }
    }
}

fn plans(m: &StudyManifest) -> Vec<Batch> {
    let mut b = BatchPlan::generate(m, Method::Btc, 8, 16, 1).unwrap().batches;
    b.extend(BatchPlan::generate(m, Method::Ptc, 8, 16, 1).unwrap().batches);
    b
}

fn start(dir: &Path, m: &StudyManifest) -> (aic_core::store::service::ServerHandle, String) {
    let store = ResponseStore::open(dir, plans(m), StoreConfig::default()).unwrap();
    let svc = Arc::new(Service::new(store, Some(m.clone()), Some("admin-secret".into())));
    let h = spawn(svc, "127.0.0.1:0", 4).unwrap();
    let base = format!("http://127.0.0.1:{}", h.port);
    (h, base)
}

fn answer(batch: &Value) -> Vec<Value> {
    let id = batch["id"].as_str().unwrap();
    batch["questions"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let choice = ["left", "right", "not_sure"][i % 3];
            json!({
                "triplet_id": q["id"],
                "batch_id": id,
                "choice": choice,
                "response_time_ms": 1000 + i,
                "toggle_count": 1,
            })
        })
        .collect()
}

#[test]
fn concurrent_participants_over_http() {
    let m = synthetic_manifest(1, 2, &[2.0, 1.0, 0.5]);
    let dir = tempfile::tempdir().unwrap();
    let (server, base) = start(dir.path(), &m);

    let workers: Vec<_> = (0..6)
        .map(|i| {
            let base = base.clone();
            std::thread::spawn(move || {
                let method = if i % 2 == 0 { "btc" } else { "ptc" };
                let c = Client::enroll(&base, method, Some(&format!("w{i}")));
                let (s, batch) = c.json("GET", "/api/batch/next", None);
                assert_eq!(s, 200, "{batch}");
                assert_eq!(batch["method"], method);
                let mut acked = 0;
                for body in answer(&batch) {
                    let (s, ack) = c.json("POST", "/api/response", Some(body.clone()));
                    assert_eq!(s, 200, "{ack}");
                    assert_eq!(ack["duplicate"], false);
                    acked += 1;
                    // the client lost the ack and resends
                    if acked % 5 == 0 {
                        let (s, again) = c.json("POST", "/api/response", Some(body));
                        assert_eq!(s, 200);
                        assert_eq!(again["duplicate"], true);
                    }
                }
                acked
            })
        })
        .collect();
    let acked: usize = workers.into_iter().map(|w| w.join().unwrap()).sum();

    let anon = Client {
        base: base.clone(),
        token: None,
    };
    assert_eq!(anon.call("GET", "/api/admin/export", None).0, 401);
    let admin = Client {
        base: base.clone(),
        token: Some("admin-secret".into()),
    };
    let (s, text) = admin.call("GET", "/api/admin/export", None);
    assert_eq!(s, 200);
    let exported = ResponseTable::parse_tsv(&text).unwrap();
    assert_eq!(exported.len(), acked);
    let (_, btc_only) = admin.call("GET", "/api/admin/export?method=btc", None);
    assert_eq!(ResponseTable::parse_tsv(&btc_only).unwrap(), exported.filter_method(Method::Btc));
    server.shutdown();

    // every acknowledged response survives a restart
    let store = ResponseStore::open(dir.path(), plans(&m), StoreConfig::default()).unwrap();
    assert_eq!(store.table(None), exported);
}

#[test]
fn presentation_rules_and_limits() {
    let m = synthetic_manifest(1, 2, &[2.0, 1.0, 0.5]);
    let dir = tempfile::tempdir().unwrap();
    let (server, base) = start(dir.path(), &m);

    let ptc = Client::enroll(&base, "ptc", None);
    let (_, batch) = ptc.json("GET", "/api/batch/next", None);
    let q = batch["questions"][0]["id"].as_str().unwrap().to_string();
    let (s, assets) = ptc.json("GET", &format!("/api/triplet/{q}"), None);
    assert_eq!(s, 200);
    assert_eq!((assets["zoom_factor"].as_f64(), assets["flicker_hz"].as_f64()), (Some(1.0), Some(0.0)));
    assert_eq!(assets["min_toggles"], 1);
    let mut body = answer(&batch)[0].clone();
    body["toggle_count"] = json!(0);
    let (s, v) = ptc.json("POST", "/api/response", Some(body));
    assert_eq!((s, v["error"].as_str()), (422, Some("rejected")));

    let btc = Client::enroll(&base, "btc", None);
    let (_, batch) = btc.json("GET", "/api/batch/next", None);
    let q = batch["questions"][0]["id"].as_str().unwrap().to_string();
    let (_, assets) = btc.json("GET", &format!("/api/triplet/{q}"), None);
    assert_eq!((assets["zoom_factor"].as_f64(), assets["flicker_hz"].as_f64()), (Some(2.0), Some(10.0)));

    // two batches per participant by default
    for body in answer(&batch) {
        assert_eq!(btc.json("POST", "/api/response", Some(body)).0, 200);
    }
    let (_, second) = btc.json("GET", "/api/batch/next", None);
    assert_ne!(second["id"], batch["id"]);
    for body in answer(&second) {
        assert_eq!(btc.json("POST", "/api/response", Some(body)).0, 200);
    }
    let (s, v) = btc.json("GET", "/api/batch/next", None);
    assert_eq!((s, v["error"].as_str()), (409, Some("limit_reached")));

    let stranger = Client {
        base: base.clone(),
        token: Some("not-a-token".into()),
    };
    assert_eq!(stranger.call("GET", "/api/batch/next", None).0, 401);
    server.shutdown();
}

#[test]
fn assets_are_served_from_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = synthetic_manifest(1, 2, &[2.0, 1.0, 0.5]);
    m.base_dir = dir.path().to_path_buf();
    std::fs::create_dir_all(dir.path().join("sources")).unwrap();
    std::fs::create_dir_all(dir.path().join("stimuli/S1")).unwrap();
    std::fs::write(dir.path().join("sources/S1.png"), b"source-bytes").unwrap();
    std::fs::write(dir.path().join("stimuli/S1/c2_1.png"), b"coded-bytes").unwrap();
    let store_dir = dir.path().join("store");
    let (server, base) = start(&store_dir, &m);
    let c = Client { base, token: None };
    assert_eq!(c.call("GET", "/assets/S1/SOURCE", None), (200, "source-bytes".to_string()));
    assert_eq!(c.call("GET", "/assets/S1/c2@1", None), (200, "coded-bytes".to_string()));
    assert_eq!(c.call("GET", "/assets/S1/c1@2", None).0, 404);
    assert_eq!(c.call("GET", "/assets/S9/SOURCE", None).0, 404);
    server.shutdown();
}
