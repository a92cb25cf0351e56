//! HTTP front of the response store.
//!
//! All bodies are JSON except the export, which returns the response file.
//! Participants authenticate with the bearer token returned by enrollment;
//! the export needs the admin token.
//!
//! | method | path                      | body / result                                  |
//! |--------|---------------------------|------------------------------------------------|
//! | POST   | `/api/enroll`             | `{"method":"btc","participant_id"?}` → `{participant_id, token}` |
//! | GET    | `/api/batch/next`         | → batch (`id`, `method`, `questions`)          |
//! | GET    | `/api/triplet/{id}`       | → image URLs and presentation parameters       |
//! | POST   | `/api/response`           | `{triplet_id, batch_id, choice, response_time_ms, toggle_count?}` → ack |
//! | GET    | `/api/admin/export?method=btc` | → response file                           |
//! | GET    | `/assets/{source}/{ref}`  | → image bytes                                  |

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Choice, Response, ResponseStore};
use crate::catalog::StudyManifest;
use crate::design::{Method, StimulusRef};
use crate::error::{Error, Result};

pub const BTC_ZOOM: f64 = 2.0;
pub const BTC_FLICKER_HZ: f64 = 10.0;

#[derive(Clone, Debug, Default)]
pub struct ApiRequest {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    pub query: Vec<(String, String)>,
    pub bearer: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: &str, url: &str) -> Self {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let query = query
            .split('&')
            .filter(|kv| !kv.is_empty())
            .map(|kv| {
                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        ApiRequest {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            query,
            ..Default::default()
        }
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.bearer = Some(token.to_string());
        self
    }

    pub fn json(mut self, body: &serde_json::Value) -> Self {
        self.body = body.to_string().into_bytes();
        self
    }

    fn query(&self, key: &str) -> Option<&str> {
        self.query
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        ApiResponse {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("response values serialize"),
        }
    }

    fn error(err: &Error) -> Self {
        let status = match err {
            Error::Parse { .. } => 400,
            Error::Unauthorized => 401,
            Error::Unknown { .. } => 404,
            Error::LimitReached(_) | Error::StudyComplete | Error::Duplicate(_) => 409,
            Error::Rejected(_) => 422,
            _ => 500,
        };
        let kind = match err {
            Error::LimitReached(_) => "limit_reached",
            Error::StudyComplete => "study_complete",
            Error::Duplicate(_) => "duplicate",
            Error::Rejected(_) => "rejected",
            Error::Unauthorized => "unauthorized",
            Error::Unknown { .. } => "not_found",
            Error::Parse { .. } => "bad_request",
            _ => "internal",
        };
        Self::json(status, &json!({ "error": kind, "message": err.to_string() }))
    }

    pub fn json_body(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

#[derive(Deserialize)]
struct EnrollBody {
    method: Method,
    #[serde(default)]
    participant_id: Option<String>,
}

#[derive(Deserialize)]
struct ResponseBody {
    triplet_id: String,
    batch_id: String,
    choice: Choice,
    response_time_ms: u64,
    #[serde(default)]
    toggle_count: Option<u32>,
}

#[derive(Serialize)]
struct TripletAssets {
    triplet_id: String,
    method: Method,
    left_url: String,
    pivot_url: String,
    right_url: String,
    /// Magnification applied equally to all three images.
    zoom_factor: f64,
    /// Alternation frequency between test images and pivot; 0 for plain
    /// comparisons, which toggle in place on demand.
    flicker_hz: f64,
    min_toggles: u32,
}

pub struct Service {
    store: Mutex<ResponseStore>,
    manifest: Option<StudyManifest>,
    admin_token: String,
}

fn random_token() -> String {
    let bytes: [u8; 16] = rand::thread_rng().gen();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Service {
    pub fn new(store: ResponseStore, manifest: Option<StudyManifest>, admin_token: Option<String>) -> Self {
        Service {
            store: Mutex::new(store),
            manifest,
            admin_token: admin_token.unwrap_or_else(random_token),
        }
    }

    pub fn admin_token(&self) -> &str {
        &self.admin_token
    }

    pub fn with_store<T>(&self, f: impl FnOnce(&mut ResponseStore) -> T) -> T {
        let mut guard = self.store.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        let result = match (req.method.as_str(), segments.as_slice()) {
            ("POST", ["api", "enroll"]) => self.enroll(req),
            ("GET", ["api", "batch", "next"]) => self.next_batch(req),
            ("GET", ["api", "triplet", id]) => self.triplet_assets(id),
            ("POST", ["api", "response"]) => self.post_response(req),
            ("GET", ["api", "admin", "export"]) => return self.export(req),
            ("GET", ["assets", source, reference]) => return self.asset(source, reference),
            _ => Err(Error::Unknown {
                kind: "endpoint",
                id: format!("{} {}", req.method, req.path),
            }),
        };
        match result {
            Ok(resp) => resp,
            Err(e) => ApiResponse::error(&e),
        }
    }

    fn participant(&self, req: &ApiRequest) -> Result<String> {
        let token = req.bearer.as_deref().ok_or(Error::Unauthorized)?;
        self.with_store(|s| s.participant_for_token(token).map(str::to_string))
            .ok_or(Error::Unauthorized)
    }

    fn enroll(&self, req: &ApiRequest) -> Result<ApiResponse> {
        let body: EnrollBody =
            serde_json::from_slice(&req.body).map_err(|e| Error::parse("enroll body", e))?;
        let token = random_token();
        let id = self.with_store(|s| -> Result<String> {
            let id = match body.participant_id {
                Some(id) => id,
                None => {
                    let mut n = 1;
                    while s.participant(&format!("P{n:04}")).is_some() {
                        n += 1;
                    }
                    format!("P{n:04}")
                }
            };
            s.enroll(&id, body.method, &token)?;
            Ok(id)
        })?;
        Ok(ApiResponse::json(
            201,
            &json!({ "participant_id": id, "token": token, "method": body.method }),
        ))
    }

    fn next_batch(&self, req: &ApiRequest) -> Result<ApiResponse> {
        let pid = self.participant(req)?;
        let batch = self.with_store(|s| {
            let method = s.participant(&pid).map(|p| p.method).ok_or(Error::Unauthorized)?;
            s.assign_batch(&pid, method)
        })?;
        Ok(ApiResponse::json(200, &batch))
    }

    fn asset_url(source: &str, side: &StimulusRef) -> String {
        format!("/assets/{source}/{side}")
    }

    fn triplet_assets(&self, id: &str) -> Result<ApiResponse> {
        let t = self
            .with_store(|s| s.triplet(id).cloned())
            .ok_or_else(|| Error::Unknown {
                kind: "triplet",
                id: id.to_string(),
            })?;
        let btc = t.method == Method::Btc;
        let assets = TripletAssets {
            triplet_id: t.id.clone(),
            method: t.method,
            left_url: Self::asset_url(&t.source_id, &t.left),
            pivot_url: Self::asset_url(&t.source_id, &StimulusRef::Source),
            right_url: Self::asset_url(&t.source_id, &t.right),
            zoom_factor: if btc { BTC_ZOOM } else { 1.0 },
            flicker_hz: if btc { BTC_FLICKER_HZ } else { 0.0 },
            min_toggles: if btc { 0 } else { 1 },
        };
        Ok(ApiResponse::json(200, &assets))
    }

    fn post_response(&self, req: &ApiRequest) -> Result<ApiResponse> {
        let pid = self.participant(req)?;
        let body: ResponseBody =
            serde_json::from_slice(&req.body).map_err(|e| Error::parse("response body", e))?;
        let response = Response {
            triplet_id: body.triplet_id,
            batch_id: body.batch_id,
            participant_id: pid,
            choice: body.choice,
            response_time_ms: body.response_time_ms,
            toggle_count: body.toggle_count,
            submitted_at: now_ms(),
        };
        let ack = self.with_store(|s| s.record_response(response))?;
        Ok(ApiResponse::json(200, &ack))
    }

    fn export(&self, req: &ApiRequest) -> ApiResponse {
        if req.bearer.as_deref() != Some(self.admin_token.as_str()) {
            return ApiResponse::error(&Error::Unauthorized);
        }
        let method = match req.query("method").map(str::parse::<Method>).transpose() {
            Ok(m) => m,
            Err(e) => return ApiResponse::error(&e),
        };
        let text = self.with_store(|s| s.table(method)).to_tsv(self.manifest.as_ref());
        ApiResponse {
            status: 200,
            content_type: "text/tab-separated-values; charset=utf-8",
            body: text.into_bytes(),
        }
    }

    fn asset(&self, source: &str, reference: &str) -> ApiResponse {
        let found = (|| -> Result<std::path::PathBuf> {
            let m = self.manifest.as_ref().ok_or(Error::Unknown {
                kind: "asset",
                id: reference.to_string(),
            })?;
            let missing = || Error::Unknown {
                kind: "asset",
                id: format!("{source}/{reference}"),
            };
            let side: StimulusRef = reference.parse()?;
            let rel = match &side {
                StimulusRef::Source => m.source(source).map(|s| s.file.clone()),
                StimulusRef::Coded { codec, level } => {
                    m.stimulus(source, codec, *level).map(|s| s.file.clone())
                }
            }
            .ok_or_else(missing)?;
            Ok(m.resolve(&rel))
        })();
        match found.and_then(|p| std::fs::read(&p).map_err(|e| Error::io(&p, e))) {
            Ok(bytes) => ApiResponse {
                status: 200,
                content_type: "application/octet-stream",
                body: bytes,
            },
            Err(Error::Io { .. }) => ApiResponse::error(&Error::Unknown {
                kind: "asset",
                id: format!("{source}/{reference}"),
            }),
            Err(e) => ApiResponse::error(&e),
        }
    }
}

/// A running HTTP server.
pub struct ServerHandle {
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
    pub port: u16,
}

impl ServerHandle {
    pub fn shutdown(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn to_api_request(req: &mut tiny_http::Request) -> ApiRequest {
    let mut api = ApiRequest::new(req.method().as_str(), req.url());
    api.bearer = req
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .and_then(|h| h.value.as_str().strip_prefix("Bearer ").map(str::to_string));
    let mut body = Vec::new();
    let _ = req.as_reader().read_to_end(&mut body);
    api.body = body;
    api
}

/// Binds `addr` (port 0 picks a free port) and serves on `threads` workers.
pub fn spawn(service: Arc<Service>, addr: &str, threads: usize) -> Result<ServerHandle> {
    let server = tiny_http::Server::http(addr).map_err(|e| Error::Io {
        path: addr.into(),
        source: std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, e.to_string()),
    })?;
    let port = server.server_addr().to_ip().map_or(0, |a| a.port());
    let server = Arc::new(server);
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let service = Arc::clone(&service);
            std::thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let api = to_api_request(&mut req);
                    let resp = service.handle(&api);
                    let header = tiny_http::Header::from_bytes("Content-Type", resp.content_type)
                        .expect("static header is valid");
                    let out = tiny_http::Response::from_data(resp.body)
                        .with_status_code(resp.status)
                        .with_header(header);
                    if let Err(e) = req.respond(out) {
                        log::warn!("failed to send response: {e}");
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        server,
        workers,
        port,
    })
}
