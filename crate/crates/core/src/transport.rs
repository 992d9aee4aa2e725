//! JSON-over-HTTP plumbing shared by the remote activation backend and the
//! chat-completion client.
//!
//! [`LiveTransport`] talks to the network with a bounded retry policy.
//! [`CassetteTransport`] wraps it to persist every response in a JSONL
//! cassette keyed by `sha256(method, path, canonical body)`, or serves
//! those responses back without touching the network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: Method,
    /// Path and query, relative to the transport's base URL.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

impl HttpRequest {
    pub fn get(path: impl Into<String>) -> Self {
        Self {
            method: Method::Get,
            path: path.into(),
            body: None,
        }
    }

    pub fn post(path: impl Into<String>, body: Value) -> Self {
        Self {
            method: Method::Post,
            path: path.into(),
            body: Some(body),
        }
    }

    /// Stable cassette key. `serde_json::Value` objects are key-sorted, so
    /// serializing the body canonicalizes field order.
    pub fn cassette_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.method {
            Method::Get => b"GET ".as_slice(),
            Method::Post => b"POST ".as_slice(),
        });
        h.update(self.path.as_bytes());
        h.update(b"\n");
        if let Some(body) = &self.body {
            h.update(body.to_string().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Value,
}

pub trait Transport: Send + Sync {
    /// Sends one request. Non-2xx statuses come back as `Ok`; callers use
    /// [`call_json`] to map them onto errors.
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse>;
}

/// Sends a request and maps the status: 2xx gives the body, 404 is
/// `NotFound`, other statuses are transport errors (5xx retryable).
pub fn call_json(t: &dyn Transport, req: &HttpRequest) -> Result<Value> {
    let resp = t.send(req)?;
    match resp.status {
        200..=299 => Ok(resp.body),
        404 => Err(Error::NotFound(format!("{} ({})", req.path, resp.body))),
        s => Err(Error::transport(
            format!("{} returned HTTP {s}: {}", req.path, resp.body),
            s >= 500,
        )),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

pub struct LiveTransport {
    base_url: String,
    bearer: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    requests: AtomicUsize,
}

impl LiveTransport {
    pub fn new(base_url: impl Into<String>, bearer: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            bearer,
            client,
            retry: RetryPolicy::default(),
            requests: AtomicUsize::new(0),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Number of HTTP requests actually sent, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn send_once(&self, req: &HttpRequest) -> Result<HttpResponse> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}{}", self.base_url, req.path);
        let mut builder = match req.method {
            Method::Get => self.client.get(&url),
            Method::Post => self.client.post(&url),
        };
        if let Some(token) = &self.bearer {
            builder = builder.bearer_auth(token);
        }
        if let Some(body) = &req.body {
            builder = builder.json(body);
        }
        let resp = builder
            .send()
            .map_err(|e| Error::transport(format!("{url}: {e}"), true))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| Error::transport(format!("{url}: reading body: {e}"), true))?;
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Ok(HttpResponse { status, body })
    }
}

impl Transport for LiveTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse> {
        let mut backoff = self.retry.initial_backoff;
        let attempts = self.retry.attempts.max(1);
        for attempt in 1..=attempts {
            let last = attempt == attempts;
            match self.send_once(req) {
                Ok(resp) if resp.status >= 500 && !last => {
                    tracing::warn!(path = %req.path, status = resp.status, attempt, "server error, retrying");
                }
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() && !last => {
                    tracing::warn!(path = %req.path, error = %e, attempt, "transport error, retrying");
                }
                Err(e) => return Err(e),
            }
            std::thread::sleep(backoff);
            backoff *= 2;
        }
        unreachable!("retry loop returns on the last attempt")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: HttpRequest,
    pub response: HttpResponse,
}

/// Append-only JSONL store of recorded request/response pairs.
pub struct Cassette {
    path: PathBuf,
    entries: Mutex<HashMap<String, HttpResponse>>,
}

impl Cassette {
    /// Opens (or creates on first write) the cassette at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CassetteEntry = serde_json::from_str(&line)?;
                entries.entry(entry.key).or_insert(entry.response);
            }
        }
        Ok(Self {
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, req: &HttpRequest) -> Option<HttpResponse> {
        self.entries.lock().unwrap().get(&req.cassette_key()).cloned()
    }

    /// Inserts unless the key is already present; returns the stored response
    /// (the earlier one if a concurrent writer got there first).
    pub fn insert(&self, req: &HttpRequest, resp: HttpResponse) -> Result<HttpResponse> {
        let key = req.cassette_key();
        let mut entries = self.entries.lock().unwrap();
        if let Some(existing) = entries.get(&key) {
            return Ok(existing.clone());
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let entry = CassetteEntry {
            key: key.clone(),
            request: req.clone(),
            response: resp.clone(),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&entry)?)?;
        file.flush()?;
        entries.insert(key, resp.clone());
        Ok(resp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CassetteMode {
    /// Serve from the cassette when possible, otherwise go live and record.
    Record,
    /// Serve only from the cassette; a miss is an error.
    Replay,
}

pub struct CassetteTransport {
    live: Option<Arc<dyn Transport>>,
    cassette: Cassette,
    mode: CassetteMode,
}

impl CassetteTransport {
    pub fn record(live: Arc<dyn Transport>, cassette: Cassette) -> Self {
        Self {
            live: Some(live),
            cassette,
            mode: CassetteMode::Record,
        }
    }

    pub fn replay(cassette: Cassette) -> Self {
        Self {
            live: None,
            cassette,
            mode: CassetteMode::Replay,
        }
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl Transport for CassetteTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse> {
        if let Some(hit) = self.cassette.lookup(req) {
            return Ok(hit);
        }
        match (&self.mode, &self.live) {
            (CassetteMode::Record, Some(live)) => {
                let resp = live.send(req)?;
                if resp.status >= 500 {
                    return Ok(resp);
                }
                self.cassette.insert(req, resp)
            }
            _ => Err(Error::transport(
                format!(
                    "replay miss for {:?} {} in {}",
                    req.method,
                    req.path,
                    self.cassette.path().display()
                ),
                false,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Fixed {
        status: u16,
        calls: AtomicUsize,
    }

    impl Transport for Fixed {
        fn send(&self, req: &HttpRequest) -> Result<HttpResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(HttpResponse {
                status: self.status,
                body: json!({"echo": req.path}),
            })
        }
    }

    #[test]
    fn key_ignores_object_field_order() {
        let a = HttpRequest::post("/x", serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap());
        let b = HttpRequest::post("/x", serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap());
        assert_eq!(a.cassette_key(), b.cassette_key());
        assert_ne!(a.cassette_key(), HttpRequest::post("/y", json!({"a":1,"b":[1,2]})).cassette_key());
        assert_ne!(HttpRequest::get("/x").cassette_key(), HttpRequest::post("/x", json!(null)).cassette_key());
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let live = Arc::new(Fixed { status: 200, calls: AtomicUsize::new(0) });
        let rec = CassetteTransport::record(live.clone(), Cassette::open(&path).unwrap());
        let req = HttpRequest::post("/a", json!({"text": "hi"}));
        let r1 = rec.send(&req).unwrap();
        let r2 = rec.send(&req).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(live.calls.load(Ordering::SeqCst), 1);

        let rep = CassetteTransport::replay(Cassette::open(&path).unwrap());
        assert_eq!(rep.send(&req).unwrap(), r1);
        assert!(rep.send(&HttpRequest::get("/other")).is_err());
    }

    #[test]
    fn server_errors_are_not_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let live = Arc::new(Fixed { status: 503, calls: AtomicUsize::new(0) });
        let rec = CassetteTransport::record(live, Cassette::open(dir.path().join("c.jsonl")).unwrap());
        let err = call_json(&rec, &HttpRequest::get("/a")).unwrap_err();
        assert!(err.is_retryable());
        assert!(rec.cassette().is_empty());
    }

    #[test]
    fn status_mapping() {
        let nf = Fixed { status: 404, calls: AtomicUsize::new(0) };
        assert!(matches!(call_json(&nf, &HttpRequest::get("/a")), Err(Error::NotFound(_))));
        let bad = Fixed { status: 400, calls: AtomicUsize::new(0) };
        let e = call_json(&bad, &HttpRequest::get("/a")).unwrap_err();
        assert!(matches!(e, Error::Transport { retryable: false, .. }));
    }
}
