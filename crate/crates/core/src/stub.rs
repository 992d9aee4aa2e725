//! Minimal HTTP/1.1 server speaking the activation and chat-completion
//! protocols, backed by any [`ActivationBackend`] and [`LlmClient`].
//!
//! Used by tests and offline demos to exercise the real HTTP clients,
//! retries and cassettes without network access.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::agents::llm::LlmClient;
use crate::agents::openai::{WireRequest, WireResponse, CHAT_PATH};
use crate::backend::{ActivationBackend, ActivationRequest, ActivationResponse, ExemplarsResponse};
use crate::error::{Error, Result};
use crate::profile::FeatureRef;

const MAX_BODY: usize = 16 << 20;

#[derive(Clone, Default)]
pub struct StubServices {
    pub backend: Option<Arc<dyn ActivationBackend>>,
    pub llm: Option<Arc<dyn LlmClient>>,
    /// Required bearer token; requests without it get 401.
    pub bearer: Option<String>,
}

struct Shared {
    services: StubServices,
    requests: AtomicUsize,
    fail_next: AtomicUsize,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and serves in the background.
    pub fn start(services: StubServices, port: u16) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            services,
            requests: AtomicUsize::new(0),
            fail_next: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let s = s.clone();
                std::thread::spawn(move || {
                    if let Err(e) = handle(stream, &s) {
                        tracing::debug!(error = %e, "stub connection failed");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests received so far, including injected failures.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Answers the next `n` requests with 503.
    pub fn fail_next(&self, n: usize) {
        self.shared.fail_next.store(n, Ordering::SeqCst);
    }

    /// Blocks the calling thread until the process is killed.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Request {
    method: String,
    path: String,
    bearer: Option<String>,
    body: Vec<u8>,
}

fn read_request(stream: &TcpStream) -> Result<Option<Request>> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let (Some(method), Some(path)) = (parts.next(), parts.next()) else {
        return Err(Error::input(format!("bad request line {line:?}")));
    };
    let (method, path) = (method.to_string(), path.to_string());
    let mut length = 0usize;
    let mut bearer = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h.trim().is_empty() {
            break;
        }
        let Some((name, value)) = h.split_once(':') else { continue };
        let value = value.trim();
        match name.trim().to_ascii_lowercase().as_str() {
            "content-length" => {
                length = value
                    .parse()
                    .map_err(|_| Error::input("bad content-length"))?
            }
            "authorization" => bearer = value.strip_prefix("Bearer ").map(str::to_string),
            _ => {}
        }
    }
    if length > MAX_BODY {
        return Err(Error::input("request body too large"));
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    Ok(Some(Request {
        method,
        path,
        bearer,
        body,
    }))
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        405 => "Method Not Allowed",
        422 => "Unprocessable Entity",
        503 => "Service Unavailable",
        _ => "Internal Server Error",
    }
}

fn write_response(mut stream: &TcpStream, status: u16, body: &Value) -> Result<()> {
    let text = body.to_string();
    write!(
        stream,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        reason(status),
        text.len()
    )?;
    stream.flush()?;
    Ok(())
}

fn handle(stream: TcpStream, shared: &Shared) -> Result<()> {
    let Some(req) = read_request(&stream)? else {
        return Ok(());
    };
    if shared.stop.load(Ordering::SeqCst) {
        return Ok(());
    }
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let injected = shared
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    let (status, body) = if injected {
        (503, json!({"error": "injected failure"}))
    } else if shared.services.bearer.is_some() && req.bearer != shared.services.bearer {
        (401, json!({"error": "missing or wrong bearer token"}))
    } else {
        match route(&req, &shared.services) {
            Ok(v) => (200, v),
            Err(e) => (error_status(&e), json!({"error": e.to_string()})),
        }
    };
    write_response(&stream, status, &body)
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::NotFound(_) => 404,
        Error::Input(_) | Error::Json(_) => 400,
        Error::Protocol(_) => 422,
        _ => 500,
    }
}

/// Splits `/api/features/{model}/{sae}/{layer}/{index}/exemplars`; the model
/// id may itself contain slashes.
fn parse_exemplars_path(path: &str) -> Option<FeatureRef> {
    let rest = path.strip_prefix("/api/features/")?.strip_suffix("/exemplars")?;
    let mut it = rest.rsplitn(4, '/');
    let index = it.next()?.parse().ok()?;
    let layer = it.next()?.parse().ok()?;
    let sae = it.next()?;
    let model = it.next()?;
    Some(FeatureRef::new(model, sae, layer, index))
}

fn route(req: &Request, services: &StubServices) -> Result<Value> {
    let path = req.path.split('?').next().unwrap_or("");
    match (req.method.as_str(), path) {
        ("POST", crate::backend::ACTIVATION_PATH) => {
            let backend = services
                .backend
                .as_ref()
                .ok_or_else(|| Error::NotFound("no activation backend".into()))?;
            let r: ActivationRequest = serde_json::from_slice(&req.body)?;
            let f = FeatureRef::new(r.model_id, r.sae_id, r.layer, r.feature_index);
            let p = backend.measure(&f, &r.text)?;
            Ok(serde_json::to_value(ActivationResponse {
                tokens: p.tokens,
                activations: p.activations,
            })?)
        }
        ("GET", p) if p.starts_with("/api/features/") => {
            let backend = services
                .backend
                .as_ref()
                .ok_or_else(|| Error::NotFound("no activation backend".into()))?;
            let f = parse_exemplars_path(p).ok_or_else(|| Error::NotFound(p.to_string()))?;
            Ok(serde_json::to_value(ExemplarsResponse {
                exemplars: backend.dashboard(&f)?,
            })?)
        }
        ("POST", p) if p.ends_with(CHAT_PATH) => {
            let llm = services
                .llm
                .as_ref()
                .ok_or_else(|| Error::NotFound("no chat model".into()))?;
            let wire: WireRequest = serde_json::from_slice(&req.body)?;
            let resp = llm.complete(&wire.to_chat())?;
            Ok(serde_json::to_value(WireResponse::from_chat(&wire.model, &resp))?)
        }
        _ => Err(Error::NotFound(format!("{} {}", req.method, req.path))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exemplar_path_with_slashed_model() {
        let f = parse_exemplars_path("/api/features/google/gemma-2-2b/res-16k/3/42/exemplars").unwrap();
        assert_eq!(f, FeatureRef::new("google/gemma-2-2b", "res-16k", 3, 42));
        assert!(parse_exemplars_path("/api/features/x/1/exemplars").is_none());
    }
}
