//! A deterministic in-process inference server speaking both wire formats.
//!
//! Replies come from a scripted responder; every request is recorded so
//! tests can assert on what went over the wire. Empty prompts (model
//! warm-up) are answered but not counted as queries.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use crate::prompt::SEPARATOR;

#[derive(Debug, Clone, PartialEq)]
pub struct StubRequest {
    pub path: String,
    pub body: Value,
}

impl StubRequest {
    pub fn is_chat(&self) -> bool {
        self.path.starts_with("/v1/")
    }

    pub fn model(&self) -> &str {
        self.body.get("model").and_then(Value::as_str).unwrap_or("")
    }

    pub fn prompt(&self) -> &str {
        let p = if self.is_chat() {
            self.body.pointer("/messages/0/content")
        } else {
            self.body.get("prompt")
        };
        p.and_then(Value::as_str).unwrap_or("")
    }

    /// Sampling values as received: (temperature, top_k, top_p).
    pub fn sampling(&self) -> (Option<f64>, Option<u64>, Option<f64>) {
        let src = if self.is_chat() {
            &self.body
        } else {
            self.body.get("options").unwrap_or(&Value::Null)
        };
        (
            src.get("temperature").and_then(Value::as_f64),
            src.get("top_k").and_then(Value::as_u64),
            src.get("top_p").and_then(Value::as_f64),
        )
    }

    /// The annotated text of a rendered prompt: the quoted line following
    /// the last `Text:` after the separator.
    pub fn unit_text(&self) -> Option<&str> {
        let prompt = self.prompt();
        let tail = &prompt[prompt.rfind(SEPARATOR)?..];
        let after = &tail[tail.find("Text:\n")? + "Text:\n".len()..];
        let end = after.rfind("\"\nResponse:")?;
        after.get(1..end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Text(String),
    Status(u16),
}

/// Called with the request and how many times the same (model, prompt) was
/// seen before.
pub type Responder = Arc<dyn Fn(&StubRequest, usize) -> StubReply + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubModel {
    pub tag: String,
    pub digest: String,
}

impl StubModel {
    pub fn new(tag: impl Into<String>) -> Self {
        let tag = tag.into();
        let digest = crate::content_hash(tag.as_bytes());
        StubModel { tag, digest }
    }
}

#[derive(Clone)]
pub struct StubConfig {
    pub models: Vec<StubModel>,
    pub version: String,
    pub responder: Responder,
}

impl StubConfig {
    pub fn new(models: Vec<StubModel>, responder: Responder) -> Self {
        StubConfig {
            models,
            version: "0.0.0-stub".into(),
            responder,
        }
    }

    /// Answers every prompt with the same text.
    pub fn constant(models: Vec<StubModel>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(models, Arc::new(move |_, _| StubReply::Text(text.clone())))
    }
}

pub struct StubServer {
    url: String,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: StubConfig) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub server has no IP address"))?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let requests = Arc::clone(&requests);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || serve(server, config, requests, stop))
        };
        Ok(StubServer {
            url: format!("http://127.0.0.1:{port}"),
            requests,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().expect("stub log lock").clone()
    }

    /// Completion requests with a non-empty prompt.
    pub fn query_count(&self) -> usize {
        self.requests
            .lock()
            .expect("stub log lock")
            .iter()
            .filter(|r| is_completion(&r.path) && !r.prompt().is_empty())
            .count()
    }

    /// Blocks until the server is stopped from elsewhere (CLI use).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn is_completion(path: &str) -> bool {
    path == "/api/generate" || path == "/v1/chat/completions"
}

fn serve(
    server: tiny_http::Server,
    config: StubConfig,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    stop: Arc<AtomicBool>,
) {
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    while !stop.load(Ordering::SeqCst) {
        let mut req = match server.recv_timeout(Duration::from_millis(20)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(_) => break,
        };
        let path = req.url().split('?').next().unwrap_or("").to_owned();
        let mut raw = String::new();
        let _ = req.as_reader().read_to_string(&mut raw);
        let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
        let stub_req = StubRequest { path: path.clone(), body };
        requests.lock().expect("stub log lock").push(stub_req.clone());

        let (status, payload) = match path.as_str() {
            "/api/version" => (200, json!({"version": config.version})),
            "/api/tags" => (
                200,
                json!({"models": config.models.iter().map(|m| json!({
                    "name": m.tag, "model": m.tag, "digest": m.digest,
                })).collect::<Vec<_>>()}),
            ),
            "/v1/models" => (
                200,
                json!({"object": "list", "data": config.models.iter().map(|m| json!({
                    "id": m.tag, "object": "model", "owned_by": "stub",
                })).collect::<Vec<_>>()}),
            ),
            p if is_completion(p) => complete(&config, &stub_req, &mut seen),
            _ => (404, json!({"error": "not found"})),
        };
        let response = tiny_http::Response::from_string(payload.to_string())
            .with_status_code(status)
            .with_header(
                tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header"),
            );
        let _ = req.respond(response);
    }
}

fn complete(
    config: &StubConfig,
    req: &StubRequest,
    seen: &mut HashMap<(String, String), usize>,
) -> (u16, Value) {
    if !config.models.iter().any(|m| m.tag == req.model()) {
        return (404, json!({"error": format!("model '{}' not found", req.model())}));
    }
    let text = if req.prompt().is_empty() {
        String::new()
    } else {
        let count = seen
            .entry((req.model().to_owned(), req.prompt().to_owned()))
            .or_insert(0);
        let reply = (config.responder)(req, *count);
        *count += 1;
        match reply {
            StubReply::Text(t) => t,
            StubReply::Status(s) => return (s, json!({"error": "scripted failure"})),
        }
    };
    let payload = if req.is_chat() {
        json!({
            "object": "chat.completion",
            "model": req.model(),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        })
    } else {
        json!({"model": req.model(), "response": text, "done": true})
    };
    (200, payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_text_extraction() {
        let req = StubRequest {
            path: "/api/generate".into(),
            body: json!({"prompt": "A\nText:\n\"demo\"\n---\nText:\n\"the \"quoted\" unit\"\nResponse:"}),
        };
        assert_eq!(req.unit_text(), Some("the \"quoted\" unit"));
    }
}
