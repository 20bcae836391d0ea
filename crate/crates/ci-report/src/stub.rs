//! Minimal ingestion endpoint for exercising the upload contract in tests.

use std::collections::{HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use tiny_http::{Header, Response, Server};

use crate::report::{is_valid_email, TestReport};
use crate::upload::HASH_HEADER;

#[derive(Default)]
struct Shared {
    script: VecDeque<u16>,
    requests: usize,
    received: Vec<TestReport>,
    accepted: Vec<String>,
    seen: HashSet<String>,
}

/// Serves `POST /reports` on an ephemeral localhost port.
///
/// Scripted status codes are returned first, one per request; after that
/// each valid report is accepted once and later copies answer
/// `{"status":"duplicate"}`.
pub struct StubServer {
    server: Arc<Server>,
    shared: Arc<Mutex<Shared>>,
    thread: Option<JoinHandle<()>>,
    url: String,
}

fn json(code: u16, body: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body)
        .with_status_code(code)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

impl StubServer {
    pub fn start() -> Self {
        Self::scripted(Vec::new())
    }

    pub fn scripted(script: Vec<u16>) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub server"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let shared = Arc::new(Mutex::new(Shared {
            script: script.into(),
            ..Default::default()
        }));
        let (srv, sh) = (server.clone(), shared.clone());
        let thread = thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = Vec::new();
                let _ = req.as_reader().read_to_end(&mut body);
                let hash_header = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv(HASH_HEADER))
                    .map(|h| h.value.as_str().to_string());
                let resp = handle(&sh, req.method().as_str(), req.url(), &body, hash_header);
                let _ = req.respond(resp);
            }
        });
        StubServer {
            server,
            shared,
            thread: Some(thread),
            url,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> usize {
        self.shared.lock().unwrap().requests
    }

    /// Every well-formed report body received, in arrival order.
    pub fn received(&self) -> Vec<TestReport> {
        self.shared.lock().unwrap().received.clone()
    }

    /// Content hashes stored, once each.
    pub fn accepted(&self) -> Vec<String> {
        self.shared.lock().unwrap().accepted.clone()
    }
}

fn handle(
    shared: &Mutex<Shared>,
    method: &str,
    url: &str,
    body: &[u8],
    hash_header: Option<String>,
) -> Response<std::io::Cursor<Vec<u8>>> {
    let mut s = shared.lock().unwrap();
    s.requests += 1;
    if method != "POST" || url != "/reports" {
        return json(404, r#"{"error":"not found"}"#);
    }
    if let Some(code) = s.script.pop_front() {
        return json(code, &format!(r#"{{"error":"scripted {code}"}}"#));
    }
    let report: TestReport = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return json(400, &serde_json::json!({ "error": e.to_string() }).to_string()),
    };
    s.received.push(report.clone());
    let hash = report.content_hash();
    if hash_header.is_some_and(|h| h != hash) {
        return json(400, r#"{"error":"content hash mismatch"}"#);
    }
    if !is_valid_email(&report.submitter_email) {
        return json(400, r#"{"error":"unverified submitter"}"#);
    }
    if !s.seen.insert(hash.clone()) {
        return json(200, r#"{"status":"duplicate"}"#);
    }
    s.accepted.push(hash);
    json(200, r#"{"status":"accepted"}"#)
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
