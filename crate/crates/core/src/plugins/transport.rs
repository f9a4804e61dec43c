//! Out-of-process plugin transports: newline-delimited JSON over a child
//! process's stdio, and HTTP POST with the same documents.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;

use super::protocol::{Handshake, PluginRequest, PluginResponse, SCHEMA_VERSION};
use super::PluginClient;
use crate::error::{RavError, Result};

type Pending = Arc<Mutex<HashMap<String, Sender<PluginResponse>>>>;

/// Child process speaking NDJSON on stdin/stdout. Replies may arrive in any
/// order and are routed by `request_id`.
pub struct SubprocessClient {
    id: String,
    handshake: Handshake,
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    pending: Pending,
    alive: Arc<AtomicBool>,
}

impl SubprocessClient {
    pub fn spawn(command: &str, args: &[String], handshake_timeout: Duration) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| RavError::Plugin(format!("cannot start {command}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let (hs_tx, hs_rx) = mpsc::channel::<String>();

        let reader_pending = Arc::clone(&pending);
        let reader_alive = Arc::clone(&alive);
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            if let Some(Ok(first)) = lines.next() {
                let _ = hs_tx.send(first);
            }
            drop(hs_tx);
            for line in lines {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                route_reply(&reader_pending, &line);
            }
            reader_alive.store(false, Ordering::SeqCst);
            reader_pending.lock().expect("pending lock").clear();
        });

        let first = match hs_rx.recv_timeout(handshake_timeout) {
            Ok(line) => line,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RavError::Plugin(format!("{command}: no handshake")));
            }
        };
        let handshake: Handshake = serde_json::from_str(&first)
            .map_err(|e| RavError::Plugin(format!("{command}: malformed handshake: {e}")))?;
        let id = handshake.id.clone().unwrap_or_else(|| command.to_string());
        Ok(SubprocessClient {
            id,
            handshake,
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            alive,
        })
    }
}

fn route_reply(pending: &Pending, line: &str) {
    let response = match serde_json::from_str::<PluginResponse>(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("request_id").and_then(Value::as_str).map(String::from));
            match id {
                Some(id) => PluginResponse::failure(id, format!("schema violation: {e}")),
                None => {
                    log::warn!("dropping unroutable plugin output: {e}");
                    return;
                }
            }
        }
    };
    if let Some(tx) = pending.lock().expect("pending lock").remove(&response.request_id) {
        let _ = tx.send(response);
    }
}

impl PluginClient for SubprocessClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, request: &PluginRequest, timeout: Duration) -> PluginResponse {
        let rid = request.request_id.clone();
        if !self.alive.load(Ordering::SeqCst) {
            return PluginResponse::failure(rid, "plugin process exited");
        }
        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(rid.clone(), tx);
        let line = serde_json::to_string(request).expect("request serializes");
        let written = {
            let mut stdin = self.stdin.lock().expect("stdin lock");
            writeln!(stdin, "{line}").and_then(|_| stdin.flush())
        };
        if let Err(e) = written {
            self.pending.lock().expect("pending lock").remove(&rid);
            return PluginResponse::failure(rid, format!("transport: {e}"));
        }
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").remove(&rid);
                PluginResponse::failure(rid, "timeout")
            }
            Err(RecvTimeoutError::Disconnected) => PluginResponse::failure(rid, "plugin process exited"),
        }
    }
}

impl Drop for SubprocessClient {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// `GET {base}/handshake`, `POST {base}/call`.
pub struct HttpClient {
    id: String,
    base: String,
    agent: ureq::Agent,
    handshake: Handshake,
}

impl HttpClient {
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self> {
        let base = base_url.trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let handshake: Handshake = agent
            .get(format!("{base}/handshake"))
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| RavError::Plugin(format!("{base}: handshake failed: {e}")))?;
        let id = handshake.id.clone().unwrap_or_else(|| base.clone());
        Ok(HttpClient {
            id,
            base,
            agent,
            handshake,
        })
    }
}

impl PluginClient for HttpClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, request: &PluginRequest, timeout: Duration) -> PluginResponse {
        let rid = request.request_id.clone();
        let sent = self
            .agent
            .post(format!("{}/call", self.base))
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send_json(request);
        let mut response = match sent {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return PluginResponse::failure(rid, "timeout"),
            Err(e) => return PluginResponse::failure(rid, format!("transport: {e}")),
        };
        match response.body_mut().read_json::<PluginResponse>() {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => PluginResponse::failure(rid, "timeout"),
            Err(e) => PluginResponse::failure(rid, format!("schema violation: {e}")),
        }
    }
}

/// Serves `client` over a line stream: handshake first, then one response
/// line per request line. Returns when the input ends.
pub fn serve_lines<R: BufRead, W: Write>(
    client: &dyn PluginClient,
    input: R,
    mut output: W,
    timeout: Duration,
) -> std::io::Result<()> {
    writeln!(output, "{}", serde_json::to_string(client.handshake()).expect("handshake serializes"))?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<PluginRequest>(&line) {
            Ok(req) if req.schema_version != SCHEMA_VERSION => {
                PluginResponse::failure(req.request_id, "schema_version mismatch")
            }
            Ok(req) if !client.handshake().supports(req.role) => {
                PluginResponse::failure(req.request_id, "role not served")
            }
            Ok(req) => client.call(&req, timeout),
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(Value::as_str).map(String::from))
                    .unwrap_or_default();
                PluginResponse::failure(id, format!("malformed request: {e}"))
            }
        };
        writeln!(output, "{}", serde_json::to_string(&response).expect("response serializes"))?;
        output.flush()?;
    }
    Ok(())
}
