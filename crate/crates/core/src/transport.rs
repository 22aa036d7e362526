//! One-request/one-response JSON transport shared by the external converter,
//! scorer and generation adapters.
//!
//! Each request is a single JSON object written as one line; the peer answers
//! with exactly one JSON line. A response carrying an `"error"` string is
//! surfaced as [`TransportError::Remote`].

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend error: {0}")]
    Remote(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

pub trait Transport: Send + Sync {
    fn round_trip(&self, request: &Value) -> Result<Value, TransportError>;
}

fn check_error(response: Value) -> Result<Value, TransportError> {
    if let Some(msg) = response.get("error").and_then(Value::as_str) {
        return Err(TransportError::Remote(msg.to_string()));
    }
    Ok(response)
}

/// In-process transport backed by a closure.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&Value) -> Result<Value, TransportError> + Send + Sync,
{
    fn round_trip(&self, request: &Value) -> Result<Value, TransportError> {
        (self.0)(request).and_then(check_error)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Long-lived child process speaking line-delimited JSON on stdin/stdout.
/// The process is spawned on first use; requests are serialized.
pub struct CommandTransport {
    spec: CommandSpec,
    session: Mutex<Option<Session>>,
}

impl CommandTransport {
    pub fn new(spec: CommandSpec) -> Self {
        Self {
            spec,
            session: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Session, TransportError> {
        let mut child = Command::new(&self.spec.program)
            .args(&self.spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TransportError::Unavailable(format!("{}: {e}", self.spec.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Session {
            child,
            stdin,
            stdout,
        })
    }
}

impl Transport for CommandTransport {
    fn round_trip(&self, request: &Value) -> Result<Value, TransportError> {
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let session = guard.as_mut().unwrap();
        let mut line = serde_json::to_string(request)
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        line.push('\n');
        let io = |e: std::io::Error| TransportError::Unavailable(e.to_string());
        let result = session
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| session.stdin.flush())
            .map_err(io)
            .and_then(|_| {
                let mut buf = String::new();
                let n = session.stdout.read_line(&mut buf).map_err(io)?;
                if n == 0 {
                    return Err(TransportError::Unavailable(
                        "backend closed its output".to_string(),
                    ));
                }
                serde_json::from_str::<Value>(&buf)
                    .map_err(|e| TransportError::Malformed(format!("{e}: {}", buf.trim())))
            });
        if matches!(result, Err(TransportError::Unavailable(_))) {
            // drop the dead session so the next call respawns
            if let Some(mut s) = guard.take() {
                let _ = s.child.kill();
            }
        }
        result.and_then(check_error)
    }
}

impl Drop for CommandTransport {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.session.lock() {
            if let Some(mut s) = guard.take() {
                let _ = s.child.kill();
                let _ = s.child.wait();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fn_transport_surfaces_remote_errors() {
        let t = FnTransport(|_: &Value| Ok(json!({"error": "boom"})));
        assert!(matches!(
            t.round_trip(&json!({})),
            Err(TransportError::Remote(m)) if m == "boom"
        ));
    }

    #[test]
    fn missing_program_is_unavailable() {
        let t = CommandTransport::new(CommandSpec {
            program: "/nonexistent/backend-binary".into(),
            args: vec![],
        });
        assert!(matches!(
            t.round_trip(&json!({"op": "ping"})),
            Err(TransportError::Unavailable(_))
        ));
    }

    #[test]
    fn command_transport_round_trips_lines() {
        // `cat` echoes each request line back verbatim.
        let t = CommandTransport::new(CommandSpec {
            program: "cat".into(),
            args: vec![],
        });
        let req = json!({"op": "echo", "n": 3});
        assert_eq!(t.round_trip(&req).unwrap(), req);
        assert_eq!(t.round_trip(&json!({"n": 4})).unwrap(), json!({"n": 4}));
    }
}
