//! Role-based model service clients.
//!
//! Requests serialize to canonical JSON (fixed field order, no whitespace).
//! Playback mode looks up `<dir>/<sha256(request)>.txt` and returns its bytes
//! verbatim; a `<hash>.err` file simulates a failing service. Live mode POSTs
//! the same JSON to an endpoint and expects `{"text": "..."}` back.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceRole {
    Asr,
    FilterLlm,
    QaVlm,
}

impl fmt::Display for ServiceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceRole::Asr => "asr",
            ServiceRole::FilterLlm => "filter-llm",
            ServiceRole::QaVlm => "qa-vlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub role: ServiceRole,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
}

impl ServiceRequest {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    /// Hex SHA-256 of the canonical JSON; names the fixture file.
    pub fn fixture_key(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub trait ServiceClient: Send + Sync {
    fn role(&self) -> ServiceRole;

    fn call(&self, request: &ServiceRequest) -> Result<String>;
}

fn service_error(role: ServiceRole, message: impl Into<String>) -> ForgeError {
    ForgeError::Service { role: role.to_string(), message: message.into() }
}

/// Calls `client`, retrying failed attempts `retries` times.
pub fn call_with_retry(client: &dyn ServiceClient, request: &ServiceRequest, retries: usize) -> Result<String> {
    let mut last = None;
    for _ in 0..=retries {
        match client.call(request) {
            Ok(reply) => return Ok(reply),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Replays recorded responses from a directory.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    role: ServiceRole,
    dir: PathBuf,
}

impl FixtureClient {
    pub fn new(role: ServiceRole, dir: impl Into<PathBuf>) -> Self {
        Self { role, dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ServiceClient for FixtureClient {
    fn role(&self) -> ServiceRole {
        self.role
    }

    fn call(&self, request: &ServiceRequest) -> Result<String> {
        if request.role != self.role {
            return Err(service_error(
                self.role,
                format!("request for role {} sent to a {} client", request.role, self.role),
            ));
        }
        let key = request.fixture_key();
        let reply = self.dir.join(format!("{key}.txt"));
        match std::fs::read(&reply) {
            Ok(bytes) => {
                String::from_utf8(bytes).map_err(|_| service_error(self.role, format!("fixture {key} is not UTF-8")))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let err = self.dir.join(format!("{key}.err"));
                match std::fs::read_to_string(&err) {
                    Ok(msg) => Err(service_error(self.role, msg.trim().to_string())),
                    Err(_) => Err(service_error(self.role, format!("no fixture recorded for request {key}"))),
                }
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Writes a playback fixture for `request`.
pub fn record_fixture(dir: &Path, request: &ServiceRequest, reply: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.txt", request.fixture_key()));
    std::fs::write(&path, reply)?;
    Ok(path)
}

/// Records a failing fixture for `request`.
pub fn record_failure(dir: &Path, request: &ServiceRequest, message: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.err", request.fixture_key()));
    std::fs::write(&path, message)?;
    Ok(path)
}

#[derive(Deserialize)]
struct LiveReply {
    text: String,
}

/// Live JSON-over-HTTP client.
pub struct HttpClient {
    role: ServiceRole,
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(role: ServiceRole, endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| service_error(role, e.to_string()))?;
        Ok(Self { role, endpoint: endpoint.into(), http })
    }
}

impl ServiceClient for HttpClient {
    fn role(&self) -> ServiceRole {
        self.role
    }

    fn call(&self, request: &ServiceRequest) -> Result<String> {
        let resp = self
            .http
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(request.canonical_json())
            .send()
            .map_err(|e| service_error(self.role, e.to_string()))?;
        if !resp.status().is_success() {
            return Err(service_error(self.role, format!("HTTP {}", resp.status())));
        }
        let reply: LiveReply = resp.json().map_err(|e| service_error(self.role, e.to_string()))?;
        Ok(reply.text)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    fn req() -> ServiceRequest {
        ServiceRequest { role: ServiceRole::FilterLlm, prompt: "p".into(), media: None }
    }

    #[test]
    fn canonical_json_is_stable() {
        assert_eq!(req().canonical_json(), r#"{"role":"filter-llm","prompt":"p"}"#);
        assert_eq!(req().fixture_key().len(), 64);
        let with_media = ServiceRequest { media: Some("v.mp4".into()), ..req() };
        assert_ne!(with_media.fixture_key(), req().fixture_key());
    }

    #[test]
    fn playback_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        record_fixture(dir.path(), &req(), "Yes\r\n  trailing ").unwrap();
        let client = FixtureClient::new(ServiceRole::FilterLlm, dir.path());
        assert_eq!(client.call(&req()).unwrap(), "Yes\r\n  trailing ");
        let other = ServiceRequest { prompt: "q".into(), ..req() };
        assert!(matches!(client.call(&other), Err(ForgeError::Service { .. })));
        let wrong_role = ServiceRequest { role: ServiceRole::Asr, ..req() };
        assert!(client.call(&wrong_role).is_err());
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl ServiceClient for Flaky {
        fn role(&self) -> ServiceRole {
            ServiceRole::FilterLlm
        }

        fn call(&self, _: &ServiceRequest) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(service_error(ServiceRole::FilterLlm, "down"))
            } else {
                Ok("yes".into())
            }
        }
    }

    #[test]
    fn retries_three_times_after_the_first_attempt() {
        let ok = Flaky { failures: 3, calls: AtomicUsize::new(0) };
        assert_eq!(call_with_retry(&ok, &req(), 3).unwrap(), "yes");
        assert_eq!(ok.calls.load(Ordering::SeqCst), 4);
        let bad = Flaky { failures: 4, calls: AtomicUsize::new(0) };
        assert!(call_with_retry(&bad, &req(), 3).is_err());
        assert_eq!(bad.calls.load(Ordering::SeqCst), 4);
    }
}
