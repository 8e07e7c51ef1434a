//! Text-generation backends that accept an audio payload alongside a prompt.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Position of a prompt in the anchoring dialogue; used as the mock script key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptId {
    Describe,
    Categorize,
    Control,
}

impl PromptId {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::Describe => "describe",
            PromptId::Categorize => "categorize",
            PromptId::Control => "control",
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw audio bytes handed to a backend, usually the contents of `audio.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioPayload {
    pub bytes: Vec<u8>,
    pub path: Option<PathBuf>,
}

impl AudioPayload {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        AudioPayload { bytes, path: None }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(AudioPayload {
            bytes,
            path: Some(path.to_path_buf()),
        })
    }

    /// Lower-case hex SHA-256 of the bytes.
    pub fn checksum(&self) -> String {
        Sha256::digest(&self.bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub trait LlmClient: Send + Sync {
    /// Backend name and version, carried in backend errors.
    fn identity(&self) -> String;

    fn complete(&self, id: PromptId, prompt: &str, audio: &AudioPayload) -> Result<String>;
}

/// Scripted backend. Replies are looked up by `"<sha256>:<prompt-id>"`, then by
/// the wildcard `"*:<prompt-id>"`.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    replies: HashMap<String, String>,
}

impl MockBackend {
    pub fn new(replies: HashMap<String, String>) -> Self {
        MockBackend { replies }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let replies = serde_json::from_str(&text).map_err(|e| Error::json(format!("mock script {}", path.display()), e))?;
        Ok(MockBackend { replies })
    }

    /// Same reply for every audio.
    pub fn with_default(mut self, id: PromptId, reply: impl Into<String>) -> Self {
        self.replies.insert(format!("*:{id}"), reply.into());
        self
    }

    pub fn with_reply(mut self, audio: &AudioPayload, id: PromptId, reply: impl Into<String>) -> Self {
        self.replies.insert(format!("{}:{id}", audio.checksum()), reply.into());
        self
    }
}

impl LlmClient for MockBackend {
    fn identity(&self) -> String {
        format!("mock/{}", env!("CARGO_PKG_VERSION"))
    }

    fn complete(&self, id: PromptId, _prompt: &str, audio: &AudioPayload) -> Result<String> {
        let exact = format!("{}:{id}", audio.checksum());
        self.replies
            .get(&exact)
            .or_else(|| self.replies.get(&format!("*:{id}")))
            .cloned()
            .ok_or_else(|| Error::Backend {
                backend: self.identity(),
                message: format!("no scripted reply for {exact}"),
            })
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    prompt_id: PromptId,
    audio_b64: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    audio_path: Option<&'a Path>,
}

#[derive(Deserialize)]
struct HttpReply {
    text: String,
}

/// JSON-over-HTTP backend: POST `{prompt, audio_b64}`, reply `{text}`.
///
/// `timeout` bounds the whole call including retries.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    timeout: Duration,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            timeout,
            retries,
            agent: ureq::AgentBuilder::new().build(),
        }
    }

    fn error(&self, message: String) -> Error {
        Error::Backend {
            backend: self.identity(),
            message,
        }
    }
}

impl LlmClient for HttpBackend {
    fn identity(&self) -> String {
        format!("http {}", self.endpoint)
    }

    fn complete(&self, id: PromptId, prompt: &str, audio: &AudioPayload) -> Result<String> {
        let body = HttpRequest {
            prompt,
            prompt_id: id,
            audio_b64: base64::engine::general_purpose::STANDARD.encode(&audio.bytes),
            audio_path: audio.path.as_deref(),
        };
        let deadline = Instant::now() + self.timeout;
        let mut last = String::from("timed out before the first attempt");
        for attempt in 0..=self.retries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            match self.agent.post(&self.endpoint).timeout(remaining).send_json(&body) {
                Ok(resp) => {
                    return resp
                        .into_json::<HttpReply>()
                        .map(|r| r.text)
                        .map_err(|e| self.error(format!("malformed reply: {e}")));
                }
                Err(ureq::Error::Status(code, _)) if code < 500 => {
                    return Err(self.error(format!("HTTP status {code}")));
                }
                Err(e) => {
                    log::warn!("{}: attempt {} failed: {e}", self.identity(), attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(self.error(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn mock_prefers_exact_key() {
        let a = AudioPayload::from_bytes(b"1,2\n".to_vec());
        let b = AudioPayload::from_bytes(b"3,4\n".to_vec());
        let mock = MockBackend::default()
            .with_default(PromptId::Describe, "generic")
            .with_reply(&a, PromptId::Describe, "specific");
        assert_eq!(mock.complete(PromptId::Describe, "q", &a).unwrap(), "specific");
        assert_eq!(mock.complete(PromptId::Describe, "q", &b).unwrap(), "generic");
        assert!(matches!(mock.complete(PromptId::Control, "q", &a), Err(Error::Backend { .. })));
    }

    #[test]
    fn checksum_is_sha256_hex() {
        let p = AudioPayload::from_bytes(b"abc".to_vec());
        assert_eq!(p.checksum(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn unreachable_endpoint_fails_within_budget() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = HttpBackend::new(format!("http://127.0.0.1:{port}/"), Duration::from_secs(1), 3);
        let start = Instant::now();
        let err = client.complete(PromptId::Describe, "q", &AudioPayload::from_bytes(vec![])).unwrap_err();
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(err.to_string().contains("http 127.0.0.1") || err.to_string().contains("http http://127.0.0.1"));
    }

    #[test]
    fn silent_server_times_out_within_budget() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = std::thread::spawn(move || {
            let conn = listener.accept();
            std::thread::sleep(Duration::from_millis(2500));
            drop(conn);
        });
        let client = HttpBackend::new(format!("http://{addr}/"), Duration::from_millis(800), 5);
        let start = Instant::now();
        assert!(client.complete(PromptId::Describe, "q", &AudioPayload::from_bytes(vec![])).is_err());
        assert!(start.elapsed() < Duration::from_millis(1800));
        hold.join().unwrap();
    }

    #[test]
    fn http_roundtrip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let reply = serde_json::json!({"text": format!("got {} {}", req["prompt"].as_str().unwrap(), req["audio_b64"].as_str().unwrap())}).to_string();
            let mut stream = stream;
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}", reply.len(), reply).unwrap();
        });
        let client = HttpBackend::new(format!("http://{addr}/"), Duration::from_secs(5), 0);
        let text = client.complete(PromptId::Describe, "hello", &AudioPayload::from_bytes(b"hi".to_vec())).unwrap();
        assert_eq!(text, "got hello aGk=");
        server.join().unwrap();
    }
}
