use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, IoContext, Result};

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

/// Per-request parameters. `case_id` doubles as a correlation id (and is
/// what the scripted mock keys on).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionParams {
    pub case_id: String,
    pub attempt: usize,
    pub max_tokens: Option<u32>,
    pub temperature: f64,
}

/// A chat-completion style backend.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String>;
    fn model_id(&self) -> &str;
}

/// Scripted client: each case has an ordered list of canned responses,
/// replayed one per call; the last one repeats once the list runs out.
/// A response starting with `!error:` is returned as a transport failure.
#[derive(Debug, Default)]
pub struct MockClient {
    model_id: String,
    script: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(script: HashMap<String, Vec<String>>) -> Self {
        Self {
            model_id: "mock".into(),
            script,
            ..Default::default()
        }
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    /// Reads a JSON object `{case_id: [response, ...]}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Ok(Self::new(serde_json::from_slice(&bytes)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl CompletionClient for MockClient {
    fn complete(&self, _prompt: &str, params: &CompletionParams) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let responses = self
            .script
            .get(&params.case_id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::Client(format!("mock script has no responses for case {}", params.case_id)))?;
        let idx = {
            let mut cursors = self.cursors.lock().expect("cursor lock");
            let c = cursors.entry(params.case_id.clone()).or_insert(0);
            let idx = (*c).min(responses.len() - 1);
            *c += 1;
            idx
        };
        let r = &responses[idx];
        match r.strip_prefix("!error:") {
            Some(msg) => Err(Error::Client(msg.trim().to_owned())),
            None => Ok(r.clone()),
        }
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpClient {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model_id: String,
}

impl HttpClient {
    pub fn new(base_url: &str, model_id: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            base_url: base_url.trim_end_matches('/').to_owned(),
            api_key,
            model_id: model_id.to_owned(),
        }
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        let mut body = json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
        });
        if let Some(n) = params.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let mut req = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("X-Request-Id", &format!("{}#{}", params.case_id, params.attempt));
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let value: serde_json::Value = match req.send_json(body) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| Error::Client(format!("unreadable response body: {e}")))?,
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                return Err(Error::Client(format!("HTTP {code}: {}", text.trim())));
            }
            Err(e) => return Err(Error::Client(e.to_string())),
        };
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Client(format!("response has no message content: {value}")))
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn params(case: &str) -> CompletionParams {
        CompletionParams {
            case_id: case.into(),
            attempt: 1,
            max_tokens: Some(64),
            temperature: 0.0,
        }
    }

    #[test]
    fn mock_replays_then_repeats_last() {
        let m = MockClient::new(HashMap::from([(
            "c".to_string(),
            vec!["one".to_string(), "!error: boom".to_string(), "three".to_string()],
        )]));
        assert_eq!(m.complete("", &params("c")).unwrap(), "one");
        assert!(m.complete("", &params("c")).unwrap_err().to_string().contains("boom"));
        assert_eq!(m.complete("", &params("c")).unwrap(), "three");
        assert_eq!(m.complete("", &params("c")).unwrap(), "three");
        assert!(m.complete("", &params("other")).is_err());
        assert_eq!(m.calls(), 5);
    }

    /// Serves one canned HTTP response and hands back the request it saw.
    fn serve_once(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            stream.write_all(response.as_bytes()).unwrap();
            head + &String::from_utf8(body).unwrap()
        });
        (addr, handle)
    }

    #[test]
    fn http_client_posts_chat_completion() {
        let (url, server) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"Ductal carcinoma."}}]}"#,
        );
        let client = HttpClient::new(&url, "gpt-3.5-turbo", Some("k".into()), Duration::from_secs(5));
        assert_eq!(client.complete("hello", &params("c1")).unwrap(), "Ductal carcinoma.");
        let request = server.join().unwrap();
        assert!(request.starts_with("POST /chat/completions"));
        assert!(request.contains("Bearer k"));
        assert!(request.contains(r#""model":"gpt-3.5-turbo""#));
        assert!(request.contains(r#""content":"hello""#));
    }

    #[test]
    fn http_errors_surface_as_client_errors() {
        let (url, server) = serve_once("429 Too Many Requests", r#"{"error":"slow down"}"#);
        let client = HttpClient::new(&url, "m", None, Duration::from_secs(5));
        let err = client.complete("x", &params("c")).unwrap_err().to_string();
        assert!(err.contains("429"), "{err}");
        server.join().unwrap();
    }
}
