//! Minimal HTTP/1.1 server for exercising the client without a real
//! endpoint. One thread per connection, `Connection: close` on every reply.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use super::sha256_hex;

#[derive(Debug, Clone)]
pub struct MockRequest {
    pub method: String,
    pub path: String,
    headers: HashMap<String, String>,
    pub body: String,
}

impl MockRequest {
    /// Header lookup, case-insensitive.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(String::as_str)
    }

    pub fn json(&self) -> Option<Value> {
        serde_json::from_str(&self.body).ok()
    }

    /// Text of the first user message, for either provider shape.
    pub fn prompt(&self) -> Option<String> {
        self.json()?
            .pointer("/messages/0/content")
            .and_then(Value::as_str)
            .map(str::to_string)
    }
}

#[derive(Debug, Clone)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
    pub delay: Option<Duration>,
}

impl MockResponse {
    pub fn status(status: u16, body: impl Into<String>) -> Self {
        MockResponse {
            status,
            body: body.into(),
            delay: None,
        }
    }

    /// 200 with an OpenAI-style chat completion carrying `content`.
    pub fn chat(content: &str) -> Self {
        let body = json!({
            "id": "mock",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        });
        Self::status(200, body.to_string())
    }

    /// 200 with an Anthropic-style messages response.
    pub fn anthropic(content: &str) -> Self {
        let body = json!({
            "id": "mock",
            "type": "message",
            "content": [{"type": "text", "text": content}],
        });
        Self::status(200, body.to_string())
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }
}

type Handler = dyn Fn(&MockRequest) -> MockResponse + Send + Sync;

struct Shared {
    handler: Box<Handler>,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    stop: AtomicBool,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&MockRequest) -> MockResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            handler: Box::new(handler),
            requests: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let s = s.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &s) {
                        log::debug!("mock server connection error: {e}");
                    }
                });
            }
        });
        Ok(MockServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    /// Base URL, e.g. `http://127.0.0.1:PORT/v1`.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Highest number of requests being handled at the same time.
    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = HashMap::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let request = MockRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };

    shared.requests.fetch_add(1, Ordering::SeqCst);
    let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let response = (shared.handler)(&request);
    if let Some(d) = response.delay {
        std::thread::sleep(d);
    }
    shared.in_flight.fetch_sub(1, Ordering::SeqCst);

    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        response.status,
        reason(response.status),
        response.body.len()
    )?;
    out.write_all(response.body.as_bytes())?;
    out.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

/// Responder that plays a clinician: reads the baseline lab and dose from
/// the prompt and answers `baseline + gain * dose`, in one of several
/// formats chosen by a hash of the prompt.
pub fn lab_responder(gain: f64) -> impl Fn(&MockRequest) -> MockResponse + Send + Sync + 'static {
    move |req: &MockRequest| {
        let Some(prompt) = req.prompt() else {
            return MockResponse::status(400, "{\"error\": \"no messages\"}");
        };
        let (Some(baseline), Some(dose)) = (prompt_baseline(&prompt), prompt_dose(&prompt)) else {
            return MockResponse::chat("I cannot determine the laboratory value from this description.");
        };
        let value = ((baseline + gain * dose) * 100.0).round() / 100.0;
        let json = format!("{{\"predicted_lab\": {value}, \"justification\": \"Baseline {baseline} plus expected response to {dose} mEq.\"}}");
        let text = match sha256_hex(prompt.as_bytes()).as_bytes()[0] % 3 {
            0 => json,
            1 => format!("```json\n{json}\n```"),
            _ => format!(
                "Based on the information provided, here is my estimate:\n{json}\nLet me know if you need more."
            ),
        };
        MockResponse::chat(&text)
    }
}

fn number_after(text: &str, marker: &str) -> Option<f64> {
    let start = text.find(marker)? + marker.len();
    let rest = text[start..].trim_start();
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .unwrap_or(rest.len());
    rest[..end].parse().ok()
}

fn prompt_baseline(prompt: &str) -> Option<f64> {
    prompt.lines().find_map(|l| {
        let l = l.trim_start_matches(['-', ' ']);
        if l.starts_with("Potassium") || l.starts_with("Sodium") {
            number_after(l, ":")
        } else {
            None
        }
    })
}

fn prompt_dose(prompt: &str) -> Option<f64> {
    number_after(prompt, "Dose:")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_prompt_fields() {
        let p = "STATIC\n- Potassium: 3.4 mEq/L\nPREDICTION QUERY\nDose: 20 mEq of potassium chloride\n";
        assert_eq!(prompt_baseline(p), Some(3.4));
        assert_eq!(prompt_dose(p), Some(20.0));
    }

    #[test]
    fn serves_requests_and_tracks_concurrency() {
        let server = MockServer::start(|_r| MockResponse::chat("hi").with_delay(Duration::from_millis(50))).unwrap();
        let url = format!("{}/chat/completions", server.url());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let url = url.clone();
                std::thread::spawn(move || {
                    reqwest::blocking::Client::new()
                        .post(&url)
                        .body("{}")
                        .send()
                        .unwrap()
                        .status()
                        .as_u16()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 200);
        }
        assert_eq!(server.requests(), 4);
        assert!(server.max_in_flight() >= 1);
    }
}
