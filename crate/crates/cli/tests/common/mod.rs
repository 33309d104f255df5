#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

/// Minimal OpenAI-compatible completions server. Each answer option gets a
/// score from a hash of its text plus a bonus for label "A"; the response
/// lists the top five next tokens.
pub struct MockServer {
    pub base_url: String,
    requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let counter = counter.clone();
                std::thread::spawn(move || {
                    let _ = handle(stream, &counter);
                });
            }
        });
        Self { base_url, requests }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn handle(stream: TcpStream, counter: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0usize;
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    counter.fetch_add(1, Ordering::SeqCst);
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let prompt = request["prompt"].as_str().unwrap_or_default();
    let payload = completion(prompt).to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        payload.len(),
        payload
    )?;
    stream.flush()
}

fn text_score(text: &str) -> f64 {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    (h.finish() % 1000) as f64 / 500.0
}

/// Options of the last question block in the prompt.
fn last_options(prompt: &str) -> Vec<(String, String)> {
    let block = prompt.rsplit("Question:").next().unwrap_or(prompt);
    block
        .lines()
        .filter_map(|l| {
            let (label, text) = l.split_once(". ")?;
            (label.len() == 1 && label.chars().all(|c| c.is_ascii_uppercase())).then(|| (label.to_string(), text.to_string()))
        })
        .collect()
}

pub fn completion(prompt: &str) -> Value {
    let mut scored: Vec<(String, f64)> = last_options(prompt)
        .into_iter()
        .map(|(label, text)| {
            let bonus = if label == "A" { 0.7 } else { 0.0 };
            (format!(" {label}"), text_score(&text) + bonus)
        })
        .collect();
    scored.push(("\n".into(), 0.5));
    scored.push((" The".into(), -0.5));
    let z: f64 = scored.iter().map(|(_, s)| s.exp()).sum();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: serde_json::Map<String, Value> = scored
        .into_iter()
        .take(5)
        .map(|(t, s)| (t, json!(s - z.ln())))
        .collect();
    json!({
        "object": "text_completion",
        "choices": [{"index": 0, "text": " A", "logprobs": {"top_logprobs": [top]}}]
    })
}
