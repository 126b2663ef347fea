//! Test support: a recording HTTP stub for the embedding and generation
//! services, built on `std::net` only.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

/// One recorded request.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub body: serde_json::Value,
}

/// Serves `POST /embed` with deterministic vectors derived from each text,
/// `POST /generate` with a fixed reply, and answers every other path
/// (or every request while `fail` is set) with HTTP 500.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    pub fail: Arc<AtomicUsize>,
    /// When non-zero, `/embed` replies with vectors of this length
    /// regardless of the requested dimension.
    pub reply_dim: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start() -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let fail = Arc::new(AtomicUsize::new(0));
        let reply_dim = Arc::new(AtomicUsize::new(0));
        let (log, fail_flag, dim_flag) = (requests.clone(), fail.clone(), reply_dim.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (log, fail_flag, dim_flag) = (log.clone(), fail_flag.clone(), dim_flag.clone());
                thread::spawn(move || {
                    let _ = serve(stream, &log, &fail_flag, &dim_flag);
                });
            }
        });
        StubServer { url, requests, fail, reply_dim }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn set_failing(&self, failing: bool) {
        self.fail.store(failing as usize, Ordering::SeqCst);
    }
}

/// Vector the stub returns for `text`: a fixed function of its bytes.
pub fn stub_vector(text: &str, dim: usize) -> Vec<f64> {
    let mut state: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        state = (state ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    (0..dim)
        .map(|i| {
            let x = state.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let x = (x ^ (x >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            ((x >> 40) as f64 / (1u64 << 24) as f64) - 0.5
        })
        .collect()
}

pub const STUB_GENERATION: &str = "Stub rationale from the generation service.";

fn serve(stream: TcpStream, log: &Mutex<Vec<Recorded>>, fail: &AtomicUsize, reply_dim: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut stream = stream;
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    log.lock().unwrap().push(Recorded { path: path.clone(), body: body.clone() });

    let reply = if fail.load(Ordering::SeqCst) != 0 {
        None
    } else {
        match path.as_str() {
            "/embed" => {
                let dim = match reply_dim.load(Ordering::SeqCst) {
                    0 => body["dim"].as_u64().unwrap_or(0) as usize,
                    forced => forced,
                };
                let vectors: Vec<Vec<f64>> = body["texts"]
                    .as_array()
                    .map(|a| a.iter().map(|t| stub_vector(t.as_str().unwrap_or(""), dim)).collect())
                    .unwrap_or_default();
                Some(serde_json::json!({ "vectors": vectors, "dim": dim }))
            }
            "/generate" => Some(serde_json::json!({ "text": STUB_GENERATION })),
            _ => None,
        }
    };
    let (status, text) = match reply {
        Some(v) => ("200 OK", v.to_string()),
        None => ("500 Internal Server Error", "{}".to_string()),
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    stream.flush()?;
    Ok(())
}
