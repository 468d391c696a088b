#![allow(dead_code)]

pub mod experiment;

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

/// What the fake server does with the next request.
#[derive(Debug, Clone)]
pub enum Scripted {
    Respond { status: u16, body: String },
    /// Hold the connection open without answering.
    Stall(Duration),
    /// Answer after a pause.
    Slow(Duration, u16, String),
}

impl Scripted {
    pub fn ok(outputs: &[&str]) -> Self {
        Scripted::Respond {
            status: 200,
            body: serde_json::json!({ "outputs": outputs }).to_string(),
        }
    }

    pub fn error(status: u16, code: &str, message: &str) -> Self {
        Scripted::Respond {
            status,
            body: serde_json::json!({ "error": { "code": code, "message": message } }).to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Received {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Received {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

/// A minimal HTTP/1.1 server answering from a script, one connection per
/// request. Unscripted requests get a 500.
pub struct FakeServer {
    pub url: String,
    script: Arc<Mutex<VecDeque<Scripted>>>,
    received: Arc<Mutex<Vec<Received>>>,
    in_flight: Arc<Mutex<(usize, usize)>>,
}

impl FakeServer {
    pub fn start(script: impl IntoIterator<Item = Scripted>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind fake server");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let script = Arc::new(Mutex::new(script.into_iter().collect::<VecDeque<_>>()));
        let received = Arc::new(Mutex::new(Vec::new()));
        let in_flight = Arc::new(Mutex::new((0, 0)));
        let (s, r, f) = (script.clone(), received.clone(), in_flight.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (s, r, f) = (s.clone(), r.clone(), f.clone());
                thread::spawn(move || {
                    {
                        let mut g = f.lock().unwrap();
                        g.0 += 1;
                        g.1 = g.1.max(g.0);
                    }
                    serve(stream, &s, &r);
                    f.lock().unwrap().0 -= 1;
                });
            }
        });
        FakeServer {
            url,
            script,
            received,
            in_flight,
        }
    }

    /// Most requests ever open at once.
    pub fn peak_concurrency(&self) -> usize {
        self.in_flight.lock().unwrap().1
    }

    pub fn received(&self) -> Vec<Received> {
        self.received.lock().unwrap().clone()
    }

    pub fn attempts(&self) -> usize {
        self.received.lock().unwrap().len()
    }

    pub fn remaining_script(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, script: &Mutex<VecDeque<Scripted>>, received: &Mutex<Vec<Received>>) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let length = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    received.lock().unwrap().push(Received {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    });

    let action = script.lock().unwrap().pop_front().unwrap_or(Scripted::Respond {
        status: 500,
        body: r#"{"error":{"code":"unscripted","message":"no scripted response"}}"#.into(),
    });
    let mut stream = stream;
    let (status, body) = match action {
        Scripted::Stall(d) => {
            thread::sleep(d);
            return;
        }
        Scripted::Slow(d, status, body) => {
            thread::sleep(d);
            (status, body)
        }
        Scripted::Respond { status, body } => (status, body),
    };
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

/// One file of the golden wire-contract corpus.
#[derive(Debug, serde::Deserialize)]
pub struct ContractCase {
    pub name: String,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub request: Option<serde_json::Value>,
    pub response: ContractResponse,
    #[serde(default)]
    pub expect: Option<serde_json::Value>,
}

#[derive(Debug, serde::Deserialize)]
pub struct ContractResponse {
    pub status: u16,
    pub body: serde_json::Value,
}

pub fn contract_cases() -> Vec<ContractCase> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/contract");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .expect("contract corpus directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .collect()
}

/// Replay one generate case against the client; `Err` describes the first
/// mismatch.
pub fn check_contract_case(case: &ContractCase) -> Result<(), String> {
    use ex2_core::backend::{BackendError, GenerationBackend, GenerationRequest, RemoteBackend, RemoteConfig};

    let server = FakeServer::start([Scripted::Respond {
        status: case.response.status,
        body: case.response.body.to_string(),
    }]);
    let client = RemoteBackend::new(&RemoteConfig::new(&server.url)).map_err(|e| e.to_string())?;

    if case.path.as_deref() == Some("/v1/health") {
        if !client.health() {
            return Err(format!("{}: health check failed", case.name));
        }
        let got = server.received();
        return match got.first() {
            Some(r) if r.method == "GET" && r.path == "/v1/health" => Ok(()),
            other => Err(format!("{}: unexpected health request {other:?}", case.name)),
        };
    }

    let wire = case.request.as_ref().ok_or("generate case without request")?;
    let mut req = GenerationRequest::new(wire["input"].as_str().unwrap(), wire["num_samples"].as_u64().unwrap() as usize);
    req.max_length = wire["max_tokens"].as_u64().unwrap() as usize;
    req.temperature = wire["temperature"].as_f64().unwrap();
    req.seed = wire.get("seed").and_then(|s| s.as_u64());
    let result = client.generate(&req);

    let sent = server.received();
    if sent.len() != 1 {
        return Err(format!("{}: expected one attempt, server saw {}", case.name, sent.len()));
    }
    let sent = &sent[0];
    if sent.method != "POST" || sent.path != "/v1/generate" {
        return Err(format!("{}: sent {} {}", case.name, sent.method, sent.path));
    }
    if !sent.header("content-type").is_some_and(|v| v.starts_with("application/json")) {
        return Err(format!("{}: missing JSON content type", case.name));
    }
    if sent.json() != *wire {
        return Err(format!("{}: sent body {} differs from golden {}", case.name, sent.body, wire));
    }

    let expect = case.expect.as_ref().ok_or("generate case without expectation")?;
    match (expect.get("error").and_then(|e| e.as_str()), result) {
        (None, Ok(r)) => {
            let outputs: Vec<String> = serde_json::from_value(expect["outputs"].clone()).unwrap();
            let shortfall = expect["shortfall"].as_u64().unwrap_or(0) as usize;
            if r.outputs != outputs || r.shortfall != shortfall {
                return Err(format!("{}: got {:?} shortfall {}", case.name, r.outputs, r.shortfall));
            }
            Ok(())
        }
        (Some("malformed_request"), Err(BackendError::MalformedRequest { status, code, .. })) => {
            if Some(status as u64) != expect["status"].as_u64() || Some(code.as_str()) != expect["code"].as_str() {
                return Err(format!("{}: wrong status/code {status} {code}", case.name));
            }
            Ok(())
        }
        (Some("malformed_response"), Err(BackendError::MalformedResponse { .. })) => Ok(()),
        (want, got) => Err(format!("{}: expected {want:?}, got {got:?}", case.name)),
    }
}
