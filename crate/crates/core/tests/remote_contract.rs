mod common;

use std::time::{Duration, Instant};

use common::{check_contract_case, contract_cases, FakeServer, Scripted};
use ex2_core::backend::{BackendError, GenerationBackend, GenerationRequest, RemoteBackend, RemoteConfig, RetryPolicy};

fn client(server: &FakeServer, tweak: impl FnOnce(&mut RemoteConfig)) -> RemoteBackend {
    let mut cfg = RemoteConfig::new(&server.url);
    tweak(&mut cfg);
    RemoteBackend::new(&cfg).unwrap()
}

fn fast_retry() -> Option<RetryPolicy> {
    Some(RetryPolicy {
        base_delay_ms: 5,
        ..RetryPolicy::default()
    })
}

fn request() -> GenerationRequest {
    GenerationRequest::new("rain in [0 Oslo] | snow in [0 Rome]", 2).with_seed(9)
}

#[test]
fn golden_corpus() {
    let cases = contract_cases();
    assert!(cases.len() >= 5);
    for case in &cases {
        if let Err(e) = check_contract_case(case) {
            panic!("{e}");
        }
    }
}

#[test]
fn two_503s_then_success() {
    let server = FakeServer::start([
        Scripted::error(503, "overloaded", "busy"),
        Scripted::error(503, "overloaded", "busy"),
        Scripted::ok(&["a", "b"]),
    ]);
    let started = Instant::now();
    let result = client(&server, |_| {}).generate(&request()).unwrap();
    assert_eq!(result.outputs, ["a", "b"]);
    assert_eq!(server.attempts(), 3);
    // backoff of 250 ms then 500 ms under the default policy
    assert!(started.elapsed() >= Duration::from_millis(750));
    assert!(result.latency_ms >= 750);
    assert_eq!(result.backend_id, "remote");
}

#[test]
fn five_503s_exhaust_retries() {
    let server = FakeServer::start((0..6).map(|_| Scripted::error(503, "overloaded", "busy")));
    let err = client(&server, |c| c.retry = fast_retry()).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 5, .. }), "{err:?}");
    assert_eq!(err.request_id(), request().request_id());
    assert_eq!(server.attempts(), 5);
    assert_eq!(server.remaining_script(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    for status in [400, 404, 422] {
        let server = FakeServer::start([Scripted::error(status, "bad", "nope"), Scripted::ok(&["x"])]);
        let err = client(&server, |c| c.retry = fast_retry()).generate(&request()).unwrap_err();
        assert!(matches!(err, BackendError::MalformedRequest { status: s, .. } if s == status));
        assert!(!err.is_retryable());
        assert_eq!(server.attempts(), 1);
    }
}

#[test]
fn timeouts_retry_then_fail() {
    let server = FakeServer::start((0..5).map(|_| Scripted::Stall(Duration::from_millis(600))));
    let err = client(&server, |c| {
        c.timeout_ms = 100;
        c.retry = fast_retry();
    })
    .generate(&request())
    .unwrap_err();
    assert!(matches!(err, BackendError::Timeout { attempts: 5, .. }), "{err:?}");
    assert_eq!(server.attempts(), 5);
}

#[test]
fn timeout_then_success() {
    let server = FakeServer::start([Scripted::Stall(Duration::from_millis(600)), Scripted::ok(&["ok", "ok2"])]);
    let result = client(&server, |c| {
        c.timeout_ms = 100;
        c.retry = fast_retry();
    })
    .generate(&request())
    .unwrap();
    assert_eq!(result.outputs.len(), 2);
    assert_eq!(server.attempts(), 2);
}

#[test]
fn extra_outputs_are_truncated() {
    let server = FakeServer::start([Scripted::ok(&["a", "b", "c", "d"])]);
    let result = client(&server, |_| {}).generate(&request()).unwrap();
    assert_eq!(result.outputs, ["a", "b"]);
    assert_eq!(result.shortfall, 0);
}

#[test]
fn bearer_token_is_sent() {
    let server = FakeServer::start([Scripted::ok(&["a"])]);
    client(&server, |c| c.bearer_token = Some("s3cret".into()))
        .generate(&request())
        .unwrap();
    assert_eq!(server.received()[0].header("authorization"), Some("Bearer s3cret"));

    let server = FakeServer::start([Scripted::ok(&["a"])]);
    client(&server, |_| {}).generate(&request()).unwrap();
    assert_eq!(server.received()[0].header("authorization"), None);
}

#[test]
fn unhealthy_service() {
    let server = FakeServer::start([Scripted::error(503, "loading", "model loading")]);
    assert!(!client(&server, |_| {}).health());
    let server = FakeServer::start([Scripted::Respond {
        status: 200,
        body: r#"{"status":"starting"}"#.into(),
    }]);
    assert!(!client(&server, |_| {}).health());
}

#[test]
fn invalid_requests_never_reach_the_wire() {
    let server = FakeServer::start([]);
    let mut req = request();
    req.num_samples = 0;
    let err = client(&server, |_| {}).generate(&req).unwrap_err();
    assert!(matches!(err, BackendError::InvalidRequest { .. }));
    assert_eq!(server.attempts(), 0);
}

#[test]
fn concurrency_cap_is_enforced() {
    let slow = || Scripted::Slow(Duration::from_millis(150), 200, r#"{"outputs":["x","y"]}"#.into());
    let server = FakeServer::start((0..6).map(|_| slow()));
    let backend = client(&server, |c| c.max_concurrency = 2);
    std::thread::scope(|s| {
        for i in 0..6 {
            let backend = &backend;
            s.spawn(move || backend.generate(&request().with_seed(i)).unwrap());
        }
    });
    assert_eq!(server.attempts(), 6);
    assert!(server.peak_concurrency() <= 2, "peak {}", server.peak_concurrency());
}

#[test]
fn backoff_schedule() {
    let policy = RetryPolicy::default();
    let delays: Vec<u128> = (1..5).map(|a| policy.delay_after(a).as_millis()).collect();
    assert_eq!(delays, [250, 500, 1000, 2000]);
    assert_eq!(policy.max_attempts, 5);
}
