mod common;

use std::sync::Arc;
use std::thread::sleep;
use std::time::Duration;

use annobench::gateway::stub::{StubConfig, StubModel, StubReply, StubRequest, StubServer};
use annobench::gateway::{
    Clock, FixedClock, Gateway, GatewayError, ModelConfig, Protocol, RetryPolicy, SamplingParams, SystemClock,
};

use common::{model, ALPHA_TAG};

const FAST_RETRY: RetryPolicy = RetryPolicy {
    max_attempts: 3,
    initial_backoff_ms: 1,
    max_backoff_ms: 4,
};

fn gateway(clock: Arc<dyn Clock>) -> Gateway {
    Gateway::new(clock, Duration::from_secs(10), 1)
}

fn fixed() -> Gateway {
    gateway(Arc::new(FixedClock::new(Duration::from_millis(100))))
}

fn alpha(server: &StubServer) -> (ModelConfig, SamplingParams) {
    let m = model("Alpha", ALPHA_TAG, server.url());
    let s = m.validate().unwrap();
    (m, s)
}

fn serve(reply: impl Fn(&StubRequest, usize) -> StubReply + Send + Sync + 'static) -> StubServer {
    StubServer::start(StubConfig::new(vec![StubModel::new(ALPHA_TAG)], Arc::new(reply))).unwrap()
}

#[test]
fn answered_query_records_raw_text_and_one_attempt() {
    let raw = "Sure, here it is: {\"response\": 1} ✓";
    let server = StubServer::start(StubConfig::constant(vec![StubModel::new(ALPHA_TAG)], raw)).unwrap();
    let (m, s) = alpha(&server);
    let r = fixed().submit_query(&m, &s, "Classify this.", "fp", &FAST_RETRY).unwrap();
    assert_eq!(r.raw_output, raw);
    assert_eq!(r.output_chars, raw.chars().count());
    assert_eq!(r.attempts, 1);
    assert_eq!(r.duration_ns, 100_000_000);
    assert_eq!(r.fingerprint, "fp");
    assert_eq!(server.query_count(), 1);
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(|_, seen| if seen < 2 { StubReply::Status(503) } else { StubReply::Text("{\"response\": 0}".into()) });
    let (m, s) = alpha(&server);
    let r = fixed().submit_query(&m, &s, "Classify this.", "fp", &FAST_RETRY).unwrap();
    assert_eq!(r.attempts, 3);
    // Each attempt is timed; backoff sleeps are not.
    assert_eq!(r.duration_ns, 300_000_000);
    assert_eq!(server.query_count(), 3);
}

#[test]
fn exhausted_retries_return_a_failure() {
    let server = serve(|_, _| StubReply::Status(500));
    let (m, s) = alpha(&server);
    let f = fixed().submit_query(&m, &s, "Classify this.", "fp", &FAST_RETRY).unwrap_err();
    assert_eq!(f.attempts, 3);
    assert!(f.error.contains("500"), "{}", f.error);
    assert_eq!(server.query_count(), 3);
}

#[test]
fn unreachable_endpoint_fails_without_panicking() {
    let server = serve(|_, _| StubReply::Text(String::new()));
    let (m, s) = alpha(&server);
    drop(server);
    let f = fixed().submit_query(&m, &s, "Classify this.", "fp", &FAST_RETRY).unwrap_err();
    assert_eq!(f.attempts, 3);
    assert!(!f.error.is_empty());
}

#[test]
fn chat_protocol_round_trip() {
    let server = serve(|req, _| {
        assert!(req.is_chat());
        StubReply::Text(format!("echo: {}", req.prompt()))
    });
    let (mut m, _) = alpha(&server);
    m.endpoint.protocol = Protocol::Chat;
    let s = m.validate().unwrap();
    let r = fixed().submit_query(&m, &s, "Hello there.", "fp", &FAST_RETRY).unwrap();
    assert_eq!(r.raw_output, "echo: Hello there.");
    let req = &server.requests()[0];
    assert_eq!(req.model(), ALPHA_TAG);
    assert_eq!(req.sampling(), (Some(0.6), Some(40), Some(0.95)));
    let health = fixed().health_check(&m).unwrap();
    assert!(health.server_version.starts_with("openai-compatible"), "{}", health.server_version);
}

#[test]
fn health_check_reports_version_and_digest() {
    let server = serve(|_, _| StubReply::Text(String::new()));
    let (mut m, _) = alpha(&server);
    let expected = StubModel::new(ALPHA_TAG).digest;
    let ok = fixed().health_check(&m).unwrap();
    assert_eq!(ok.server_version, "ollama 0.0.0-stub");
    assert_eq!(ok.digest.as_deref(), Some(expected.as_str()));
    assert!(ok.warnings.is_empty());

    m.digest = Some(expected[..12].to_owned());
    assert!(fixed().health_check(&m).unwrap().warnings.is_empty());

    m.digest = Some("0123456789ab".into());
    let warned = fixed().health_check(&m).unwrap();
    assert_eq!(warned.warnings.len(), 1);
    assert!(warned.warnings[0].contains("digest mismatch"), "{:?}", warned.warnings);
}

#[test]
fn missing_model_names_the_tag() {
    let server = serve(|_, _| StubReply::Text(String::new()));
    for protocol in [Protocol::Generate, Protocol::Chat] {
        let mut m = model("Ghost", "ghost:3b", server.url());
        m.endpoint.protocol = protocol;
        let err = fixed().health_check(&m).unwrap_err();
        assert!(matches!(&err, GatewayError::ModelNotAvailable { tag, .. } if tag == "ghost:3b"), "{err}");
        assert!(err.to_string().contains("ghost:3b"));
    }
}

#[test]
fn warm_up_is_not_counted_as_a_query() {
    let server = serve(|_, _| StubReply::Text("{\"response\": 1}".into()));
    let (m, s) = alpha(&server);
    let load = fixed().warm_up(&m, &s).unwrap();
    assert_eq!(load, Duration::from_millis(100));
    assert_eq!(server.query_count(), 0);
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn wall_clock_durations_add_up() {
    let delays = [20u64, 35, 50, 65, 80];
    let server = serve(move |req, _| {
        let i: usize = req.prompt().parse().unwrap();
        sleep(Duration::from_millis(delays[i]));
        StubReply::Text("{\"response\": 1}".into())
    });
    let (m, s) = alpha(&server);
    let gw = gateway(Arc::new(SystemClock));
    let started = std::time::Instant::now();
    let total_ns: u64 = (0..delays.len())
        .map(|i| gw.submit_query(&m, &s, &i.to_string(), "fp", &FAST_RETRY).unwrap().duration_ns)
        .sum();
    let wall = started.elapsed().as_nanos() as f64;
    let slept = delays.iter().sum::<u64>() as f64 * 1e6;
    assert!(total_ns as f64 >= slept, "{total_ns} < {slept}");
    // Per-query timings cover the whole sequential wall time within 1%
    // plus a small fixed allowance for loop overhead.
    assert!((wall - total_ns as f64).abs() <= 0.01 * wall + 2e6, "wall {wall}, summed {total_ns}");
}
