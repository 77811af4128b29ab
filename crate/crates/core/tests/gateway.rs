mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use reflectforge::gateway::{
    Backend, BackendConfig, BackendKind, ChatRequest, ChatResponse, FnBackend, Gateway, GatewayError,
    GenerationParams, ProbeBackend, RetryPolicy,
};

struct Captured {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves one response per status in `statuses`, one connection each.
fn stub_server(statuses: Vec<u16>) -> (String, Arc<Mutex<Vec<Captured>>>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for status in statuses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Captured {
                path: request_line.split_whitespace().nth(1).unwrap_or("").to_string(),
                authorization: auth,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let payload = match status {
                200 => r#"{"choices":[{"message":{"role":"assistant","content":"Therefore, the answer is (C)."},"finish_reason":"stop"}],"usage":{"prompt_tokens":12,"completion_tokens":7}}"#,
                _ => r#"{"error":"slow down"}"#,
            };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (base, seen, handle)
}

fn http_config(base_url: String, key_env: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        base_url,
        model_name: "stub-model".into(),
        api_key_env: key_env.into(),
        max_in_flight: 2,
        retry: RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 1,
        },
        timeout_ms: 5_000,
        mock_script: None,
    }
}

fn request() -> ChatRequest {
    ChatRequest::prompt("eval.answer|q1|0", Some("Be brief."), "Pick one.", GenerationParams::with_temperature(0.0))
}

#[test]
fn http_retries_rate_limits_then_succeeds() {
    std::env::set_var("RF_TEST_KEY_RETRY", "sk-test");
    let (base, seen, server) = stub_server(vec![429, 429, 200]);
    let gw = Gateway::http(&http_config(base, "RF_TEST_KEY_RETRY")).unwrap();
    let resp = gw.complete(&request()).unwrap();
    server.join().unwrap();

    assert_eq!(resp.content, "Therefore, the answer is (C).");
    assert_eq!(resp.attempts, 3);
    assert_eq!(resp.usage.completion_tokens, 7);
    assert_eq!(gw.total_attempts(), 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let last = &seen[2];
    assert_eq!(last.path, "/v1/chat/completions");
    assert_eq!(last.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(last.body["model"], "stub-model");
    assert_eq!(last.body["temperature"], 0.0);
    assert_eq!(last.body["messages"][0]["role"], "system");
    assert_eq!(last.body["messages"][1]["content"], "Pick one.");
}

#[test]
fn http_auth_failure_is_not_retried() {
    std::env::set_var("RF_TEST_KEY_AUTH", "sk-wrong");
    let (base, seen, server) = stub_server(vec![401]);
    let gw = Gateway::http(&http_config(base, "RF_TEST_KEY_AUTH")).unwrap();
    let err = gw.complete(&request()).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn http_rate_limit_budget_exhausts() {
    std::env::set_var("RF_TEST_KEY_BUDGET", "sk-test");
    let (base, _, server) = stub_server(vec![429; 4]);
    let gw = Gateway::http(&http_config(base, "RF_TEST_KEY_BUDGET")).unwrap();
    let err = gw.complete(&request()).unwrap_err();
    server.join().unwrap();
    assert_eq!(err, GatewayError::RateLimited { attempts: 4 });
}

#[test]
fn missing_api_key_fails_before_any_request() {
    let err = Gateway::http(&http_config("http://127.0.0.1:9/v1".into(), "RF_TEST_KEY_NEVER_SET")).unwrap_err();
    match err {
        GatewayError::Auth(msg) => assert!(msg.contains("RF_TEST_KEY_NEVER_SET")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn in_flight_never_exceeds_the_limit() {
    let echo = FnBackend::new(|req: &ChatRequest| Ok(ChatResponse::stop(req.tag.clone())));
    let probe = Arc::new(ProbeBackend::new(echo, Duration::from_millis(15)));
    let gw = Gateway::new(probe.clone() as Arc<dyn Backend>, 8, RetryPolicy::default());
    let reqs: Vec<ChatRequest> = (0..100)
        .map(|i| ChatRequest::prompt(format!("t|{i}"), None, "x", GenerationParams::default()))
        .collect();
    let replies = std::thread::scope(|s| {
        let handles: Vec<_> = reqs.iter().map(|r| s.spawn(|| gw.complete(r))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    for (i, r) in replies.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().content, format!("t|{i}"));
    }
    assert_eq!(probe.peak(), 8, "100 concurrent callers should saturate the limit exactly");
    assert_eq!(gw.peak_in_flight(), 8);
}

#[test]
fn batch_keeps_request_order() {
    let gw = common::gateway(|req| Ok(ChatResponse::stop(req.tag.to_uppercase())));
    let reqs: Vec<ChatRequest> = (0..50)
        .map(|i| ChatRequest::prompt(format!("tag{i}"), None, "x", GenerationParams::default()))
        .collect();
    let out = gw.complete_many(&reqs);
    for (i, r) in out.into_iter().enumerate() {
        assert_eq!(r.unwrap().content, format!("TAG{i}"));
    }
}
