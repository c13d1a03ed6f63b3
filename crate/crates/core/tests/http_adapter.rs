use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use overlaydetect::vlm::{
    EndpointConfig, HttpTransport, ImagePayload, RetryPolicy, VlmClient, VlmError, VlmRequest,
};

struct Captured {
    request_line: String,
    headers: Vec<(String, String)>,
    body: serde_json::Value,
}

/// Serves `replies` in order, one per connection, recording each request.
fn serve(replies: Vec<(u16, Vec<(&'static str, &'static str)>, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, extra, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k == "content-length")
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut raw = vec![0u8; len];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: serde_json::from_slice(&raw).unwrap_or(serde_json::Value::Null),
            });
            let mut response = format!("HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n", body.len());
            for (k, v) in extra {
                response.push_str(&format!("{k}: {v}\r\n"));
            }
            response.push_str("\r\n");
            response.push_str(&body);
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn config(url: &str, token_env: Option<&str>) -> EndpointConfig {
    EndpointConfig {
        base_url: url.to_string(),
        path: "/v1/complete".into(),
        model: Some("vision-model".into()),
        token_env: token_env.map(String::from),
        timeout_ms: 5_000,
        max_retries: 2,
        backoff_ms: 1,
        max_backoff_ms: 5,
        max_in_flight: 2,
    }
}

fn client(config: EndpointConfig) -> VlmClient {
    let retry = config.retry_policy();
    VlmClient::new(Arc::new(HttpTransport::new(config).unwrap()), retry, 2)
}

fn request() -> VlmRequest {
    VlmRequest::new("img-7", ImagePayload::new(vec![0xFF, 0xD8, 0xFF, 0xE0, 1, 2]), "Is there overlay text?")
        .with_request_id("img-7/zero_shot")
}

#[test]
fn sends_wire_request_and_reads_text() {
    let (url, seen) = serve(vec![(200, vec![], r#"{"text":"ANSWER: yes","truncated":false}"#.into())]);
    std::env::set_var("OVERLAYDETECT_HTTP_TEST_TOKEN", "s3cret");
    let c = client(config(&url, Some("OVERLAYDETECT_HTTP_TEST_TOKEN")));
    let response = c.complete(&request()).unwrap();
    assert_eq!(response.text, "ANSWER: yes");
    assert!(!response.truncated);

    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.request_line, "POST /v1/complete HTTP/1.1");
    assert!(req.headers.iter().any(|(k, v)| k == "authorization" && v == "Bearer s3cret"));
    assert_eq!(req.body["schema_version"], 1);
    assert_eq!(req.body["request_id"], "img-7/zero_shot");
    assert_eq!(req.body["model"], "vision-model");
    assert_eq!(req.body["prompt"], "Is there overlay text?");
    assert_eq!(req.body["image"]["format"], "jpeg");
    let decoded = base64::engine::general_purpose::STANDARD
        .decode(req.body["image"]["base64"].as_str().unwrap())
        .unwrap();
    assert_eq!(decoded, vec![0xFF, 0xD8, 0xFF, 0xE0, 1, 2]);
    assert_eq!(req.body["generation"]["temperature"], 0.0);
}

#[test]
fn retries_rate_limits_and_server_errors() {
    let (url, seen) = serve(vec![
        (429, vec![("Retry-After", "0")], "slow down".into()),
        (503, vec![], "busy".into()),
        (200, vec![], r#"{"text":"ANSWER: no"}"#.into()),
    ]);
    let c = client(config(&url, None));
    assert_eq!(c.complete(&request()).unwrap().text, "ANSWER: no");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_report_attempts() {
    let (url, _) = serve(vec![
        (500, vec![], String::new()),
        (500, vec![], String::new()),
        (500, vec![], String::new()),
    ]);
    let c = client(config(&url, None));
    match c.complete(&request()) {
        Err(VlmError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_body_is_protocol_error_without_retry() {
    let (url, seen) = serve(vec![(200, vec![], "<html>oops</html>".into())]);
    let c = client(config(&url, None));
    match c.complete(&request()) {
        Err(VlmError::Protocol { raw, .. }) => assert_eq!(raw, "<html>oops</html>"),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn client_error_status_is_protocol_error() {
    let (url, _) = serve(vec![(400, vec![], r#"{"error":"bad image"}"#.into())]);
    let c = client(config(&url, None));
    assert!(matches!(c.complete(&request()), Err(VlmError::Protocol { .. })));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = config(&url, None);
    cfg.max_retries = 1;
    let c = client(cfg);
    assert!(matches!(c.complete(&request()), Err(VlmError::Transport { attempts: 2, .. })));
}

#[test]
fn slow_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let held: Vec<_> = listener.incoming().take(1).collect();
        thread::sleep(Duration::from_millis(1500));
        drop(held);
    });
    let mut cfg = config(&url, None);
    cfg.timeout_ms = 200;
    cfg.max_retries = 0;
    let c = VlmClient::new(Arc::new(HttpTransport::new(cfg).unwrap()), RetryPolicy::immediate(0), 1);
    assert!(matches!(c.complete(&request()), Err(VlmError::Transport { attempts: 1, .. })));
}
