use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use serde_json::Value;
use tautune::llm::{HttpBackend, LlmBackend, LlmBackendConfig, LlmError};

struct Captured {
    request_line: String,
    headers: Vec<String>,
    body: String,
}

/// Serves one canned `(status, body)` reply per connection, in order.
fn serve(replies: Vec<(u16, &'static str)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), rx)
}

fn config(base: &str, retries: u32) -> LlmBackendConfig {
    LlmBackendConfig {
        transport_retries: retries,
        backoff_base_ms: 5,
        timeout_seconds: 5.0,
        ..LlmBackendConfig::http(base)
    }
}

#[test]
fn posts_chat_completion_and_reads_content() {
    let (base, rx) = serve(vec![(200, r#"{"choices":[{"message":{"role":"assistant","content":"tau = 1.0"}}]}"#)]);
    let mut backend = HttpBackend::new(config(&base, 0)).unwrap();
    let exchange = backend.send("Tune tau.", 0).unwrap();
    assert_eq!(exchange.response, "tau = 1.0");
    assert_eq!(exchange.prompt, "Tune tau.");
    assert!(exchange.latency_ms >= 0.0);

    let req = rx.recv().unwrap();
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("content-type: application/json")));
    let body: Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["model"], "llama3");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Tune tau.");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["stream"], false);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (base, rx) = serve(vec![
        (503, r#"{"error":"busy"}"#),
        (500, r#"{"error":"oops"}"#),
        (200, r#"{"choices":[{"message":{"content":"tau = 0.9"}}]}"#),
    ]);
    let mut backend = HttpBackend::new(config(&base, 2)).unwrap();
    assert_eq!(backend.send("p", 0).unwrap().response, "tau = 0.9");
    assert_eq!(rx.try_iter().count(), 3);
}

#[test]
fn non_success_after_retries_carries_payload() {
    let (base, _rx) = serve(vec![(500, r#"{"error":"a"}"#), (502, r#"{"error":"b"}"#)]);
    let mut backend = HttpBackend::new(config(&base, 1)).unwrap();
    match backend.send("p", 0) {
        Err(LlmError::Transport { attempts, payload, message }) => {
            assert_eq!(attempts, 2);
            assert!(message.contains("502"));
            assert_eq!(payload.as_deref(), Some(r#"{"error":"b"}"#));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_json_is_not_retried() {
    let (base, rx) = serve(vec![(200, "not json")]);
    let mut backend = HttpBackend::new(config(&base, 3)).unwrap();
    match backend.send("p", 0) {
        Err(LlmError::Transport { attempts, payload, .. }) => {
            assert_eq!(attempts, 1);
            assert_eq!(payload.as_deref(), Some("not json"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(rx.try_iter().count(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    // Bind and drop to get a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut backend = HttpBackend::new(config(&format!("http://127.0.0.1:{port}"), 1)).unwrap();
    assert!(matches!(backend.send("p", 0), Err(LlmError::Transport { attempts: 2, .. })));
}

#[test]
fn custom_path_and_model() {
    let (base, rx) = serve(vec![(200, r#"{"choices":[{"message":{"content":"ok"}}]}"#)]);
    let cfg = LlmBackendConfig { path: "api/chat".into(), model: "llama3:70b".into(), ..config(&base, 0) };
    let mut backend = cfg.build().unwrap();
    backend.send("p", 0).unwrap();
    let req = rx.recv().unwrap();
    assert_eq!(req.request_line, "POST /api/chat HTTP/1.1");
    assert!(req.body.contains("llama3:70b"));
}
