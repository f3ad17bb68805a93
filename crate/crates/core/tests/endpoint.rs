//! Chat-completions backend against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use factdpo::generation::{generate, Backend, GeneratorConfig};
use factdpo::Error;
use serde_json::{json, Value};

/// Serves one canned (status, body) per connection and records request bodies.
fn stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .push(serde_json::from_slice(&buf).unwrap_or(Value::Null));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn config(url: &str) -> GeneratorConfig {
    GeneratorConfig {
        backend: Backend::Endpoint,
        endpoint_url: Some(url.to_string()),
        model_name: Some("stub-model".into()),
        retry_limit: 2,
        ..GeneratorConfig::default()
    }
}

fn choices(texts: &[&str]) -> String {
    json!({"choices": texts.iter().map(|t| json!({"message": {"role": "assistant", "content": t}})).collect::<Vec<_>>()})
        .to_string()
}

#[test]
fn returns_every_choice_and_sends_the_request_shape() {
    let (url, seen) = stub(vec![(200, choices(&["Yes, edited.", "No, same."]))]);
    let out = generate("CLAIM: x", 2, &config(&url)).unwrap();
    assert_eq!(
        out,
        vec!["Yes, edited.".to_string(), "No, same.".to_string()]
    );
    let req = &seen.lock().unwrap()[0];
    assert_eq!(req["model"], "stub-model");
    assert_eq!(req["n"], 2);
    assert_eq!(req["messages"][0]["content"], "CLAIM: x");
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = stub(vec![(503, "{}".into()), (200, choices(&["No, fine."]))]);
    let out = generate("p", 1, &config(&url)).unwrap();
    assert_eq!(out, vec!["No, fine.".to_string()]);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, r#"{"error":"bad"}"#.into())]);
    match generate("p", 1, &config(&url)) {
        Err(Error::Backend {
            status: Some(400), ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn wrong_choice_count_is_a_backend_error() {
    let (url, _) = stub(vec![(200, choices(&["Yes."]))]);
    assert!(matches!(
        generate("p", 3, &config(&url)),
        Err(Error::Backend { .. })
    ));
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = GeneratorConfig {
        retry_limit: 1,
        ..config(&format!("http://127.0.0.1:{port}/v1/chat/completions"))
    };
    let err = generate("p", 1, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::Backend { status: None, .. }),
        "{err:?}"
    );
    assert_eq!(err.exit_code(), 3);
}
