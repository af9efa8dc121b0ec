use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;
use std::time::Duration;

use autonli::gateway::{
    BackendConfig, BackendError, CompletionBackend, CompletionRequest, HttpCompletionBackend, WireFormat,
};
use autonli::promptkit::Relation;
use autonli::quality::{ClassifierBackend, HttpClassifier};
use autonli::trainer::{EmbeddingBackend, HttpEmbeddingBackend};

/// Serves one scripted `(status, body)` per connection and returns the request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, JoinHandle<Vec<serde_json::Value>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            seen.push(serde_json::from_slice(&request).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

fn request(prompt: &str) -> CompletionRequest<'_> {
    CompletionRequest {
        index: 0,
        prompt,
        model: "test-model",
        max_tokens: 16,
        temperature: 0.7,
        stop: Some("\""),
    }
}

fn backend(url: &str, wire_format: WireFormat) -> HttpCompletionBackend {
    HttpCompletionBackend::new(&BackendConfig {
        endpoint_url: url.to_owned(),
        wire_format,
        timeout_ms: 5_000,
        ..BackendConfig::default()
    })
    .unwrap()
}

#[test]
fn completion_format_restores_stripped_stop_sequence() {
    let (url, server) = serve(vec![
        (
            200,
            r#"{"choices":[{"text":"It was completed.","finish_reason":"stop"}]}"#.into(),
        ),
        (
            200,
            r#"{"choices":[{"text":"Runs on and on","finish_reason":"length"}]}"#.into(),
        ),
    ]);
    let b = backend(&url, WireFormat::Completion);
    assert_eq!(b.complete(&request("P1")).unwrap(), "It was completed.\"");
    assert_eq!(b.complete(&request("P2")).unwrap(), "Runs on and on");
    let bodies = server.join().unwrap();
    assert_eq!(bodies[0]["prompt"], "P1");
    assert_eq!(bodies[0]["model"], "test-model");
    assert_eq!(bodies[0]["stop"], serde_json::json!(["\""]));
}

#[test]
fn chat_format_reads_message_content() {
    let (url, server) = serve(vec![(
        200,
        r#"{"choices":[{"message":{"role":"assistant","content":"Fine.\" extra"},"finish_reason":"stop"}]}"#.into(),
    )]);
    let b = backend(&url, WireFormat::Chat);
    assert_eq!(b.complete(&request("Q")).unwrap(), "Fine.\" extra");
    let bodies = server.join().unwrap();
    assert_eq!(bodies[0]["messages"][0]["content"], "Q");
}

#[test]
fn status_codes_map_to_error_classes() {
    let (url, server) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (400, r#"{"error":"bad"}"#.into()),
        (200, "not json".into()),
    ]);
    let b = backend(&url, WireFormat::Completion);
    assert!(matches!(b.complete(&request("a")), Err(BackendError::Transient(_))));
    assert!(matches!(b.complete(&request("b")), Err(BackendError::Transient(_))));
    assert!(matches!(b.complete(&request("c")), Err(BackendError::Fatal(_))));
    match b.complete(&request("d")) {
        Err(BackendError::Protocol { raw_body, .. }) => assert_eq!(raw_body, "not json"),
        other => panic!("expected protocol error, got {other:?}"),
    }
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_transient() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(
        &format!("http://127.0.0.1:{port}/v1/completions"),
        WireFormat::Completion,
    );
    let err = b.complete(&request("x")).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

#[test]
fn embeddings_are_wrapped_in_the_summary_prompt_and_reordered() {
    let (url, server) = serve(vec![(
        200,
        r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#.into(),
    )]);
    let b = HttpEmbeddingBackend::new(url, "m", Duration::from_secs(5), None);
    let v = b.embed(&["A cat.", "A dog."]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let bodies = server.join().unwrap();
    assert_eq!(bodies[0]["input"][0], "This sentence: \"A cat.\" means in one word: \"");
}

#[test]
fn classifier_round_trip() {
    let (url, server) = serve(vec![(200, r#"{"label":"contradiction","confidence":0.93}"#.into())]);
    let c = HttpClassifier::new(url, Duration::from_secs(5));
    let p = c
        .classify("He spent several months in prison.", "He was never in prison.")
        .unwrap();
    assert_eq!(p.label, Relation::Contradiction);
    assert_eq!(p.confidence, Some(0.93));
    let bodies = server.join().unwrap();
    assert_eq!(bodies[0]["hypothesis"], "He was never in prison.");
}
