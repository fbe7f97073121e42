//! Remote adapters against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use deid_core::backends::remote::{RemoteChat, RemoteOcr, RetryPolicy};
use deid_core::backends::{BackendError, CallContext, ChatModel, ChatRequest, ChatTask, CropExtractor, LocalizedCrop};
use deid_core::dataset::Raster;
use deid_core::BoundingBox;
use serde_json::{json, Value};

struct Stub {
    url: String,
    bodies: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves the scripted (status, body) replies in order, repeating the last.
fn stub(script: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push((auth, serde_json::from_slice(&body).unwrap_or(Value::Null)));
            let (status, reply) = &script[i.min(script.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    Stub { url, bodies }
}

fn fast() -> RetryPolicy {
    RetryPolicy { base: Duration::from_millis(5), timeout: Duration::from_secs(5) }
}

fn chat_reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn request() -> ChatRequest {
    ChatRequest {
        system: None,
        prompt: "hello".into(),
        images: vec!["data:image/png;base64,AAAA".into()],
        max_tokens: 16,
        task: ChatTask::Analyze { tagged: vec![] },
    }
}

fn ctx(retry_limit: u32) -> CallContext {
    CallContext { run_seed: 0, retry_limit, call_key: 0, round: 0 }
}

#[test]
fn echo_round_trip_and_request_shape() {
    let s = stub(vec![(200, chat_reply("pong"))]);
    std::env::set_var("DEID_TEST_KEY_ECHO", "secret");
    let chat = RemoteChat::new("m", &s.url, "some-model", Some("DEID_TEST_KEY_ECHO".into()), 10, fast());
    let reply = chat.complete(&request(), &ctx(2)).unwrap();
    assert_eq!((reply.text.as_str(), reply.attempts), ("pong", 1));
    let bodies = s.bodies.lock().unwrap();
    let (auth, body) = &bodies[0];
    assert_eq!(auth, "Bearer secret");
    assert_eq!(body["model"], "some-model");
    assert_eq!(body["max_tokens"], 16);
    let content = &body["messages"][0]["content"];
    assert_eq!(content[0]["text"], "hello");
    assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AAAA");
}

#[test]
fn transient_errors_are_retried() {
    let s = stub(vec![(500, "{}".into()), (503, "{}".into()), (200, chat_reply("ok"))]);
    let chat = RemoteChat::new("m", &s.url, "x", None, 10, fast());
    let reply = chat.complete(&request(), &ctx(2)).unwrap();
    assert_eq!((reply.text.as_str(), reply.attempts), ("ok", 3));
}

#[test]
fn persistent_errors_exhaust_the_retry_limit() {
    let s = stub(vec![(500, "{}".into())]);
    let chat = RemoteChat::new("m", &s.url, "x", None, 10, fast());
    let err = chat.complete(&request(), &ctx(2)).unwrap_err();
    assert!(matches!(err, BackendError::CallFailed { attempts: 3, .. }), "{err}");
    assert_eq!(s.bodies.lock().unwrap().len(), 3);
}

#[test]
fn auth_rejection_and_dead_endpoint_are_unavailable() {
    let s = stub(vec![(401, "{}".into())]);
    let chat = RemoteChat::new("m", &s.url, "x", None, 10, fast());
    assert!(matches!(chat.complete(&request(), &ctx(2)), Err(BackendError::Unavailable { attempts: 1, .. })));

    // bind and drop to get a port nothing listens on
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = RemoteChat::new("m", &format!("http://127.0.0.1:{port}/x"), "x", None, 10, fast());
    assert!(matches!(dead.complete(&request(), &ctx(1)), Err(BackendError::Unavailable { attempts: 2, .. })));

    let unset = RemoteChat::new("m", &s.url, "x", Some("DEID_TEST_KEY_NEVER_SET".into()), 10, fast());
    assert!(matches!(unset.complete(&request(), &ctx(0)), Err(BackendError::Unavailable { attempts: 0, .. })));
}

#[test]
fn malformed_reply_is_a_failed_call() {
    let s = stub(vec![(200, json!({"choices": []}).to_string())]);
    let chat = RemoteChat::new("m", &s.url, "x", None, 10, fast());
    assert!(matches!(chat.complete(&request(), &ctx(0)), Err(BackendError::CallFailed { .. })));
}

#[test]
fn dedicated_ocr_sends_the_crop() {
    let s = stub(vec![(200, json!({"text": "MRN 123", "confidence": 0.4}).to_string())]);
    let ocr = RemoteOcr::new("ocr", &s.url, None, fast());
    let raster = Raster::filled(64, 32, 10);
    let crop =
        LocalizedCrop { image_id: "i".into(), imprint_id: 0, bbox: BoundingBox::new(4, 4, 20, 10), source: None };
    let out = ocr.extract(&crop, Some(&raster), &ctx(0)).unwrap();
    assert_eq!((out.text.as_str(), out.confidence), ("MRN 123", 0.4));
    let bodies = s.bodies.lock().unwrap();
    assert!(bodies[0].1["image"].as_str().unwrap().starts_with("data:image/png;base64,"));
}
