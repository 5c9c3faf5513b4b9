use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use razewright::providers::{
    ChatProvider, ChatRequest, EmbedProvider, HttpChat, HttpEmbedder, ProviderConfig, ProviderError,
    Retrying, RetryPolicy,
};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, extra headers, body)` per connection, in order.
struct Server {
    base_url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn serve(responses: Vec<(u16, Vec<(&'static str, &'static str)>, String)>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, headers, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let req = read_request(&stream);
            log.lock().unwrap().push(req);
            respond(stream, status, &headers, &body);
        }
    });
    Server { base_url, seen }
}

fn read_request(stream: &TcpStream) -> Seen {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap().to_string();
    let path = parts.next().unwrap().to_string();
    let (mut len, mut authorization) = (0usize, None);
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Seen {
        method,
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(mut stream: TcpStream, status: u16, headers: &[(&str, &str)], body: &str) {
    let mut out = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    for (k, v) in headers {
        out.push_str(&format!("{k}: {v}\r\n"));
    }
    out.push_str("\r\n");
    out.push_str(body);
    stream.write_all(out.as_bytes()).unwrap();
}

fn ok_chat(text: &str) -> (u16, Vec<(&'static str, &'static str)>, String) {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    });
    (200, vec![], body.to_string())
}

fn config(server: &Server, key_env: &str) -> ProviderConfig {
    let mut cfg = ProviderConfig::new(server.base_url.clone(), "wire-model");
    cfg.api_key_env = key_env.into();
    cfg.timeout = Duration::from_secs(5);
    cfg
}

#[test]
fn chat_posts_openai_shape_with_bearer_token() {
    let server = serve(vec![ok_chat("done")]);
    // Unique per test so parallel tests never observe each other's variable.
    unsafe { std::env::set_var("WIRE_TEST_KEY_A", "sk-wire") };
    let chat = HttpChat::new(config(&server, "WIRE_TEST_KEY_A"));
    let reply = chat
        .chat(&ChatRequest::user("", "what lifts the truss?").with_temperature(0.25))
        .unwrap();
    assert_eq!(reply, "done");
    assert_eq!(chat.usage().prompt_tokens, 11);
    assert_eq!(chat.usage().completion_tokens, 3);
    let seen = server.seen.lock().unwrap()[0].clone();
    assert_eq!(seen.method, "POST");
    assert_eq!(seen.path, "/v1/chat/completions");
    assert_eq!(seen.authorization.as_deref(), Some("Bearer sk-wire"));
    assert_eq!(seen.body["model"], "wire-model");
    assert_eq!(seen.body["temperature"], 0.25);
    assert_eq!(seen.body["messages"][0]["role"], "user");
    assert_eq!(seen.body["messages"][0]["content"], "what lifts the truss?");
}

#[test]
fn missing_key_sends_no_authorization() {
    let server = serve(vec![ok_chat("x")]);
    let chat = HttpChat::new(config(&server, "WIRE_TEST_KEY_NEVER_SET"));
    chat.chat(&ChatRequest::user("", "hi")).unwrap();
    assert_eq!(server.seen.lock().unwrap()[0].authorization, None);
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [1.0, 0.0]}
    ]});
    let server = serve(vec![(200, vec![], body.to_string())]);
    let emb = HttpEmbedder::new(config(&server, "WIRE_TEST_KEY_NEVER_SET"));
    let out = emb.embed(&["a".to_string(), "b".to_string()]).unwrap();
    assert_eq!(out[0].values(), &[1.0, 0.0]);
    assert_eq!(out[1].values(), &[0.0, 2.0]);
    let seen = server.seen.lock().unwrap()[0].clone();
    assert_eq!(seen.path, "/v1/embeddings");
    assert_eq!(seen.body["input"], serde_json::json!(["a", "b"]));
}

#[test]
fn status_codes_map_to_error_kinds() {
    let server = serve(vec![
        (429, vec![("Retry-After", "7")], "{}".into()),
        (500, vec![], "boom".into()),
        (400, vec![], "bad request".into()),
        (200, vec![], "not json".into()),
    ]);
    let chat = HttpChat::new(config(&server, "WIRE_TEST_KEY_NEVER_SET"));
    let req = ChatRequest::user("", "hi");

    let e = chat.chat(&req).unwrap_err();
    assert_eq!(e, ProviderError::RateLimited { retry_after: Some(Duration::from_secs(7)) });
    assert!(e.is_retryable());

    let e = chat.chat(&req).unwrap_err();
    assert!(matches!(&e, ProviderError::Protocol { status: Some(500), body } if body == "boom"));
    assert!(e.is_retryable());

    let e = chat.chat(&req).unwrap_err();
    assert!(matches!(e, ProviderError::Protocol { status: Some(400), .. }));
    assert!(!e.is_retryable());

    let e = chat.chat(&req).unwrap_err();
    assert!(matches!(e, ProviderError::Protocol { status: Some(200), .. }));
}

#[test]
fn retrying_recovers_after_server_error() {
    let server = serve(vec![(503, vec![], "busy".into()), ok_chat("second time")]);
    let chat = Retrying::new(
        HttpChat::new(config(&server, "WIRE_TEST_KEY_NEVER_SET")),
        RetryPolicy { max_attempts: 2, base_delay: Duration::from_millis(1) },
    );
    assert_eq!(chat.chat(&ChatRequest::user("", "hi")).unwrap(), "second time");
    assert_eq!(server.seen.lock().unwrap().len(), 2);
}

#[test]
fn refused_connection_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let chat = HttpChat::new(ProviderConfig::new(format!("http://127.0.0.1:{port}/v1"), "m"));
    let e = chat.chat(&ChatRequest::user("", "hi")).unwrap_err();
    assert!(matches!(e, ProviderError::Transport(_)), "{e:?}");
    assert!(e.is_retryable());
}
