use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use ruleprompt::gateway::{ChatClient, EndpointConfig, TransportStatus};
use ruleprompt::promptkit::{compose_prompt, PromptModules, RenderedPrompt};
use ruleprompt::RuleConfig;

#[derive(Clone)]
enum Reply {
    Status(u16, &'static str),
    Stall(Duration),
}

struct Stub {
    base_url: String,
    requests: mpsc::Receiver<String>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        let end = line == "\r\n";
        head.push_str(&line);
        if end {
            break;
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).unwrap();
    head + &String::from_utf8(body).unwrap()
}

/// Serves one scripted reply per connection, in order.
fn stub(script: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in script {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let _ = tx.send(read_request(&mut stream));
            match reply {
                Reply::Status(code, body) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                }
                Reply::Stall(d) => thread::sleep(d),
            }
        }
    });
    Stub {
        base_url,
        requests: rx,
    }
}

fn cfg(base_url: &str, max_retries: u32) -> EndpointConfig {
    EndpointConfig {
        base_url: base_url.into(),
        model_name: "stub-model".into(),
        api_key: Some("k-123".into()),
        timeout_secs: 2.0,
        max_retries,
        temperature: 0.0,
        backoff_base_ms: 1,
    }
}

fn prompt() -> RenderedPrompt {
    compose_prompt(
        &PromptModules::defaults(&RuleConfig::default()),
        &[],
        "Sensor 1: abs_z = 3.5",
    )
    .unwrap()
}

const OK_ANOMALY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"anomaly"}}]}"#;

#[test]
fn echoes_reply_and_sends_chat_request() {
    let s = stub(vec![Reply::Status(200, OK_ANOMALY)]);
    let client = ChatClient::new(cfg(&s.base_url, 2)).unwrap();
    let ex = client.send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::Ok);
    assert_eq!(ex.reply_text, "anomaly");
    assert_eq!(ex.attempts, 1);
    assert_eq!(ex.prompt_tokens, prompt().token_count);

    let req = s.requests.recv().unwrap();
    assert!(req.starts_with("POST /v1/chat/completions "), "{req}");
    assert!(req.to_ascii_lowercase().contains("authorization: bearer k-123"));
    let body: serde_json::Value = serde_json::from_str(&req[req.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], prompt().text);
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn server_errors_exhaust_retries() {
    let s = stub(vec![Reply::Status(500, "{}"); 3]);
    let ex = ChatClient::new(cfg(&s.base_url, 2)).unwrap().send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::HttpError(500));
    assert_eq!(ex.attempts, 3);
    assert_eq!(ex.reply_text, "");
    assert_eq!(s.requests.try_iter().count(), 3);
}

#[test]
fn retry_recovers_after_one_server_error() {
    let s = stub(vec![Reply::Status(503, "{}"), Reply::Status(200, OK_ANOMALY)]);
    let ex = ChatClient::new(cfg(&s.base_url, 2)).unwrap().send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::Ok);
    assert_eq!(ex.attempts, 2);
}

#[test]
fn malformed_body_is_a_parse_error() {
    for body in ["not json", r#"{"choices":[]}"#, r#"{"choices":[{"message":{"content":""}}]}"#] {
        let s = stub(vec![Reply::Status(200, body)]);
        let ex = ChatClient::new(cfg(&s.base_url, 2)).unwrap().send(&prompt());
        assert_eq!(ex.transport_status, TransportStatus::ParseError, "{body}");
        assert_eq!(ex.attempts, 1);
    }
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![Reply::Status(400, "{}")]);
    let ex = ChatClient::new(cfg(&s.base_url, 2)).unwrap().send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::HttpError(400));
    assert_eq!(ex.attempts, 1);
}

#[test]
fn unauthorized_without_key_is_missing_key() {
    let s = stub(vec![Reply::Status(401, "{}")]);
    let mut c = cfg(&s.base_url, 2);
    c.api_key = None;
    let client = ChatClient::new(c).unwrap();
    let ex = client.send(&prompt());
    let expected = if std::env::var_os(ruleprompt::gateway::API_KEY_ENV).is_some() {
        TransportStatus::HttpError(401)
    } else {
        TransportStatus::MissingApiKey
    };
    assert_eq!(ex.transport_status, expected);
}

#[test]
fn stalled_server_times_out() {
    let s = stub(vec![Reply::Stall(Duration::from_millis(1500))]);
    let mut c = cfg(&s.base_url, 0);
    c.timeout_secs = 0.3;
    let ex = ChatClient::new(c).unwrap().send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::Timeout);
    assert!(ex.latency_secs < 1.4, "{}", ex.latency_secs);
}

#[test]
fn refused_connection_is_reported() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let ex = ChatClient::new(cfg(&format!("http://{addr}"), 1)).unwrap().send(&prompt());
    assert_eq!(ex.transport_status, TransportStatus::Connection);
    assert_eq!(ex.attempts, 2);
}
