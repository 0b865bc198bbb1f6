use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use embrag::llm::{CompletionBackend, CompletionParams, HttpBackend, HttpConfig};

/// Serves one canned reply per connection and reports each request's
/// Authorization header and body.
fn serve(replies: Vec<(u16, &'static str)>) -> (String, mpsc::Receiver<(Option<String>, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut auth = None;
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "authorization" => auth = Some(value.trim().to_owned()),
                    "content-length" => length = value.trim().parse().unwrap(),
                    _ => {}
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            tx.send((auth, String::from_utf8(request).unwrap())).unwrap();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/complete"), rx)
}

fn config(endpoint: String, key_env: &str) -> HttpConfig {
    HttpConfig {
        endpoint,
        api_key_env: Some(key_env.into()),
        timeout_secs: 5.0,
        retries: 2,
        backoff_ms: 1,
        max_in_flight: 1,
    }
}

#[test]
fn retries_then_reads_completion() {
    std::env::set_var("EMBRAG_HTTP_TEST_KEY", "secret");
    let (endpoint, rx) = serve(vec![(500, "{}"), (200, r#"{"choices": [{"text": "<RULE>a</RULE>"}]}"#)]);
    let backend = HttpBackend::new(config(endpoint, "EMBRAG_HTTP_TEST_KEY")).unwrap();
    let params = CompletionParams { max_tokens: 7, temperature: 0.0 };
    assert_eq!(backend.complete("hello", &params).unwrap(), "<RULE>a</RULE>");
    for _ in 0..2 {
        let (auth, body) = rx.recv().unwrap();
        assert_eq!(auth.as_deref(), Some("Bearer secret"));
        let json: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(json["prompt"], "hello");
        assert_eq!(json["max_tokens"], 7);
    }
}

#[test]
fn gives_up_after_retries() {
    let (endpoint, _rx) = serve(vec![(503, "{}"), (503, "{}"), (503, "{}")]);
    let backend = HttpBackend::new(config(endpoint, "EMBRAG_HTTP_UNSET_KEY")).unwrap();
    assert!(backend.complete("x", &CompletionParams::default()).is_err());
}

#[test]
fn missing_text_is_an_error() {
    let (endpoint, _rx) = serve(vec![(200, r#"{"other": 1}"#)]);
    let mut cfg = config(endpoint, "EMBRAG_HTTP_UNSET_KEY");
    cfg.retries = 0;
    let backend = HttpBackend::new(cfg).unwrap();
    assert!(backend.complete("x", &CompletionParams::default()).is_err());
}
