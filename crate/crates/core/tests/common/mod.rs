#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use safescale::benchmark::{QuestionType, Subspecialty};
use safescale::{Benchmark, OptionSafetyLabels, Question};
use serde_json::Value;

pub fn question(id: &str, n_options: usize, correct: usize, labels: Vec<OptionSafetyLabels>) -> Question {
    assert_eq!(labels.len(), n_options);
    Question {
        id: id.into(),
        stem: format!("Stem of {id}?"),
        options: (0..n_options).map(|j| format!("Option {j} of {id}")).collect(),
        correct_index: correct,
        labels,
        clean_evidence: format!("Evidence for {id}."),
        conflict_evidence: format!("Evidence for {id}, plus a contradicting remark."),
        question_type: QuestionType::Diagnosis,
        subspecialties: [Subspecialty::Chest].into_iter().collect(),
        source_subset: "synthetic".into(),
    }
}

pub fn plain_question(id: &str, n_options: usize, correct: usize) -> Question {
    question(id, n_options, correct, vec![OptionSafetyLabels::default(); n_options])
}

pub fn benchmark(questions: Vec<Question>) -> Benchmark {
    Benchmark {
        name: "synthetic".into(),
        questions,
    }
}

/// One request seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct Seen {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

/// Minimal OpenAI-compatible HTTP server. The handler sees each request
/// and its zero-based arrival number and returns (status, body).
pub struct MockServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    pub max_in_flight: Arc<AtomicUsize>,
}

pub fn completion(texts: &[&str]) -> String {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"index": i, "message": {"role": "assistant", "content": t}}))
        .collect();
    serde_json::json!({"id": "cmpl", "object": "chat.completion", "choices": choices}).to_string()
}

impl MockServer {
    pub fn start<F>(delay_ms: u64, handler: F) -> MockServer
    where
        F: Fn(&Seen, usize) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        {
            let seen = seen.clone();
            let max_in_flight = max_in_flight.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(mut stream) = stream else { continue };
                    let (seen, handler, counter) = (seen.clone(), handler.clone(), counter.clone());
                    let (in_flight, max_in_flight) = (in_flight.clone(), max_in_flight.clone());
                    std::thread::spawn(move || {
                        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        max_in_flight.fetch_max(now, Ordering::SeqCst);
                        let mut reader = BufReader::new(stream.try_clone().unwrap());
                        let mut request_line = String::new();
                        reader.read_line(&mut request_line).unwrap();
                        let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                        let mut length = 0;
                        let mut authorization = None;
                        loop {
                            let mut line = String::new();
                            reader.read_line(&mut line).unwrap();
                            let line = line.trim_end();
                            if line.is_empty() {
                                break;
                            }
                            if let Some((k, v)) = line.split_once(':') {
                                match k.to_ascii_lowercase().as_str() {
                                    "content-length" => length = v.trim().parse().unwrap(),
                                    "authorization" => authorization = Some(v.trim().to_string()),
                                    _ => {}
                                }
                            }
                        }
                        let mut body = vec![0u8; length];
                        reader.read_exact(&mut body).unwrap();
                        let req = Seen {
                            path,
                            authorization,
                            body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                        };
                        let n = counter.fetch_add(1, Ordering::SeqCst);
                        let (status, payload) = handler(&req, n);
                        seen.lock().unwrap().push(req);
                        std::thread::sleep(std::time::Duration::from_millis(delay_ms));
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                        let response = format!(
                            "HTTP/1.1 {status} STATUS\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                            payload.len()
                        );
                        let _ = stream.write_all(response.as_bytes());
                    });
                }
            });
        }
        MockServer {
            url,
            seen,
            max_in_flight,
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}
