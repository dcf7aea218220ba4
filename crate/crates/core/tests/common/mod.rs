//! Independent reference implementations and fixture helpers for tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use plrh_core::data_model::{AnnotatedAnswers, Dataset, FeatureVector, Sample, SampleId, Split};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn id(s: &str) -> SampleId {
    SampleId::new(s).unwrap()
}

/// Neumaier-compensated sum of products.
fn dot_compensated(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let err = x.mul_add(*y, -p);
        let t = sum + p;
        c += if sum.abs() >= p.abs() { (sum - t) + p } else { (p - t) + sum };
        c += err;
        sum = t;
    }
    sum + c
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let num = dot_compensated(a, b);
    let den = dot_compensated(a, a).sqrt() * dot_compensated(b, b).sqrt();
    (num / den).clamp(-1.0, 1.0)
}

/// Scores every pool entry, sorts the whole list by (score desc, id asc)
/// and keeps the first `n`.
pub fn select_examples_oracle(query: &[f64], pool: &[(SampleId, Vec<f64>)], n: usize) -> Vec<(SampleId, f64)> {
    let mut all: Vec<(SampleId, f64)> = pool
        .iter()
        .map(|(id, v)| (id.clone(), cosine_oracle(query, v)))
        .collect();
    all.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    all.truncate(n);
    all
}

/// Soft accuracy per the annotation-count rule, computed with rationals.
pub fn accuracy_oracle(matches: usize) -> (usize, usize) {
    if matches >= 3 {
        (1, 1)
    } else {
        (matches, 3)
    }
}

pub fn sample(id_: &str, split: Split, caption: &str, question: &str, answers: &[&str], v: Vec<f32>) -> Sample {
    Sample {
        id: id(id_),
        split,
        caption: caption.into(),
        question: question.into(),
        answers: AnnotatedAnswers::new(answers.iter().map(|s| s.to_string()).collect()),
        feature: FeatureVector::new(v).unwrap(),
    }
}

/// `n_train` train and `n_test` test samples with distinct captions and
/// deterministic 4-dim features.
pub fn toy_dataset(n_train: usize, n_test: usize) -> Dataset {
    let mut samples = Vec::new();
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let prefix = if i < n_train { "tr" } else { "te" };
        let f = i as f32;
        samples.push(sample(
            &format!("{prefix}{i:03}"),
            split,
            &format!("Scene number {i}."),
            &format!("What is object {i}?"),
            &[&format!("thing{}", i % 5), &format!("thing{}", i % 5), &format!("thing{}", i % 5)],
            vec![1.0 + (f * 0.7).sin(), 1.0 + (f * 1.3).cos(), 0.5 + (f * 0.31).sin().abs(), 0.25],
        ));
    }
    Dataset::new("toy", 4, samples).unwrap()
}

/// A request as seen by [`TestServer`].
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub head: String,
    pub body: String,
}

/// Minimal HTTP/1.1 responder on a loopback port. Each connection is handled
/// on its own thread by `respond`, which returns (status, body, delay).
pub struct TestServer {
    pub url: String,
    pub seen: std::sync::Arc<std::sync::Mutex<Vec<SeenRequest>>>,
}

impl TestServer {
    pub fn start<F>(respond: F) -> Self
    where
        F: Fn(usize, &SeenRequest) -> (u16, String, std::time::Duration) + Send + Sync + 'static,
    {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::sync::{Arc, Mutex};

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let seen: Arc<Mutex<Vec<SeenRequest>>> = Arc::default();
        let respond = Arc::new(respond);
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let (respond, log) = (respond.clone(), log.clone());
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut head = String::new();
                    let mut content_length = 0;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            content_length = v.trim().parse().unwrap();
                        }
                        if line == "\r\n" {
                            break;
                        }
                        head.push_str(&line);
                    }
                    let mut body = vec![0; content_length];
                    reader.read_exact(&mut body).unwrap();
                    let req = SeenRequest {
                        head,
                        body: String::from_utf8(body).unwrap(),
                    };
                    let index = {
                        let mut log = log.lock().unwrap();
                        log.push(req.clone());
                        log.len() - 1
                    };
                    let (status, body, delay) = respond(index, &req);
                    std::thread::sleep(delay);
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                });
            }
        });
        Self { url, seen }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

/// An OpenAI-style completion body carrying `text`.
pub fn completion_body(text: &str) -> String {
    serde_json::json!({"choices": [{"text": text, "finish_reason": "stop"}]}).to_string()
}

pub type Pool = Vec<(SampleId, Vec<f64>)>;

/// Random pool with engineered ties: exact duplicates and power-of-two
/// rescaled copies under fresh ids, which score identically to their source.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Pool, usize) {
    let dim = rng.gen_range(1..=64);
    let size = rng.gen_range(1..=1000);
    let mut pool: Pool = Vec::with_capacity(size);
    let mut ids: Vec<usize> = (0..size).collect();
    ids.shuffle(rng);
    for &k in &ids {
        let v = if !pool.is_empty() && rng.gen_bool(0.2) {
            let src = &pool[rng.gen_range(0..pool.len())].1;
            let scale = 2f64.powi(rng.gen_range(-3..=3));
            src.iter().map(|x| x * scale).collect()
        } else {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) as f32 as f64).collect();
                if v.iter().any(|&x| x != 0.0) {
                    break v;
                }
            }
        };
        pool.push((id(&format!("t{k:04}")), v));
    }
    let query = if rng.gen_bool(0.1) {
        pool[0].1.clone()
    } else {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let n = rng.gen_range(1..=size.min(40) + 2);
    (query, pool, n)
}
